//! Tracklets and their sources: KITTI tracking files and a synthetic
//! scene generator.

pub mod kitti;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Box3D;
use crate::pointcloud::{PointCloud, SearchRegion};

pub use kitti::{read_kitti_tracking, read_velodyne_bin, write_velodyne_bin, Calibration};
pub use synthetic::{gen_synthetic_tracklet, SyntheticSceneConfig, SyntheticTracklet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    #[default]
    Car,
    Human,
}

impl Category {
    pub fn region(self) -> SearchRegion {
        match self {
            Category::Car => SearchRegion::CAR,
            Category::Human => SearchRegion::HUMAN,
        }
    }

    /// Label type written to and matched in KITTI files.
    pub fn kitti_type(self) -> &'static str {
        match self {
            Category::Car => "Car",
            Category::Human => "Pedestrian",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "car" => Ok(Category::Car),
            "human" | "pedestrian" => Ok(Category::Human),
            _ => Err(format!("unknown category `{s}`")),
        }
    }
}

/// One frame of a tracklet: the full sensor-frame scan and the target box.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Frame number in the source sequence.
    pub index: usize,
    pub points: PointCloud,
    pub gt: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: String,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Tracklet {
    /// Checks that there are at least two frames and that every box has
    /// the size of the first one.
    pub fn new(id: impl Into<String>, category: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            category: category.into(),
            frames,
        };
        if t.frames.len() < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "tracklet {} has {} frames",
                t.id,
                t.frames.len()
            )));
        }
        let b0 = t.frames[0].gt;
        for f in &t.frames {
            if (f.gt.w - b0.w).abs() > 1e-6 || (f.gt.l - b0.l).abs() > 1e-6 || (f.gt.h - b0.h).abs() > 1e-6 {
                return Err(CoreError::InvalidConfig(format!("tracklet {} changes box size", t.id)));
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn gt_boxes(&self) -> Vec<Box3D> {
        self.frames.iter().map(|f| f.gt).collect()
    }
}
