//! P2P single-object tracking: geometry, point-cloud preprocessing, the
//! point and voxel motion networks, training and one-pass evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod pointcloud;
pub mod train;

pub use error::{CoreError, Result};
pub use geometry::{apply_motion, iou3d, relative_motion, Box3D, MotionDelta, MotionFrame};
pub use pointcloud::{PointCloud, SearchRegion, VoxelGrid};
