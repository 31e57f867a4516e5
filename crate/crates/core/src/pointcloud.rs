//! Point clouds, search-region crops, farthest point sampling and
//! voxelization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Box3D;

/// Row-major `N x channels` points; the first three channels are xyz.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    channels: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels < 3 {
            return Err(CoreError::InvalidCloud(format!(
                "need at least 3 channels, got {channels}"
            )));
        }
        if !data.len().is_multiple_of(channels) {
            return Err(CoreError::InvalidCloud(format!(
                "{} values do not split into rows of {channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidCloud("non-finite coordinate".into()));
        }
        Ok(Self { channels, data })
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            channels: channels.max(3),
            data: Vec::new(),
        }
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Self {
        Self {
            channels: 3,
            data: points.iter().flatten().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = self.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn iter_xyz(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(self.channels).map(|r| [r[0], r[1], r[2]])
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.channels, "row width");
        self.data.extend_from_slice(row);
    }

    /// Applies `f` to every xyz triple, keeping any extra channels.
    pub fn map_xyz(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut data = self.data.clone();
        for r in data.chunks_exact_mut(self.channels) {
            let p = f([r[0], r[1], r[2]]);
            r[..3].copy_from_slice(&p);
        }
        Self {
            channels: self.channels,
            data,
        }
    }

    pub fn filter(&self, keep: impl Fn(usize, &[f64]) -> bool) -> Self {
        let mut out = Self::empty(self.channels);
        for (i, r) in self.data.chunks_exact(self.channels).enumerate() {
            if keep(i, r) {
                out.data.extend_from_slice(r);
            }
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            channels: self.channels,
            data,
        }
    }

    /// Stacks clouds with equal channel counts.
    pub fn concat(parts: &[&PointCloud]) -> Result<Self> {
        let channels = parts.first().map_or(3, |p| p.channels);
        let mut data = Vec::new();
        for p in parts {
            if p.channels != channels {
                return Err(CoreError::InvalidCloud(format!(
                    "cannot concatenate {} and {channels} channels",
                    p.channels
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self { channels, data })
    }

    /// Only the xyz channels.
    pub fn xyz_only(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            channels: 3,
            data: self.iter_xyz().flatten().collect(),
        }
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in self.iter_xyz() {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.len() as f64;
        Some(c.map(|v| v / n))
    }
}

/// Axis-aligned crop in the canonical frame of a reference box. Each range
/// is `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl SearchRegion {
    pub const CAR: SearchRegion = SearchRegion {
        x_range: (-4.8, 4.8),
        y_range: (-4.8, 4.8),
        z_range: (-1.5, 1.5),
    };
    pub const HUMAN: SearchRegion = SearchRegion {
        x_range: (-1.92, 1.92),
        y_range: (-1.92, 1.92),
        z_range: (-1.5, 1.5),
    };

    pub fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64)) -> Result<Self> {
        let r = Self {
            x_range,
            y_range,
            z_range,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(CoreError::InvalidRegion(format!("{name} range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn ranges(&self) -> [(f64, f64); 3] {
        [self.x_range, self.y_range, self.z_range]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.ranges().iter().zip(p).all(|(&(lo, hi), v)| v >= lo && v < hi)
    }
}

/// Points of `frame_points` inside `region` around `ref_box`, returned in
/// the box's canonical frame.
pub fn crop_search_region(frame_points: &PointCloud, ref_box: &Box3D, region: &SearchRegion) -> Result<PointCloud> {
    region.validate()?;
    let canon = crate::geometry::to_canonical(frame_points, ref_box);
    Ok(canon.filter(|_, r| region.contains([r[0], r[1], r[2]])))
}

/// Farthest point sampling with the first index drawn from `seed`.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    if pc.is_empty() {
        return Err(CoreError::EmptyCloud);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..pc.len());
    farthest_point_sample_from(pc, k, start)
}

/// Farthest point sampling from a given first index. Each step takes the
/// point with the largest squared distance to the selected set, the lowest
/// index on ties. When the cloud has fewer than `k` points every point is
/// selected once and the list is padded by cycling through the selection.
pub fn farthest_point_sample_from(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if n == 0 {
        return Err(CoreError::EmptyCloud);
    }
    if start >= n {
        return Err(CoreError::InvalidCloud(format!("start index {start} out of {n}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let pts: Vec<[f64; 3]> = pc.iter_xyz().collect();
    let take = k.min(n);
    let mut selected = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    loop {
        selected.push(cur);
        chosen[cur] = true;
        if selected.len() == take {
            break;
        }
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    for i in take..k {
        selected.push(selected[i % take]);
    }
    Ok(selected)
}

/// FPS-resampled copy of `pc` with exactly `k` rows.
pub fn resample(pc: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    Ok(pc.select(&farthest_point_sample(pc, k, seed)?))
}

/// Appends a constant fourth channel holding `t_flag`.
pub fn add_temporal_feature(pc: &PointCloud, t_flag: f64) -> Result<PointCloud> {
    if pc.channels != 3 {
        return Err(CoreError::AlreadyAugmented(pc.channels));
    }
    let mut data = Vec::with_capacity(pc.len() * 4);
    for p in pc.iter_xyz() {
        data.extend_from_slice(&p);
        data.push(t_flag);
    }
    Ok(PointCloud { channels: 4, data })
}

/// Dense voxel features over a [`SearchRegion`].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
    pub region: SearchRegion,
    /// Features per voxel.
    pub n_features: usize,
    /// `[x][y][z][feature]`, row-major.
    pub features: Vec<f64>,
    /// Raw per-voxel point counts, `[x][y][z]`.
    pub counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    pub fn feature(&self, ix: usize, iy: usize, iz: usize, f: usize) -> f64 {
        self.features[self.voxel_index(ix, iy, iz) * self.n_features + f]
    }

    /// Bird's-eye image with height folded into channels: shape
    /// `[H * F, W, L]`, channel `z * F + f`.
    pub fn to_bev_channels(&self) -> (Vec<usize>, Vec<f64>) {
        let [nx, ny, nz] = self.dims;
        let f = self.n_features;
        let mut out = vec![0.0; nz * f * nx * ny];
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let src = self.voxel_index(ix, iy, iz) * f;
                    for k in 0..f {
                        out[((iz * f + k) * nx + ix) * ny + iy] = self.features[src + k];
                    }
                }
            }
        }
        (vec![nz * f, nx, ny], out)
    }
}

/// Voxel of a canonical-frame point, `None` outside the region.
pub fn voxel_of(p: [f64; 3], dims: [usize; 3], region: &SearchRegion) -> Option<[usize; 3]> {
    if !region.contains(p) {
        return None;
    }
    let mut idx = [0usize; 3];
    for (a, &(lo, hi)) in region.ranges().iter().enumerate() {
        let cell = (hi - lo) / dims[a] as f64;
        idx[a] = (((p[a] - lo) / cell).floor() as usize).min(dims[a] - 1);
    }
    Some(idx)
}

/// Two features per voxel: occupancy and the point count divided by the
/// largest count in the grid.
pub fn voxelize(pc: &PointCloud, dims: [usize; 3], region: &SearchRegion) -> Result<VoxelGrid> {
    region.validate()?;
    if dims.contains(&0) {
        return Err(CoreError::InvalidConfig(format!("voxel dims {dims:?}")));
    }
    let total = dims.iter().product::<usize>();
    let mut counts = vec![0u32; total];
    for p in pc.iter_xyz() {
        if let Some([ix, iy, iz]) = voxel_of(p, dims, region) {
            counts[(ix * dims[1] + iy) * dims[2] + iz] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut features = vec![0.0; total * 2];
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            features[2 * i] = 1.0;
            features[2 * i + 1] = c as f64 / max;
        }
    }
    Ok(VoxelGrid {
        dims,
        region: *region,
        n_features: 2,
        features,
        counts,
    })
}
