//! KITTI tracking files: velodyne scans, `label_02` text and calibration.
//!
//! Label columns: frame, track id, type, truncation, occlusion, alpha,
//! 2D bbox (4), h, w, l, x, y, z, rotation_y, optional score. The camera
//! location is the bottom center of the box with y pointing down.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{Frame, Tracklet};
use crate::error::{CoreError, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::pointcloud::PointCloud;

/// Reads `(x, y, z, intensity)` little-endian f32 quadruples.
pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(CoreError::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    PointCloud::new(4, data)
}

/// Writes a scan as f32 quadruples; 3-channel clouds get intensity 0.
pub fn write_velodyne_bin(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for i in 0..pc.len() {
        let r = pc.row(i);
        let intensity = r.get(3).copied().unwrap_or(0.0);
        for v in [r[0], r[1], r[2], intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Velodyne-to-rectified-camera transform `x_cam = R_rect (R x_velo + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub velo_to_cam_r: Mat3,
    pub velo_to_cam_t: [f64; 3],
    pub r_rect: Mat3,
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Calibration {
    pub fn identity() -> Self {
        Self {
            velo_to_cam_r: IDENTITY,
            velo_to_cam_t: [0.0; 3],
            r_rect: IDENTITY,
        }
    }

    /// Axis swap used by the synthetic writer: camera x = -lidar y,
    /// camera y = -lidar z, camera z = lidar x.
    pub fn axis_swap() -> Self {
        Self {
            velo_to_cam_r: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            velo_to_cam_t: [0.0; 3],
            r_rect: IDENTITY,
        }
    }

    /// Parses `key: values` lines. The transform is read from
    /// `Tr_velo_cam` or `Tr_velo_to_cam`; `R0_rect` / `R_rect` default to
    /// identity.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut tr: Option<Vec<f64>> = None;
        let mut rect: Option<Vec<f64>> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = match line.split_once(char::is_whitespace) {
                Some((k, r)) => (k.trim_end_matches(':'), r),
                None => continue,
            };
            let (key, rest) = match key.split_once(':') {
                Some((k, r)) => (k, format!("{r} {rest}")),
                None => (key, rest.to_string()),
            };
            let parse = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map_err(|e| CoreError::MalformedLine {
                            path: path.to_path_buf(),
                            line: n + 1,
                            msg: format!("{key}: {e}"),
                        })
                    })
                    .collect()
            };
            let want = |v: Vec<f64>, len: usize| -> Result<Vec<f64>> {
                if v.len() == len {
                    Ok(v)
                } else {
                    Err(CoreError::MalformedLine {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: format!("{key} has {} values, expected {len}", v.len()),
                    })
                }
            };
            match key {
                "Tr_velo_cam" | "Tr_velo_to_cam" => tr = Some(want(parse()?, 12)?),
                "R0_rect" | "R_rect" => rect = Some(want(parse()?, 9)?),
                _ => {}
            }
        }
        let tr = tr.ok_or_else(|| CoreError::MissingCalib {
            path: path.to_path_buf(),
        })?;
        let r = [0, 1, 2].map(|i| [tr[4 * i], tr[4 * i + 1], tr[4 * i + 2]]);
        let t = [tr[3], tr[7], tr[11]];
        let r_rect = rect.map_or(IDENTITY, |v| [0, 1, 2].map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]));
        Ok(Self {
            velo_to_cam_r: r,
            velo_to_cam_t: t,
            r_rect,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let r = &self.velo_to_cam_r;
        let t = &self.velo_to_cam_t;
        let tr: Vec<String> = (0..3)
            .flat_map(|i| [r[i][0], r[i][1], r[i][2], t[i]])
            .map(|v| v.to_string())
            .collect();
        let rect: Vec<String> = self.r_rect.iter().flatten().map(|v| v.to_string()).collect();
        format!("R_rect {}\nTr_velo_cam {}\n", rect.join(" "), tr.join(" "))
    }

    fn cam_to_velo_linear(&self) -> Option<Mat3> {
        inverse3(&mat_mul(&self.r_rect, &self.velo_to_cam_r))
    }

    pub fn velo_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat_vec(&self.velo_to_cam_r, p);
        mat_vec(
            &self.r_rect,
            [
                q[0] + self.velo_to_cam_t[0],
                q[1] + self.velo_to_cam_t[1],
                q[2] + self.velo_to_cam_t[2],
            ],
        )
    }

    pub fn cam_to_velo(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let rect_inv = inverse3(&self.r_rect)?;
        let r_inv = inverse3(&self.velo_to_cam_r)?;
        let q = mat_vec(&rect_inv, p);
        Some(mat_vec(
            &r_inv,
            [
                q[0] - self.velo_to_cam_t[0],
                q[1] - self.velo_to_cam_t[1],
                q[2] - self.velo_to_cam_t[2],
            ],
        ))
    }

    /// Lidar-frame box of a camera-frame label.
    pub fn label_to_box(&self, hwl: [f64; 3], xyz: [f64; 3], ry: f64) -> Result<Box3D> {
        let singular = || CoreError::InvalidConfig("singular calibration".into());
        let [h, w, l] = hwl;
        let center = self
            .cam_to_velo([xyz[0], xyz[1] - h / 2.0, xyz[2]])
            .ok_or_else(singular)?;
        let dir = mat_vec(
            &self.cam_to_velo_linear().ok_or_else(singular)?,
            [ry.cos(), 0.0, -ry.sin()],
        );
        let yaw = dir[1].atan2(dir[0]);
        Ok(Box3D::new(center, w, l, h, yaw)?)
    }

    /// Camera-frame label `(h, w, l)`, bottom-center location and
    /// rotation_y of a lidar box. Inverse of [`Calibration::label_to_box`]
    /// when the transform keeps the lidar z axis along camera -y.
    pub fn box_to_label(&self, b: &Box3D) -> ([f64; 3], [f64; 3], f64) {
        let c = self.velo_to_cam([b.cx, b.cy, b.cz]);
        let m = mat_mul(&self.r_rect, &self.velo_to_cam_r);
        let d = mat_vec(&m, [b.yaw.cos(), b.yaw.sin(), 0.0]);
        // heading (cos ry, 0, -sin ry)
        let ry = wrap_angle((-d[2]).atan2(d[0]));
        ([b.h, b.w, b.l], [c[0], c[1] + b.h / 2.0, c[2]], ry)
    }
}

struct LabelRow {
    frame: usize,
    track: i64,
    ty: String,
    hwl: [f64; 3],
    xyz: [f64; 3],
    ry: f64,
}

fn parse_label_line(line: &str, n: usize, path: &Path) -> Result<Option<LabelRow>> {
    let err = |msg: String| CoreError::MalformedLine {
        path: path.to_path_buf(),
        line: n,
        msg,
    };
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.is_empty() {
        return Ok(None);
    }
    if f.len() < 17 {
        return Err(err(format!("{} fields, expected at least 17", f.len())));
    }
    if f[2] == "DontCare" {
        return Ok(None);
    }
    let num = |i: usize| {
        f[i].parse::<f64>()
            .map_err(|e| err(format!("field {i} `{}`: {e}", f[i])))
    };
    let frame = f[0]
        .parse::<usize>()
        .map_err(|e| err(format!("frame `{}`: {e}", f[0])))?;
    let track = f[1]
        .parse::<i64>()
        .map_err(|e| err(format!("track id `{}`: {e}", f[1])))?;
    Ok(Some(LabelRow {
        frame,
        track,
        ty: f[2].to_string(),
        hwl: [num(10)?, num(11)?, num(12)?],
        xyz: [num(13)?, num(14)?, num(15)?],
        ry: num(16)?,
    }))
}

/// Tracklets of one KITTI tracking sequence, in lidar coordinates.
///
/// Each track is split wherever frame numbers skip, and pieces shorter
/// than two frames are dropped. Box sizes are frozen to the first frame of
/// each piece. When `velodyne_dir` is given, frame `k` reads
/// `velodyne_dir/{k:06}.bin`; otherwise frames carry empty clouds. Ids
/// are `sequence:track:piece`, the sequence being the label file stem.
pub fn read_kitti_tracking(
    labels_path: impl AsRef<Path>,
    calib_path: impl AsRef<Path>,
    velodyne_dir: Option<&Path>,
) -> Result<Vec<Tracklet>> {
    let labels_path = labels_path.as_ref();
    let calib = Calibration::read(calib_path.as_ref())?;
    let text = fs::read_to_string(labels_path)?;
    let seq = labels_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut tracks: BTreeMap<i64, Vec<LabelRow>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(row) = parse_label_line(line, i + 1, labels_path)? {
            calib
                .label_to_box(row.hwl, row.xyz, row.ry)
                .map_err(|e| CoreError::MalformedLine {
                    path: labels_path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            tracks.entry(row.track).or_default().push(row);
        }
    }
    let mut scans: BTreeMap<usize, PointCloud> = BTreeMap::new();
    let mut out = Vec::new();
    for (track, mut rows) in tracks {
        rows.sort_by_key(|r| r.frame);
        let mut pieces: Vec<Vec<LabelRow>> = Vec::new();
        for r in rows {
            match pieces.last_mut() {
                Some(p) if p.last().is_some_and(|l| l.frame + 1 == r.frame) => p.push(r),
                _ => pieces.push(vec![r]),
            }
        }
        for (part, piece) in pieces.into_iter().filter(|p| p.len() >= 2).enumerate() {
            let hwl = piece[0].hwl;
            let mut frames = Vec::with_capacity(piece.len());
            for r in &piece {
                let gt = calib.label_to_box(hwl, r.xyz, r.ry)?;
                let points = match velodyne_dir {
                    Some(dir) => {
                        if let std::collections::btree_map::Entry::Vacant(e) = scans.entry(r.frame) {
                            e.insert(read_velodyne_bin(dir.join(format!("{:06}.bin", r.frame)))?);
                        }
                        scans[&r.frame].clone()
                    }
                    None => PointCloud::empty(4),
                };
                frames.push(Frame {
                    index: r.frame,
                    points,
                    gt,
                });
            }
            out.push(Tracklet::new(
                format!("{seq}:{track}:{part}"),
                piece[0].ty.clone(),
                frames,
            )?);
        }
    }
    Ok(out)
}

/// Sequence ids under `root/label_02`, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut seqs: Vec<String> = fs::read_dir(root.join("label_02"))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    seqs.sort();
    Ok(seqs)
}

/// All tracklets of a KITTI-layout directory, optionally restricted to one
/// label type.
pub fn load_kitti_root(root: &Path, label_type: Option<&str>) -> Result<Vec<Tracklet>> {
    let mut out = Vec::new();
    for seq in list_sequences(root)? {
        let vel = root.join("velodyne").join(&seq);
        let tracklets = read_kitti_tracking(
            root.join("label_02").join(format!("{seq}.txt")),
            root.join("calib").join(format!("{seq}.txt")),
            vel.is_dir().then_some(vel.as_path()),
        )?;
        out.extend(
            tracklets
                .into_iter()
                .filter(|t| label_type.is_none_or(|ty| t.category == ty)),
        );
    }
    Ok(out)
}

/// Writes one tracklet as a sequence of a KITTI-layout directory with
/// track id 0 and the [`Calibration::axis_swap`] calibration.
pub fn write_kitti_sequence(root: &Path, seq: &str, tracklet: &Tracklet, label_type: &str) -> Result<Vec<PathBuf>> {
    let calib = Calibration::axis_swap();
    let label_dir = root.join("label_02");
    let calib_dir = root.join("calib");
    fs::create_dir_all(&label_dir)?;
    fs::create_dir_all(&calib_dir)?;
    let mut written = Vec::new();
    let mut labels = fs::File::create(label_dir.join(format!("{seq}.txt")))?;
    for f in &tracklet.frames {
        let ([h, w, l], [x, y, z], ry) = calib.box_to_label(&f.gt);
        writeln!(
            labels,
            "{} 0 {label_type} 0 0 0 0 0 0 0 {h} {w} {l} {x} {y} {z} {ry}",
            f.index
        )?;
        let bin = root.join("velodyne").join(seq).join(format!("{:06}.bin", f.index));
        write_velodyne_bin(&bin, &f.points)?;
        written.push(bin);
    }
    fs::write(calib_dir.join(format!("{seq}.txt")), calib.to_text())?;
    written.push(label_dir.join(format!("{seq}.txt")));
    written.push(calib_dir.join(format!("{seq}.txt")));
    Ok(written)
}
