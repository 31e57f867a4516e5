//! The P2P motion networks.
//!
//! Point inputs are `[B, N, ch]` tensors, voxel inputs are bird's-eye images
//! `[B, H * F, W, L]`. Every hidden layer is linear/conv, batch norm, ReLU;
//! the last head layer is a bare linear map producing `[B, 4]` motion
//! `(dx, dy, dz, dyaw)` or `[B, 8]` with four trailing log-scales.

use p2p_nn::init::kaiming_uniform;
use p2p_nn::{BatchNormIds, BatchNormOpts, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{MotionDelta, MotionFrame};
use crate::pointcloud::{add_temporal_feature, resample, voxelize, PointCloud, SearchRegion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    P2pPoint,
    P2pVoxel,
    /// Both crops merged into one cloud, single branch.
    AblateMerged,
    /// As `AblateMerged` with a fourth channel marking the frame (0 previous, 1 current).
    AblateTemporal,
    /// Two branches, features concatenated along channels, then the head.
    AblateDualConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::P2pPoint,
        Variant::P2pVoxel,
        Variant::AblateMerged,
        Variant::AblateTemporal,
        Variant::AblateDualConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::P2pPoint => "p2p_point",
            Variant::P2pVoxel => "p2p_voxel",
            Variant::AblateMerged => "ablate_merged",
            Variant::AblateTemporal => "ablate_temporal",
            Variant::AblateDualConcat => "ablate_dual_concat",
        }
    }

    pub fn uses_voxels(self) -> bool {
        self == Variant::P2pVoxel
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which axis each point-mixer stage convolves first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerOrder {
    #[default]
    ChannelFirst,
    SpatialFirst,
}

/// How the voxel head maps `[1024, h, w]` to a 1024-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelHeadLinear {
    /// One `h*w -> 1` linear map shared by all channels.
    #[default]
    Spatial,
    /// Dense `1024*h*w -> 1024` linear map on the flattened tensor.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckStage {
    pub kernel: usize,
    pub channels: usize,
    /// Stride of the first conv of the stage; the rest use stride 1.
    pub stride: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_points: usize,
    /// Voxel counts along x, y, z.
    pub voxel_dims: [usize; 3],
    pub voxel_features: usize,
    pub region: SearchRegion,
    /// Hidden widths of the per-point embedding before the last layer.
    pub embed_hidden: Vec<usize>,
    /// Feature width `C` of each frame's embedding.
    pub embed_channels: usize,
    pub mixer_spatial: Vec<usize>,
    pub mixer_repeats: usize,
    pub mixer_order: MixerOrder,
    pub voxel_embed_channels: Vec<usize>,
    pub neck_spec: Vec<NeckStage>,
    /// Head widths; the last entry is the motion dimension 4.
    pub head_spec: Vec<usize>,
    pub voxel_head_linear: VoxelHeadLinear,
    pub weight_shared_backbone: bool,
    pub motion_frame: MotionFrame,
    /// Emit four log-scales after the motion.
    pub probabilistic: bool,
    pub zero_init_final: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::P2pPoint,
            n_points: 1024,
            voxel_dims: [128, 128, 20],
            voxel_features: 2,
            region: SearchRegion::CAR,
            embed_hidden: vec![64, 128, 256],
            embed_channels: 1024,
            mixer_spatial: vec![64, 128, 256],
            mixer_repeats: 2,
            mixer_order: MixerOrder::ChannelFirst,
            voxel_embed_channels: vec![32, 64, 128],
            neck_spec: vec![
                NeckStage {
                    kernel: 3,
                    channels: 256,
                    stride: 1,
                    repeats: 3,
                },
                NeckStage {
                    kernel: 3,
                    channels: 512,
                    stride: 2,
                    repeats: 3,
                },
                NeckStage {
                    kernel: 3,
                    channels: 1024,
                    stride: 2,
                    repeats: 3,
                },
            ],
            head_spec: vec![512, 256, 128, 4],
            voxel_head_linear: VoxelHeadLinear::Spatial,
            weight_shared_backbone: true,
            motion_frame: MotionFrame::Canonical,
            probabilistic: true,
            zero_init_final: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Small point network for gradient checks (`N = 64`, `C = 64`).
    pub fn tiny_point() -> Self {
        Self {
            n_points: 64,
            embed_hidden: vec![16, 32],
            embed_channels: 64,
            mixer_spatial: vec![8, 16],
            head_spec: vec![32, 16, 4],
            ..Self::default()
        }
    }

    /// Small voxel network on a `16 x 16 x 8` grid.
    pub fn tiny_voxel() -> Self {
        Self {
            variant: Variant::P2pVoxel,
            voxel_dims: [16, 16, 8],
            voxel_embed_channels: vec![16, 32, 64],
            neck_spec: vec![
                NeckStage {
                    kernel: 3,
                    channels: 64,
                    stride: 1,
                    repeats: 1,
                },
                NeckStage {
                    kernel: 3,
                    channels: 64,
                    stride: 2,
                    repeats: 1,
                },
                NeckStage {
                    kernel: 3,
                    channels: 64,
                    stride: 2,
                    repeats: 1,
                },
            ],
            head_spec: vec![32, 16, 4],
            embed_channels: 64,
            ..Self::default()
        }
    }

    /// Point network sized for single-core training runs.
    pub fn desk_point() -> Self {
        Self {
            n_points: 256,
            embed_hidden: vec![32, 64],
            embed_channels: 128,
            mixer_spatial: vec![16, 32],
            mixer_repeats: 1,
            head_spec: vec![64, 32, 4],
            ..Self::default()
        }
    }

    pub fn out_dim(&self) -> usize {
        if self.probabilistic {
            8
        } else {
            4
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.variant == Variant::AblateTemporal {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.head_spec.last() != Some(&4) {
            return bad(format!("head_spec must end in 4, got {:?}", self.head_spec));
        }
        if self.n_points == 0 || self.embed_channels == 0 {
            return bad("n_points and embed_channels must be positive".into());
        }
        if self.voxel_dims.contains(&0) || self.voxel_features == 0 {
            return bad(format!("voxel dims {:?}", self.voxel_dims));
        }
        if self.variant.uses_voxels() && (self.voxel_embed_channels.is_empty() || self.neck_spec.is_empty()) {
            return bad("voxel variant needs embed and neck stages".into());
        }
        if self
            .neck_spec
            .iter()
            .any(|s| s.repeats == 0 || s.stride == 0 || s.kernel % 2 == 0)
        {
            return bad("neck stages need odd kernels, stride >= 1 and repeats >= 1".into());
        }
        if self.mixer_repeats == 0 && !self.mixer_spatial.is_empty() {
            return bad("mixer_repeats must be positive".into());
        }
        self.region.validate()
    }

    /// Output size `(h, w)` of the voxel embedding.
    fn voxel_embed_hw(&self) -> (usize, usize) {
        let mut hw = (self.voxel_dims[0], self.voxel_dims[1]);
        for _ in &self.voxel_embed_channels {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        hw
    }

    fn neck_hw(&self) -> (usize, usize) {
        let mut hw = self.voxel_embed_hw();
        for s in &self.neck_spec {
            let pad = s.kernel / 2;
            hw = (
                (hw.0 + 2 * pad - s.kernel) / s.stride + 1,
                (hw.1 + 2 * pad - s.kernel) / s.stride + 1,
            );
        }
        hw
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Linear,
    Conv2d { stride: usize, padding: usize },
}

/// Linear or conv layer, optionally followed by batch norm and ReLU.
#[derive(Debug, Clone)]
struct Block {
    w: ParamId,
    b: ParamId,
    bn: Option<BatchNormIds>,
    kind: Kind,
    opts: (f64, f64),
}

impl Block {
    fn apply(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = match self.kind {
            Kind::Linear => tape.linear(x, w, Some(b))?,
            Kind::Conv2d { stride, padding } => tape.conv2d(x, w, Some(b), stride, padding)?,
        };
        let Some(bn) = &self.bn else { return Ok(y) };
        let axis = match self.kind {
            Kind::Linear => tape.shape(y).len() - 1,
            Kind::Conv2d { .. } => 1,
        };
        let opts = BatchNormOpts {
            axis,
            momentum: self.opts.0,
            eps: self.opts.1,
        };
        let y = tape.batch_norm(store, y, bn, opts)?;
        Ok(tape.relu(y))
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w, self.b];
        if let Some(bn) = &self.bn {
            v.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]);
        }
        v
    }
}

fn apply_all(blocks: &[Block], store: &ParamStore, tape: &mut Tape, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.apply(store, tape, x)?;
    }
    Ok(x)
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    opts: (f64, f64),
}

impl Builder<'_> {
    fn add_bn(&mut self, name: &str, c: usize) -> Result<BatchNormIds> {
        Ok(BatchNormIds {
            gamma: self
                .store
                .add(format!("{name}.bn.gamma"), Tensor::full(&[c], 1.0), true)?,
            beta: self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c]), true)?,
            running_mean: self
                .store
                .add(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), false)?,
            running_var: self
                .store
                .add(format!("{name}.bn.running_var"), Tensor::full(&[c], 1.0), false)?,
        })
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize, hidden: bool, zero: bool) -> Result<Block> {
        let w = if zero {
            Tensor::zeros(&[out, fan_in])
        } else {
            kaiming_uniform(&[out, fan_in], fan_in, &mut self.rng)
        };
        let w = self.store.add(format!("{name}.weight"), w, true)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true)?;
        let bn = if hidden { Some(self.add_bn(name, out)?) } else { None };
        Ok(Block {
            w,
            b,
            bn,
            kind: Kind::Linear,
            opts: self.opts,
        })
    }

    fn conv(&mut self, name: &str, cin: usize, out: usize, k: usize, stride: usize) -> Result<Block> {
        let fan_in = cin * k * k;
        let w = kaiming_uniform(&[out, cin, k, k], fan_in, &mut self.rng);
        let w = self.store.add(format!("{name}.weight"), w, true)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true)?;
        let bn = Some(self.add_bn(name, out)?);
        Ok(Block {
            w,
            b,
            bn,
            kind: Kind::Conv2d { stride, padding: k / 2 },
            opts: self.opts,
        })
    }

    fn point_embed(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<Vec<Block>> {
        let mut widths = vec![cfg.input_channels()];
        widths.extend(&cfg.embed_hidden);
        widths.push(cfg.embed_channels);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{prefix}.{i}"), w[0], w[1], true, false))
            .collect()
    }

    fn voxel_embed(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<Vec<Block>> {
        let mut blocks = Vec::new();
        let mut cin = cfg.voxel_dims[2] * cfg.voxel_features;
        for (i, &c) in cfg.voxel_embed_channels.iter().enumerate() {
            blocks.push(self.conv(&format!("{prefix}.{i}.down"), cin, c, 3, 2)?);
            blocks.push(self.conv(&format!("{prefix}.{i}.conv"), c, c, 3, 1)?);
            cin = c;
        }
        Ok(blocks)
    }

    fn head(&mut self, cfg: &ModelConfig, fan_in: usize) -> Result<Vec<Block>> {
        let mut blocks = Vec::new();
        let mut cin = fan_in;
        let last = cfg.head_spec.len() - 1;
        for (i, &c) in cfg.head_spec.iter().enumerate() {
            if i == last {
                blocks.push(self.linear(&format!("head.{i}"), cin, cfg.out_dim(), false, cfg.zero_init_final)?);
            } else {
                blocks.push(self.linear(&format!("head.{i}"), cin, c, true, false)?);
            }
            cin = c;
        }
        Ok(blocks)
    }
}

#[derive(Debug, Clone)]
struct MixerStage {
    channel: Vec<Block>,
    spatial: Vec<Block>,
}

/// Layer structure of one P2P model; the weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct P2PNet {
    pub config: ModelConfig,
    embed_prev: Vec<Block>,
    embed_curr: Vec<Block>,
    mixer: Vec<MixerStage>,
    neck: Vec<Block>,
    head_linear: Option<Block>,
    /// Norm over channels after the spatial head linear.
    head_linear_bn: Option<BatchNormIds>,
    head: Vec<Block>,
}

impl P2PNet {
    /// Builds the layers and a freshly initialized parameter store.
    pub fn build(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            opts: (config.bn_momentum, config.bn_eps),
        };
        let cfg = config;
        let c = cfg.embed_channels;
        let (embed_prev, embed_curr) = if cfg.variant.uses_voxels() {
            let p = b.voxel_embed("voxel_embed", cfg)?;
            let q = if cfg.weight_shared_backbone {
                p.clone()
            } else {
                b.voxel_embed("voxel_embed_curr", cfg)?
            };
            (p, q)
        } else {
            let p = b.point_embed("point_embed", cfg)?;
            let q = match cfg.variant {
                Variant::P2pPoint | Variant::AblateDualConcat if !cfg.weight_shared_backbone => {
                    b.point_embed("point_embed_curr", cfg)?
                }
                _ => p.clone(),
            };
            (p, q)
        };
        let mut mixer = Vec::new();
        let mut neck = Vec::new();
        let mut head_linear = None;
        let head_in = match cfg.variant {
            Variant::P2pPoint => {
                let mut s = 2;
                for (i, &s_out) in cfg.mixer_spatial.iter().enumerate() {
                    let mut channel = Vec::new();
                    let mut spatial = Vec::new();
                    for r in 0..cfg.mixer_repeats {
                        channel.push(b.linear(&format!("mixer.{i}.channel.{r}"), c, c, true, false)?);
                        let fan_in = if r == 0 { s } else { s_out };
                        spatial.push(b.linear(&format!("mixer.{i}.spatial.{r}"), fan_in, s_out, true, false)?);
                    }
                    mixer.push(MixerStage { channel, spatial });
                    s = s_out;
                }
                c
            }
            Variant::P2pVoxel => {
                let mut cin = 2 * cfg.voxel_embed_channels.last().copied().unwrap_or(0);
                for (i, st) in cfg.neck_spec.iter().enumerate() {
                    for r in 0..st.repeats {
                        let stride = if r == 0 { st.stride } else { 1 };
                        neck.push(b.conv(&format!("neck.{i}.{r}"), cin, st.channels, st.kernel, stride)?);
                        cin = st.channels;
                    }
                }
                let (h, w) = cfg.neck_hw();
                head_linear = Some(match cfg.voxel_head_linear {
                    VoxelHeadLinear::Spatial => b.linear("head_linear", h * w, 1, false, false)?,
                    VoxelHeadLinear::Dense => b.linear("head_linear", cin * h * w, cin, true, false)?,
                });
                cin
            }
            Variant::AblateMerged | Variant::AblateTemporal => c,
            Variant::AblateDualConcat => 2 * c,
        };
        let head = b.head(cfg, head_in)?;
        let head_linear_bn = match (&head_linear, cfg.voxel_head_linear) {
            (Some(_), VoxelHeadLinear::Spatial) => {
                let c_neck = cfg.neck_spec.last().unwrap().channels;
                Some(b.add_bn("head_linear", c_neck)?)
            }
            _ => None,
        };
        Ok((
            Self {
                config: config.clone(),
                embed_prev,
                embed_curr,
                mixer,
                neck,
                head_linear,
                head_linear_bn,
                head,
            },
            store,
        ))
    }

    /// Parameter ids used by the previous- and current-frame backbones.
    pub fn branch_param_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let ids = |bs: &[Block]| bs.iter().flat_map(Block::ids).collect();
        (ids(&self.embed_prev), ids(&self.embed_curr))
    }

    fn check_input(&self, tape: &Tape, v: Var) -> Result<()> {
        let rank = tape.shape(v).len();
        let ok = if self.config.variant.uses_voxels() {
            rank == 4
        } else {
            rank == 3
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::VariantInputMismatch {
                variant: self.config.variant.to_string(),
                input: format!("rank-{rank} {:?}", tape.shape(v)),
            })
        }
    }

    fn point_embed(&self, blocks: &[Block], store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = apply_all(blocks, store, tape, x)?;
        Ok(tape.max_pool_over_axis(f, 1)?)
    }

    /// Backbone features of one frame: `[B, C]` for point variants, `[B, C,
    /// H, W]` for the voxel variant. `current` selects the current-frame
    /// branch.
    pub fn embed(&self, store: &ParamStore, tape: &mut Tape, x: Var, current: bool) -> Result<Var> {
        self.check_input(tape, x)?;
        let blocks = if current { &self.embed_curr } else { &self.embed_prev };
        if self.config.variant.uses_voxels() {
            apply_all(blocks, store, tape, x)
        } else {
            self.point_embed(blocks, store, tape, x)
        }
    }

    /// Runs the network on batched inputs and returns `[B, 4]` or `[B, 8]`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, prev: Var, curr: Var) -> Result<Var> {
        self.check_input(tape, prev)?;
        self.check_input(tape, curr)?;
        let cfg = &self.config;
        let features = match cfg.variant {
            Variant::P2pPoint => {
                let fp = self.embed(store, tape, prev, false)?;
                let fc = self.embed(store, tape, curr, true)?;
                tape.mark("embed", fp);
                let fused = self.fuse_point(tape, fp, fc)?;
                tape.mark("fuse", fused);
                let mut x = fused;
                for (i, stage) in self.mixer.iter().enumerate() {
                    x = self.mixer_stage(stage, store, tape, x)?;
                    tape.mark(format!("mixer.{i}"), x);
                }
                let pooled = tape.max_pool_over_axis(x, 1)?;
                tape.mark("head.pool", pooled);
                pooled
            }
            Variant::P2pVoxel => {
                let fp = self.embed(store, tape, prev, false)?;
                let fc = self.embed(store, tape, curr, true)?;
                tape.mark("embed", fp);
                let fused = tape.concat(&[fp, fc], 1)?;
                tape.mark("fuse", fused);
                let mut x = fused;
                let mut k = 0;
                for (i, st) in cfg.neck_spec.iter().enumerate() {
                    x = apply_all(&self.neck[k..k + st.repeats], store, tape, x)?;
                    k += st.repeats;
                    tape.mark(format!("neck.{i}"), x);
                }
                let hl = self.head_linear.as_ref().expect("voxel head");
                let s = tape.shape(x).to_vec();
                let y = match cfg.voxel_head_linear {
                    VoxelHeadLinear::Spatial => {
                        let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
                        let y = hl.apply(store, tape, flat)?;
                        let y = tape.reshape(y, &[s[0], s[1]])?;
                        let bn = self.head_linear_bn.as_ref().expect("head_linear norm");
                        let opts = BatchNormOpts {
                            axis: 1,
                            momentum: hl.opts.0,
                            eps: hl.opts.1,
                        };
                        let y = tape.batch_norm(store, y, bn, opts)?;
                        tape.relu(y)
                    }
                    VoxelHeadLinear::Dense => {
                        let flat = tape.flatten(x, 1)?;
                        hl.apply(store, tape, flat)?
                    }
                };
                tape.mark("head.linear", y);
                y
            }
            Variant::AblateMerged | Variant::AblateTemporal => {
                let merged = tape.concat(&[prev, curr], 1)?;
                let f = self.point_embed(&self.embed_prev, store, tape, merged)?;
                tape.mark("embed", f);
                f
            }
            Variant::AblateDualConcat => {
                let fp = self.embed(store, tape, prev, false)?;
                let fc = self.embed(store, tape, curr, true)?;
                tape.mark("embed", fp);
                let f = tape.concat(&[fp, fc], 1)?;
                tape.mark("fuse", f);
                f
            }
        };
        let out = apply_all(&self.head, store, tape, features)?;
        if cfg.probabilistic {
            let motion = tape.slice(out, 1, 0, 4)?;
            tape.mark("head", motion);
        } else {
            tape.mark("head", out);
        }
        Ok(out)
    }

    /// `[B, C]` twice into `[B, 2, C]`, previous frame first.
    pub fn fuse_point(&self, tape: &mut Tape, fp: Var, fc: Var) -> Result<Var> {
        let s = tape.shape(fp).to_vec();
        if s != tape.shape(fc) || s.len() != 2 {
            return Err(p2p_nn::NnError::ShapeMismatch {
                op: "fuse_point",
                detail: format!("{s:?} vs {:?}", tape.shape(fc)),
            }
            .into());
        }
        let a = tape.reshape(fp, &[s[0], 1, s[1]])?;
        let b = tape.reshape(fc, &[s[0], 1, s[1]])?;
        Ok(tape.concat(&[a, b], 1)?)
    }

    fn mixer_stage(&self, stage: &MixerStage, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let spatial = |tape: &mut Tape, x: Var| -> Result<Var> {
            let t = tape.permute(x, &[0, 2, 1])?;
            let t = apply_all(&stage.spatial, store, tape, t)?;
            Ok(tape.permute(t, &[0, 2, 1])?)
        };
        match self.config.mixer_order {
            MixerOrder::ChannelFirst => {
                let y = apply_all(&stage.channel, store, tape, x)?;
                spatial(tape, y)
            }
            MixerOrder::SpatialFirst => {
                let y = spatial(tape, x)?;
                apply_all(&stage.channel, store, tape, y)
            }
        }
    }

    /// Inference on batched tensors; one output row per sample.
    pub fn predict(&self, store: &ParamStore, prev: &Tensor, curr: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(Mode::Eval);
        let p = tape.input(prev);
        let c = tape.input(curr);
        let out = self.forward(store, &mut tape, p, c)?;
        let d = self.config.out_dim();
        Ok(tape.value(out).chunks(d).map(|r| r.to_vec()).collect())
    }

    /// Per-layer shapes at batch size 1, as `(label, shape)` with the batch
    /// axis dropped, vectors shown as `[1, C]` and feature maps as
    /// `[H, W, C]`.
    pub fn shape_trace(&self, store: &ParamStore) -> Result<Vec<(String, Vec<usize>)>> {
        let (prev, curr) = zero_inputs(&self.config, 1);
        let mut tape = Tape::new(Mode::Eval).with_shape_trace();
        let p = tape.input(&prev);
        let c = tape.input(&curr);
        self.forward(store, &mut tape, p, c)?;
        Ok(tape
            .shape_trace()
            .iter()
            .map(|(l, s)| {
                let s = match s.len() {
                    2 => vec![1, s[1]],
                    4 => vec![s[2], s[3], s[1]],
                    _ => s[1..].to_vec(),
                };
                (l.clone(), s)
            })
            .collect())
    }
}

/// Zero-valued inputs of the right shape for `cfg` at batch size `b`.
pub fn zero_inputs(cfg: &ModelConfig, b: usize) -> (Tensor, Tensor) {
    let shape = if cfg.variant.uses_voxels() {
        vec![
            b,
            cfg.voxel_dims[2] * cfg.voxel_features,
            cfg.voxel_dims[0],
            cfg.voxel_dims[1],
        ]
    } else {
        vec![b, cfg.n_points, cfg.input_channels()]
    };
    (Tensor::zeros(&shape), Tensor::zeros(&shape))
}

/// Trainable parameter count and forward multiply-adds at batch size 1.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<(usize, u64)> {
    let (net, store) = P2PNet::build(cfg)?;
    let (prev, curr) = zero_inputs(cfg, 1);
    let mut tape = Tape::new(Mode::Eval);
    let p = tape.input(&prev);
    let c = tape.input(&curr);
    net.forward(&store, &mut tape, p, c)?;
    Ok((store.num_trainable(), tape.macs()))
}

/// Network input for one canonical-frame crop. `flag` is the frame marker
/// of the temporal variant (0 previous, 1 current).
pub fn encode_frame(cfg: &ModelConfig, crop: &PointCloud, seed: u64, flag: f64) -> Result<Tensor> {
    if cfg.variant.uses_voxels() {
        let g = voxelize(crop, cfg.voxel_dims, &cfg.region)?;
        let (shape, data) = g.to_bev_channels();
        return Ok(Tensor::new(&shape, data)?);
    }
    let pts = resample(&crop.xyz_only(), cfg.n_points, seed)?;
    let pts = if cfg.variant == Variant::AblateTemporal {
        add_temporal_feature(&pts, flag)?
    } else {
        pts
    };
    Ok(Tensor::new(&[pts.len(), pts.channels()], pts.data().to_vec())?)
}

/// Stacks equally shaped tensors along a new leading batch axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(CoreError::NoSamples)?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(p2p_nn::NnError::ShapeMismatch {
                op: "stack",
                detail: format!("{:?} vs {:?}", t.shape(), first.shape()),
            }
            .into());
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

/// First four outputs as a motion delta.
pub fn output_to_delta(row: &[f64]) -> MotionDelta {
    MotionDelta::new(row[0], row[1], row[2], row[3])
}

/// Writes `store` with `cfg` (and `extra`) in the checkpoint metadata.
pub fn save_model(
    path: impl AsRef<std::path::Path>,
    cfg: &ModelConfig,
    store: &ParamStore,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({ "model": cfg, "extra": extra });
    Ok(p2p_nn::checkpoint::save(path, store, &meta)?)
}

/// Rebuilds the network recorded in a checkpoint and loads its weights.
pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<(P2PNet, ParamStore, serde_json::Value)> {
    let (saved, meta) = p2p_nn::checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())?;
    let (net, mut store) = P2PNet::build(&cfg)?;
    p2p_nn::checkpoint::load_into(&mut store, &saved)?;
    Ok((net, store, meta.get("extra").cloned().unwrap_or_default()))
}
