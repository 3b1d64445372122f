//! The joint ε-prediction U-Net. Every frame runs through shared weights;
//! frames interact only through cross-frame attention and projection
//! layers.

pub mod checkpoint;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{caption_attention_delta, cross_frame_attention_delta, AttentionWeights};
use crate::autograd::{Tape, Var};
use crate::conditioning::{condition_matrix, timestep_matrix};
use crate::diffusion::{FrameSetState, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::geometry::CameraView;
use crate::nn::{Binder, Builder, Conv, GroupNorm, Linear, ParamStore};
use crate::projection::{FrameContext, ProjectionConfig, ProjectionLayer, RenderOptions};
use crate::scalar::Scalar;
use crate::synthdata::VOCABULARY;
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, load_manifest, save_checkpoint, sha256_hex, Checkpoint, Manifest, ScheduleSpec, MANIFEST_FILE,
    PARAMS_FILE,
};

/// Order of the layers inside one U-Net stage, recorded in manifests.
pub const STAGE_ORDER: &str = "resblock > cross_frame_attention > caption_attention > projection > resample";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub resolution: usize,
    pub attention_stages: Vec<usize>,
    pub projection_stages: Vec<usize>,
    /// `false` turns cross-frame attention into per-frame self-attention.
    pub cross_frame: bool,
    pub reduced_channels: usize,
    /// Grid resolution of stage 0; halves with every stage.
    pub grid_base: usize,
    pub temb_dim: usize,
    pub lora_rank: usize,
    pub vocab_size: usize,
    pub d_txt: usize,
    pub groups: usize,
    pub refine_blocks: usize,
    pub render_samples: usize,
    pub background: bool,
    pub max_frames: usize,
}

impl DenoiserConfig {
    /// 3 stages of widths (32, 64, 64) at 32×32 with projection layers on
    /// the two inner stages (8³ and 4³ grids).
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            resolution: 32,
            attention_stages: vec![1, 2],
            projection_stages: vec![1, 2],
            cross_frame: true,
            reduced_channels: 16,
            grid_base: 16,
            temb_dim: 32,
            lora_rank: 4,
            vocab_size: VOCABULARY.len(),
            d_txt: 32,
            groups: 8,
            refine_blocks: 5,
            render_samples: 32,
            background: true,
            max_frames: 30,
        }
    }

    /// Smallest instance exercising every layer: `C₀ = 8`, 8×8, `G = 4` at
    /// the projection stage.
    pub fn micro() -> Self {
        Self {
            in_channels: 3,
            base_channels: 8,
            channel_mults: vec![1, 1],
            resolution: 8,
            attention_stages: vec![1],
            projection_stages: vec![1],
            cross_frame: true,
            reduced_channels: 4,
            grid_base: 8,
            temb_dim: 8,
            lora_rank: 2,
            vocab_size: VOCABULARY.len(),
            d_txt: 4,
            groups: 4,
            refine_blocks: 1,
            render_samples: 4,
            background: true,
            max_frames: 30,
        }
    }

    /// Smallest instance that still exercises every block; sized for
    /// exhaustive finite-difference checks.
    pub fn nano() -> Self {
        Self {
            base_channels: 4,
            resolution: 4,
            reduced_channels: 2,
            grid_base: 4,
            temb_dim: 4,
            d_txt: 2,
            groups: 2,
            render_samples: 2,
            ..Self::micro()
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels * self.channel_mults[s]
    }

    pub fn stage_resolution(&self, s: usize) -> usize {
        self.resolution >> s
    }

    pub fn stage_grid(&self, s: usize) -> usize {
        self.grid_base >> s
    }

    pub fn temb_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return invalid("config needs at least one stage and non-zero widths");
        }
        if !self.resolution.is_multiple_of(1 << (s - 1)) || self.stage_resolution(s - 1) == 0 {
            return invalid(format!("resolution {} does not halve {} times", self.resolution, s - 1));
        }
        if !self.temb_dim.is_multiple_of(2) {
            return invalid("temb_dim must be even");
        }
        for &a in &self.attention_stages {
            if a >= s {
                return invalid(format!("attention stage {a} out of range"));
            }
        }
        for &p in &self.projection_stages {
            if p == 0 {
                return invalid("projection layers are not allowed in the outermost stage");
            }
            if p >= s {
                return invalid(format!("projection stage {p} out of range"));
            }
            if self.stage_grid(p) < 2 {
                return invalid(format!("grid at stage {p} is below 2"));
            }
            if self.reduced_channels > self.stage_channels(p) {
                return invalid("reduced width exceeds stage width");
            }
        }
        Ok(())
    }

    pub fn has_attention(&self, s: usize) -> bool {
        self.attention_stages.contains(&s)
    }

    pub fn has_projection(&self, s: usize) -> bool {
        self.projection_stages.contains(&s)
    }
}

/// Residual block with a per-frame timestep bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub temb: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c_in: usize, c_out: usize, t: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.scope("norm1"), c_in, groups),
            conv1: Conv::new2d(&mut b.scope("conv1"), c_in, c_out, 3, 1),
            temb: Linear::new(&mut b.scope("temb"), t, c_out),
            norm2: GroupNorm::new(&mut b.scope("norm2"), c_out, groups),
            conv2: Conv::new2d(&mut b.scope("conv2"), c_out, c_out, 3, 1),
            shortcut: (c_in != c_out).then(|| Conv::new2d(&mut b.scope("shortcut"), c_in, c_out, 1, 1)),
        }
    }

    fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>, temb: &Var<'t, T>) -> Var<'t, T> {
        let n = x.shape()[0];
        let c = self.conv1.c_out;
        let h = self.conv1.forward(bx, &self.norm1.forward(bx, x).silu());
        let h = h.add(&self.temb.forward(bx, &temb.silu()).reshape(&[n, c, 1, 1]));
        let h = self.conv2.forward(bx, &self.norm2.forward(bx, &h).silu());
        let skip = match &self.shortcut {
            Some(s) => s.forward(bx, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub frame_norm: GroupNorm,
    pub frame: AttentionWeights,
    pub caption_norm: GroupNorm,
    pub caption: AttentionWeights,
}

impl AttentionBlock {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            frame_norm: GroupNorm::new(&mut b.scope("frame_norm"), c, cfg.groups),
            frame: AttentionWeights::new(&mut b.scope("frame"), c, c, c, cfg.lora_rank),
            caption_norm: GroupNorm::new(&mut b.scope("caption_norm"), c, cfg.groups),
            caption: AttentionWeights::new(&mut b.scope("caption"), c, cfg.d_txt, c, cfg.lora_rank),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        x: &Var<'t, T>,
        z: &Var<'t, T>,
        caption: Option<&Var<'t, T>>,
        cross_frame: bool,
    ) -> Var<'t, T> {
        let hn = self.frame_norm.forward(bx, x);
        let delta = if cross_frame {
            cross_frame_attention_delta(bx, &hn, z, &self.frame)
        } else {
            // each frame alone: the single-frame fallback is self-attention
            let n = x.shape()[0];
            let parts: Vec<Var<'t, T>> = (0..n)
                .map(|i| {
                    cross_frame_attention_delta(bx, &hn.narrow(0, i, 1), &z.narrow(0, i, 1), &self.frame)
                })
                .collect();
            Var::concat(&parts, 0)
        };
        let x = x.add(&delta);
        let hn = self.caption_norm.forward(bx, &x);
        match caption_attention_delta(bx, &hn, z, caption, &self.caption) {
            Some(d) => x.add(&d),
            None => x,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    pub res: ResBlock,
    pub attention: Option<AttentionBlock>,
    pub projection: Option<ProjectionLayer>,
}

impl Stage {
    fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cfg: &DenoiserConfig,
        s: usize,
        c_in: usize,
    ) -> Self {
        let c = cfg.stage_channels(s);
        let t = cfg.temb_channels();
        Self {
            res: ResBlock::new(&mut b.scope("res"), c_in, c, t, cfg.groups),
            attention: cfg
                .has_attention(s)
                .then(|| AttentionBlock::new(&mut b.scope("attn"), c, cfg)),
            projection: cfg.has_projection(s).then(|| {
                let mut pc = ProjectionConfig::new(c, cfg.stage_grid(s), t);
                pc.reduced = cfg.reduced_channels;
                pc.refine_blocks = cfg.refine_blocks;
                ProjectionLayer::new(&mut b.scope("proj"), pc)
            }),
        }
    }
}

/// Everything besides the noisy frames that one forward pass consumes.
#[derive(Clone, Debug)]
pub struct DenoiserInputs<T> {
    /// Model timestep per frame (0 for clean conditioning frames).
    pub timesteps: Vec<usize>,
    /// `[N, 10]`.
    pub conditions: Tensor<T>,
    pub views: Vec<CameraView>,
    pub caption: Vec<usize>,
    /// Frame excluded from voxel grids.
    pub skip: Option<usize>,
    pub stratified: bool,
    pub seed: u64,
}

impl<T: Scalar> DenoiserInputs<T> {
    /// Inputs for a sampling state; schedule indices map to model timesteps.
    pub fn from_state(state: &FrameSetState<T>, schedule: &NoiseSchedule) -> Self {
        Self {
            timesteps: state.t.iter().map(|&t| schedule.timesteps[t]).collect(),
            conditions: condition_matrix(&state.conditions),
            views: state.views.clone(),
            caption: state.caption.clone(),
            skip: None,
            stratified: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub time1: Linear,
    pub time2: Linear,
    pub embed: usize,
    pub conv_in: Conv,
    pub down: Vec<Stage>,
    pub downsample: Vec<Conv>,
    pub mid: Stage,
    pub up: Vec<Stage>,
    pub upsample: Vec<Conv>,
    pub out_norm: GroupNorm,
    pub conv_out: Conv,
}

impl Denoiser {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let s_count = cfg.stages();
        let t = cfg.temb_channels();
        let time1 = Linear::new(&mut b.scope("time1"), cfg.temb_dim, t);
        let time2 = Linear::new(&mut b.scope("time2"), t, t);
        let embed = {
            let mut e = b.scope("caption_embedding");
            let shape = [cfg.vocab_size, cfg.d_txt];
            let v = Tensor::randn(&shape, 1.0, e.rng());
            e.param("table", v)
        };
        let conv_in = Conv::new2d(&mut b.scope("conv_in"), cfg.in_channels, cfg.base_channels, 3, 1);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut c_prev = cfg.base_channels;
        for s in 0..s_count {
            down.push(Stage::new(&mut b.scope(&format!("down{s}")), cfg, s, c_prev));
            c_prev = cfg.stage_channels(s);
            if s + 1 < s_count {
                downsample.push(Conv::new2d(&mut b.scope(&format!("downsample{s}")), c_prev, c_prev, 3, 2));
            }
        }
        let last = s_count - 1;
        let mid = Stage {
            res: ResBlock::new(&mut b.scope("mid.res"), c_prev, c_prev, t, cfg.groups),
            attention: cfg
                .has_attention(last)
                .then(|| AttentionBlock::new(&mut b.scope("mid.attn"), c_prev, cfg)),
            projection: None,
        };
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for s in (0..s_count).rev() {
            let c_in = c_prev + cfg.stage_channels(s);
            up.push(Stage::new(&mut b.scope(&format!("up{s}")), cfg, s, c_in));
            c_prev = cfg.stage_channels(s);
            if s > 0 {
                let c_next = cfg.stage_channels(s - 1);
                upsample.push(Conv::new2d(&mut b.scope(&format!("upsample{s}")), c_prev, c_next, 3, 1));
                c_prev = c_next;
            }
        }
        let out_norm = GroupNorm::new(&mut b.scope("out_norm"), c_prev, cfg.groups);
        let conv_out = Conv::zero2d(&mut b.scope("conv_out"), c_prev, cfg.in_channels, 3);
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            embed,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm,
            conv_out,
        })
    }

    fn run_stage<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        stage: &Stage,
        x: &Var<'t, T>,
        env: &StageEnv<'_, 't, T>,
        layer_seed: u64,
    ) -> Result<Var<'t, T>> {
        let mut h = stage.res.forward(bx, x, &env.temb);
        if let Some(a) = &stage.attention {
            h = a.forward(bx, &h, &env.z, env.caption.as_ref(), self.config.cross_frame);
        }
        if let Some(p) = &stage.projection {
            h = p.forward(bx, &h, env.frames, layer_seed)?;
        }
        Ok(h)
    }

    /// Predicted noise `[N, C, H, W]` for noisy frames `x`.
    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        x: &Var<'t, T>,
        inputs: &DenoiserInputs<T>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let s = x.shape().to_vec();
        let n = s[0];
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.resolution || s[3] != cfg.resolution {
            return invalid(format!(
                "expected frames [N, {}, {r}, {r}], got {s:?}",
                cfg.in_channels,
                r = cfg.resolution
            ));
        }
        if n == 0 || n > cfg.max_frames {
            return invalid(format!("frame count {n} outside 1..={}", cfg.max_frames));
        }
        if inputs.timesteps.len() != n || inputs.views.len() != n || inputs.conditions.shape() != [n, 10] {
            return invalid("timesteps, views and conditions must match the frame count");
        }
        if let Some(&bad) = inputs.caption.iter().find(|&&t| t >= cfg.vocab_size) {
            return invalid(format!("caption token {bad} outside vocabulary"));
        }

        let temb0 = bx.constant(timestep_matrix(&inputs.timesteps, cfg.temb_dim)?);
        let temb = self.time2.forward(bx, &self.time1.forward(bx, &temb0).silu());
        let frames = FrameContext {
            views: inputs.views.clone(),
            temb: temb.value().clone(),
            skip: inputs.skip.filter(|_| n > 1),
            render: RenderOptions {
                n_samples: cfg.render_samples,
                background: cfg.background,
                stratified: inputs.stratified,
            },
            seed: inputs.seed,
        };
        let caption = (!inputs.caption.is_empty())
            .then(|| bx.param(self.embed).gather_rows(Rc::new(inputs.caption.clone())));
        let env = StageEnv {
            temb,
            z: bx.constant(inputs.conditions.clone()),
            caption,
            frames: &frames,
        };

        let mut layer = 0u64;
        let mut h = self.conv_in.forward(bx, x);
        let mut skips = Vec::new();
        for (i, stage) in self.down.iter().enumerate() {
            h = self.run_stage(bx, stage, &h, &env, layer)?;
            layer += 1;
            skips.push(h.clone());
            if let Some(d) = self.downsample.get(i) {
                h = d.forward(bx, &h);
            }
        }
        h = self.run_stage(bx, &self.mid, &h, &env, layer)?;
        layer += 1;
        for (i, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            h = self.run_stage(bx, stage, &Var::concat(&[h, skip], 1), &env, layer)?;
            layer += 1;
            if let Some(u) = self.upsample.get(i) {
                h = u.forward(bx, &h.upsample2x());
            }
        }
        Ok(self.conv_out.forward(bx, &self.out_norm.forward(bx, &h).silu()))
    }
}

struct StageEnv<'a, 't, T: Scalar> {
    temb: Var<'t, T>,
    z: Var<'t, T>,
    caption: Option<Var<'t, T>>,
    frames: &'a FrameContext<T>,
}

/// A denoiser with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub net: Denoiser,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Denoiser::new(&mut Builder::new(&mut params, &mut rng), config)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    /// Inference-mode prediction (no tape).
    pub fn predict(&self, x: &Tensor<T>, inputs: &DenoiserInputs<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let bx = Binder::new(&tape, &self.params);
        let out = self.net.forward(&bx, &tape.constant(x.clone()), inputs)?;
        Ok(out.value().clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

/// Number of scalar parameters a model with `config` holds.
pub fn count_parameters(config: &DenoiserConfig) -> Result<usize> {
    Ok(Model::<f32>::new(config, 0)?.params.num_elements())
}
