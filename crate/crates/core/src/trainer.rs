//! Two-stage training: a single-frame 2D stage, then multi-view
//! fine-tuning with conditioning-frame sampling, voxel skip and prior
//! preservation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::conditioning::{condition_matrix, ConditionVector, IntensityMode};
use crate::denoiser::{load_checkpoint, save_checkpoint, sha256_hex, DenoiserConfig, DenoiserInputs, Model, ScheduleSpec};
use crate::diffusion::{eps_loss_var, gaussian, q_sample, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::generation::to_model_space;
use crate::geometry::CameraView;
use crate::nn::{Binder, ParamGroup, ParamInfo, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::synthdata::{sample_training_frames, training_caption, PriorSet, Scene};
use crate::tensor::Tensor;

pub const PRIOR_WEIGHT: f64 = 0.1;
pub const COND_PROB: [f64; 2] = [0.25, 0.25];
pub const LR_RENDERER: f64 = 0.005;
pub const LR_BASE: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[serde(rename = "2d")]
    TwoD,
    Mv,
}

/// Flat training configuration; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    /// Frame sets per optimizer step.
    pub batch_size: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub frames: usize,
    pub lr_base: f64,
    pub lr_renderer: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cond_prob_first: f64,
    pub cond_prob_second: f64,
    pub prior_weight: f64,
    pub prior_count: usize,
    pub prior_steps: usize,
    pub skip_last: bool,
    pub stratified: bool,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Model preset: "toy" or "micro".
    pub model: String,
    pub base_channels: Option<usize>,
    /// Ablation switches.
    pub projection: bool,
    pub cross_frame: bool,
    pub render_samples: Option<usize>,
    pub refine_blocks: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = ScheduleSpec::toy();
        Self {
            steps: 1000,
            seed: 0,
            batch_size: 2,
            grad_accum: 1,
            frames: 5,
            lr_base: LR_BASE,
            lr_renderer: LR_RENDERER,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cond_prob_first: COND_PROB[0],
            cond_prob_second: COND_PROB[1],
            prior_weight: PRIOR_WEIGHT,
            prior_count: crate::synthdata::PRIOR_SET_SIZE,
            prior_steps: 20,
            skip_last: true,
            stratified: true,
            t_max: s.t_max,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            log_every: 10,
            checkpoint_every: 500,
            model: "toy".into(),
            base_channels: None,
            projection: true,
            cross_frame: true,
            render_samples: None,
            refine_blocks: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        for p in [self.cond_prob_first, self.cond_prob_second] {
            if !(0.0..=1.0).contains(&p) {
                return bad("conditioning probabilities must lie in [0, 1]");
            }
        }
        if !(self.lr_base >= 0.0 && self.lr_renderer >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative");
        }
        self.schedule_spec().build()?;
        self.model_config()?;
        Ok(())
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            t_max: self.t_max,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn model_config(&self) -> Result<DenoiserConfig> {
        let mut c = match self.model.as_str() {
            "toy" => DenoiserConfig::toy(),
            "micro" => DenoiserConfig::micro(),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        if let Some(b) = self.base_channels {
            c.base_channels = b;
        }
        if !self.projection {
            c.projection_stages.clear();
        }
        c.cross_frame = self.cross_frame;
        if let Some(s) = self.render_samples {
            c.render_samples = s;
        }
        if let Some(r) = self.refine_blocks {
            c.refine_blocks = r;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

// ---------------------------------------------------------------- optimizer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_base: f64,
    pub lr_renderer: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_base: LR_BASE,
            lr_renderer: LR_RENDERER,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Renderer => self.lr_renderer,
            ParamGroup::Base => self.lr_base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was non-finite; nothing changed.
    Skipped,
}

/// AdamW with decoupled weight decay and per-group learning rates. Moments
/// are kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `grads[i]` is `None` for parameters that are frozen or unused.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> StepOutcome {
        assert_eq!(grads.len(), params.len());
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            warn!("non-finite gradient at optimizer step {}; update skipped", self.step + 1);
            return StepOutcome::Skipped;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let groups: Vec<ParamGroup> = params.infos().iter().map(|i| i.group).collect();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = c.lr(groups[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, gk)) in params.values_mut()[i].data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.to_f64_lossy();
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = p.to_f64_lossy();
                x -= lr * c.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::from_f64_lossy(x);
            }
        }
        StepOutcome::Applied
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        for buf in self.m.iter().chain(&self.v) {
            for x in buf {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let total: usize = self.m.iter().map(Vec::len).sum::<usize>() * 2;
        if bytes.len() != 8 + total * 8 {
            return Err(Error::CheckpointMismatch("optimizer state size differs".into()));
        }
        self.step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut chunks = bytes[8..].chunks_exact(8);
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in buf.iter_mut() {
                *x = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        Ok(())
    }
}

/// Which parameters receive gradients in a stage: LoRA adapters stay at
/// their zero initialization during 2D pretraining.
pub fn trainable(stage: Stage) -> impl Fn(&ParamInfo) -> bool {
    move |info| stage == Stage::Mv || info.kind != ParamKind::Lora
}

// ---------------------------------------------------------------- steps

/// Noisy inputs for one frame set.
#[derive(Clone, Debug)]
pub struct PreparedItem<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub inputs: DenoiserInputs<T>,
    pub active: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDraw {
    pub t: usize,
    pub first_conditioned: bool,
    pub second_conditioned: bool,
}

/// One shared `t ~ U[1, T]`; frames 1 and 2 independently become clean
/// conditioning frames.
pub fn draw_timesteps<R: Rng>(t_max: usize, p: [f64; 2], rng: &mut R) -> TimestepDraw {
    TimestepDraw {
        t: rng.random_range(1..=t_max),
        first_conditioned: rng.random_bool(p[0]),
        second_conditioned: rng.random_bool(p[1]),
    }
}

/// Builds the noisy frame set for images `[N, 3, H, W]` in `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn prepare_item<T: Scalar, R: Rng>(
    images: &Tensor<T>,
    views: &[CameraView],
    conditions: &[ConditionVector],
    caption: &[usize],
    schedule: &NoiseSchedule,
    draw: TimestepDraw,
    skip_last: bool,
    stratified: bool,
    rng: &mut R,
) -> Result<PreparedItem<T>> {
    let n = images.dim(0);
    let mut t = vec![draw.t; n];
    if n > 1 {
        if draw.first_conditioned {
            t[0] = 0;
        }
        if draw.second_conditioned {
            t[1] = 0;
        }
    }
    let x0 = to_model_space(images);
    let eps = gaussian(images.shape(), rng);
    let x_t = q_sample(&x0, &t, &eps, schedule)?;
    let active = t.iter().map(|&t| t > 0).collect();
    Ok(PreparedItem {
        x_t,
        eps,
        inputs: DenoiserInputs {
            timesteps: t,
            conditions: condition_matrix(conditions),
            views: views.to_vec(),
            caption: caption.to_vec(),
            skip: (skip_last && n > 1).then(|| n - 1),
            stratified,
            seed: rng.random(),
        },
        active,
    })
}

/// Loss and gradients of one prepared frame set, scaled by `weight`.
pub fn item_loss<T: Scalar>(
    model: &Model<T>,
    item: &PreparedItem<T>,
    stage: Stage,
    weight: f64,
    grads: &mut [Option<Tensor<T>>],
) -> Result<Option<f64>> {
    let tape = Tape::new();
    let bx = Binder::with_trainable(&tape, &model.params, trainable(stage));
    let pred = model.net.forward(&bx, &tape.constant(item.x_t.clone()), &item.inputs)?;
    let Some(loss) = eps_loss_var(&item.eps, &pred, &item.active) else {
        return Ok(None);
    };
    let value = loss.value().data()[0].to_f64_lossy();
    let g = tape.backward(&loss.scale(T::from_f64_lossy(weight)));
    for (slot, gi) in grads.iter_mut().zip(bx.gradients(&g)) {
        if let Some(gi) = gi {
            match slot {
                Some(s) => s.add_assign(&gi),
                None => *slot = Some(gi),
            }
        }
    }
    Ok(Some(value))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub data: f64,
    pub prior: f64,
}

/// `L = L_d + w·L_p`.
pub fn combine_losses(data: f64, prior: Option<f64>, prior_weight: f64) -> StepLosses {
    let prior = prior.unwrap_or(0.0);
    StepLosses {
        total: data + prior_weight * prior,
        data,
        prior,
    }
}

/// One prior-preservation image with its pose and caption.
#[derive(Clone, Debug)]
pub struct PriorItem<T> {
    pub image: Tensor<T>,
    pub view: CameraView,
    pub caption: Vec<usize>,
}

/// Loss and accumulated gradients for a multi-view batch plus an optional
/// prior image. `L_d` averages over the batch's frame sets.
pub fn train_step<T: Scalar>(
    model: &Model<T>,
    batch: &[PreparedItem<T>],
    prior: Option<&PreparedItem<T>>,
    prior_weight: f64,
    grads: &mut [Option<Tensor<T>>],
) -> Result<StepLosses> {
    let mut data = 0.0;
    let w = 1.0 / batch.len().max(1) as f64;
    for item in batch {
        data += w * item_loss(model, item, Stage::Mv, w, grads)?.unwrap_or(0.0);
    }
    let prior_loss = match prior {
        Some(p) if prior_weight > 0.0 => item_loss(model, p, Stage::Mv, prior_weight, grads)?,
        _ => None,
    };
    Ok(combine_losses(data, prior_loss, prior_weight))
}

/// Prepares the prior item: a single frame with its own timestep.
pub fn prepare_prior<T: Scalar, R: Rng>(
    item: &PriorItem<T>,
    schedule: &NoiseSchedule,
    stratified: bool,
    rng: &mut R,
) -> Result<PreparedItem<T>> {
    let cond = ConditionVector::build(&item.view, &item.image, IntensityMode::Train)?;
    let draw = TimestepDraw {
        t: rng.random_range(1..=schedule.t_max),
        first_conditioned: false,
        second_conditioned: false,
    };
    let images = item.image.clone().reshape(&[1, 3, item.image.dim(1), item.image.dim(2)]);
    prepare_item(&images, std::slice::from_ref(&item.view), &[cond], &item.caption, schedule, draw, false, stratified, rng)
}

// ---------------------------------------------------------------- loops

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_d: f64,
    pub loss_p: f64,
    pub lr_base: f64,
    pub lr_renderer: f64,
    pub skipped: bool,
    pub timestamp: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

/// Training run state: model, optimizer and position.
pub struct Trainer<T: Scalar> {
    pub stage: Stage,
    pub config: TrainConfig,
    pub model: Model<T>,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub step: usize,
    pub out: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(stage: Stage, config: TrainConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(
            AdamWConfig {
                lr_base: config.lr_base,
                lr_renderer: config.lr_renderer,
                weight_decay: config.weight_decay,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
            },
            &model.params,
        );
        Ok(Self {
            stage,
            schedule: config.schedule_spec().build()?,
            config,
            model,
            opt,
            step: 0,
            out: None,
        })
    }

    /// Fresh stage-0 model from the config's preset.
    pub fn fresh(stage: Stage, config: TrainConfig) -> Result<Self> {
        let model = Model::new(&config.model_config()?, config.seed)?;
        Self::new(stage, config, model)
    }

    /// Stage-1 trainer initialized from a stage-0 checkpoint; layers the
    /// config disables are dropped, everything else carries over by name.
    pub fn from_init(config: TrainConfig, init: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(init)?;
        let mut model = Model::new(&config.model_config()?, config.seed)?;
        let mut copied = 0;
        for id in 0..model.params.len() {
            let info = model.params.info(id).clone();
            if let Some(src) = ck.model.params.find(&info.name) {
                if ck.model.params.info(src).shape == info.shape {
                    *model.params.value_mut(id) = ck.model.params.value(src).clone();
                    copied += 1;
                }
            }
        }
        info!("initialized {copied} of {} parameters from {}", model.params.len(), init.display());
        Self::new(Stage::Mv, config, model)
    }

    /// RNG for a given step; makes resumed runs replay the same draws.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0000);
        r.set_stream(step as u64);
        r
    }

    fn prepare_2d<R: Rng>(&self, scenes: &[Scene], rng: &mut R) -> Result<PreparedItem<T>> {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let i = rng.random_range(0..scene.len());
        let image: Tensor<T> = scene.frames[i].image.cast();
        let item = PriorItem {
            caption: training_caption(&scene.spec, rng),
            view: scene.views[i].clone(),
            image,
        };
        prepare_prior(&item, &self.schedule, self.config.stratified, rng)
    }

    fn prepare_mv<R: Rng>(&self, scenes: &[Scene], rng: &mut R) -> Result<PreparedItem<T>> {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let s = sample_training_frames::<T, _>(scene, self.config.frames, rng)?;
        let draw = draw_timesteps(
            self.schedule.t_max,
            [self.config.cond_prob_first, self.config.cond_prob_second],
            rng,
        );
        prepare_item(
            &s.images,
            &s.views,
            &s.conditions,
            &s.caption,
            &self.schedule,
            draw,
            self.config.skip_last,
            self.config.stratified,
            rng,
        )
    }

    /// One optimizer step on freshly drawn data.
    pub fn train_one(&mut self, scenes: &[Scene], prior: Option<&PriorSet<T>>) -> Result<(StepLosses, StepOutcome)> {
        if scenes.is_empty() {
            return invalid("training needs at least one scene");
        }
        let mut rng = self.step_rng(self.step);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.params.len()];
        let micro = self.config.batch_size * self.config.grad_accum;
        let w = 1.0 / micro as f64;
        let mut data = 0.0;
        let mut prior_loss = None;
        for _ in 0..micro {
            let item = match self.stage {
                Stage::TwoD => self.prepare_2d(scenes, &mut rng)?,
                Stage::Mv => self.prepare_mv(scenes, &mut rng)?,
            };
            data += w * item_loss(&self.model, &item, self.stage, w, &mut grads)?.unwrap_or(0.0);
        }
        if let (Stage::Mv, Some(p)) = (self.stage, prior.filter(|p| !p.is_empty())) {
            if self.config.prior_weight > 0.0 {
                let k = rng.random_range(0..p.len());
                let item = PriorItem {
                    image: p.images[k].clone(),
                    view: p.views[k].clone(),
                    caption: p.captions[k].clone(),
                };
                let prepared = prepare_prior(&item, &self.schedule, self.config.stratified, &mut rng)?;
                prior_loss = item_loss(&self.model, &prepared, self.stage, self.config.prior_weight, &mut grads)?;
            }
        }
        let outcome = self.opt.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok((combine_losses(data, prior_loss, self.config.prior_weight), outcome))
    }

    /// Mean ε-loss on a fixed set of items (no update).
    pub fn evaluate(&self, items: &[PreparedItem<T>]) -> Result<f64> {
        let mut total = 0.0;
        for item in items {
            let tape = Tape::no_grad();
            let bx = Binder::new(&tape, &self.model.params);
            let pred = self.model.net.forward(&bx, &tape.constant(item.x_t.clone()), &item.inputs)?;
            if let Some(l) = eps_loss_var(&item.eps, &pred, &item.active) {
                total += l.value().data()[0].to_f64_lossy();
            }
        }
        Ok(total / items.len().max(1) as f64)
    }

    /// Fixed held-out items drawn with `seed`.
    pub fn held_out(&self, scenes: &[Scene], count: usize, seed: u64) -> Result<Vec<PreparedItem<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| match self.stage {
                Stage::TwoD => self.prepare_2d(scenes, &mut rng),
                Stage::Mv => self.prepare_mv(scenes, &mut rng),
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "stage": self.stage,
            "step": self.step,
            "config_sha256": self.config.hash(),
            "config": self.config,
        });
        save_checkpoint(dir, &self.model, self.config.schedule_spec(), self.config.seed, extra)?;
        fs::write(dir.join(OPTIMIZER_FILE), self.opt.to_bytes())?;
        Ok(())
    }

    /// Restores model, optimizer and step from a checkpoint written by
    /// [`Self::save`].
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let ck = load_checkpoint::<T>(dir)?;
        if ck.model.params.len() != self.model.params.len() {
            return Err(Error::CheckpointMismatch("resume checkpoint has a different architecture".into()));
        }
        self.model = ck.model;
        let opt = fs::read(dir.join(OPTIMIZER_FILE)).map_err(|_| Error::MissingCheckpoint(dir.to_path_buf()))?;
        self.opt.load_bytes(&opt)?;
        self.step = ck.manifest.extra["step"]
            .as_u64()
            .ok_or_else(|| Error::CheckpointMismatch("manifest lacks the training step".into()))? as usize;
        Ok(())
    }

    /// Trains until `config.steps`, logging JSON lines and checkpointing
    /// into `out` when given.
    pub fn run(&mut self, scenes: &[Scene], prior: Option<&PriorSet<T>>, out: Option<&Path>) -> Result<Vec<LogRecord>> {
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let (losses, outcome) = self.train_one(scenes, prior)?;
            let rec = LogRecord {
                step: self.step,
                loss_total: losses.total,
                loss_d: losses.data,
                loss_p: losses.prior,
                lr_base: self.config.lr_base,
                lr_renderer: self.config.lr_renderer,
                skipped: outcome == StepOutcome::Skipped,
                timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            };
            if self.step.is_multiple_of(self.config.log_every.max(1)) || self.step == self.config.steps {
                info!("step {} loss {:.5} (data {:.5}, prior {:.5})", rec.step, rec.loss_total, rec.loss_d, rec.loss_p);
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
            }
            records.push(rec);
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(records)
    }
}

/// Stage 0: single frames with captions; LoRA adapters frozen.
pub fn pretrain_2d<T: Scalar>(scenes: &[Scene], config: TrainConfig, out: Option<&Path>) -> Result<Trainer<T>> {
    let mut t = Trainer::fresh(Stage::TwoD, config)?;
    t.run(scenes, None, out)?;
    Ok(t)
}
