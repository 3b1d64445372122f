//! Sampling: unconditional frame sets, image-conditional generation and
//! autoregressive trajectories.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionVector;
use crate::denoiser::{DenoiserInputs, Model};
use crate::diffusion::{cfg_combine, gaussian, p_sample_step, FrameSetState, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::geometry::{project, CameraView};
use crate::scalar::Scalar;
use crate::synthdata::spherical_of;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 7.5;
pub const DEFAULT_FIRST_BATCH: usize = 10;

/// Anything that predicts per-frame noise for a frame set.
pub trait EpsModel<T: Scalar> {
    fn predict(&self, x: &Tensor<T>, inputs: &DenoiserInputs<T>) -> Result<Tensor<T>>;
    fn max_frames(&self) -> usize;
}

impl<T: Scalar> EpsModel<T> for Model<T> {
    fn predict(&self, x: &Tensor<T>, inputs: &DenoiserInputs<T>) -> Result<Tensor<T>> {
        Model::predict(self, x, inputs)
    }

    fn max_frames(&self) -> usize {
        self.config().max_frames
    }
}

/// Predicts the exact noise that maps the current sample onto fixed
/// targets `[N, C, H, W]` (model space), ignoring every condition.
pub struct OracleModel<T> {
    pub targets: Tensor<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> EpsModel<T> for OracleModel<T> {
    fn predict(&self, x: &Tensor<T>, inputs: &DenoiserInputs<T>) -> Result<Tensor<T>> {
        if x.shape() != self.targets.shape() {
            return invalid("oracle targets and frames differ in shape");
        }
        let per = x.len() / x.dim(0);
        let mut out = Tensor::zeros(x.shape());
        for (n, &t) in inputs.timesteps.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let ab = self.schedule.alpha_bar[t];
            for k in n * per..(n + 1) * per {
                let v = (x.data()[k].to_f64_lossy() - ab.sqrt() * self.targets.data()[k].to_f64_lossy())
                    / (1.0 - ab).sqrt();
                out.data_mut()[k] = T::from_f64_lossy(v);
            }
        }
        Ok(out)
    }

    fn max_frames(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub lambda_cfg: f64,
    /// Zero reverse-process noise.
    pub deterministic: bool,
    pub seed: u64,
    /// Clamp the implied clean image to `[-1, 1]` before each reverse step.
    /// Without it an imperfect model drifts out of range over the chain.
    #[serde(default)]
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lambda_cfg: DEFAULT_LAMBDA,
            deterministic: false,
            seed: 0,
            clip_x0: true,
        }
    }
}

/// Maps images in `[0, 1]` to the model's `[-1, 1]` range.
pub fn to_model_space<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * T::c(2.0) - T::one())
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn to_image_space<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| ((v + T::one()) * T::c(0.5)).max(T::zero()).min(T::one()))
}

/// The noise that is consistent with the clamped estimate
/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`. Unchanged wherever `x̂₀` is in range.
fn clip_eps<T: Scalar>(state: &FrameSetState<T>, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Tensor<T> {
    let per = eps.len() / state.len().max(1);
    let mut out = eps.clone();
    for (n, &t) in state.t.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let (a, b) = (schedule.alpha_bar[t].sqrt(), (1.0 - schedule.alpha_bar[t]).sqrt());
        for k in n * per..(n + 1) * per {
            let x = state.x.data()[k].to_f64_lossy();
            let x0 = (x - b * eps.data()[k].to_f64_lossy()) / a;
            if x0.abs() > 1.0 {
                out.data_mut()[k] = T::from_f64_lossy((x - a * x0.clamp(-1.0, 1.0)) / b);
            }
        }
    }
    out
}

fn frame_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64);
            r
        })
        .collect()
}

/// Joint reverse process over a frame set: `cond` frames (already in model
/// space, `[3, H, W]` each) stay at `t = 0`; generative frames start from
/// Gaussian noise. Returns the final state.
fn denoise<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    base: &NoiseSchedule,
    cond: &[(Tensor<T>, CameraView)],
    targets: &[CameraView],
    caption: &[usize],
    cfg: &SamplerConfig,
) -> Result<FrameSetState<T>> {
    let (nc, ng) = (cond.len(), targets.len());
    let n = nc + ng;
    if ng == 0 {
        return invalid("nothing to generate");
    }
    if n > model.max_frames() {
        return invalid(format!("{n} frames exceed the model's maximum of {}", model.max_frames()));
    }
    let mut schedule = base.respace(cfg.steps)?;
    if cfg.deterministic {
        schedule = schedule.deterministic();
    }
    let [h, w] = targets[0].resolution;
    let mut rngs = frame_rngs(cfg.seed, n);
    let mut frames = Vec::with_capacity(n);
    let mut views = Vec::with_capacity(n);
    for (img, view) in cond {
        if img.shape() != [3, h, w] {
            return invalid(format!("conditioning image {:?} does not match {h}x{w}", img.shape()));
        }
        frames.push(img.clone());
        views.push(view.clone());
    }
    for (k, view) in targets.iter().enumerate() {
        if view.resolution != [h, w] {
            return invalid("all frames must share one resolution");
        }
        frames.push(gaussian(&[3, h, w], &mut rngs[nc + k]));
        views.push(view.clone());
    }
    // inference uses the fixed intensity encoding for every frame
    let conditions = views.iter().map(ConditionVector::for_view).collect::<Result<Vec<_>>>()?;
    let mut state = FrameSetState {
        x: Tensor::stack(&frames),
        t: (0..n).map(|i| if i < nc { 0 } else { schedule.t_max }).collect(),
        conditions,
        views,
        caption: caption.to_vec(),
    };
    state.validate(&schedule)?;
    while state.t.iter().any(|&t| t > 0) {
        let mut inputs = DenoiserInputs::from_state(&state, &schedule);
        inputs.seed = cfg.seed;
        let eps = if caption.is_empty() || cfg.lambda_cfg == 1.0 {
            model.predict(&state.x, &inputs)?
        } else {
            let mut uncond = inputs.clone();
            uncond.caption.clear();
            let eps_u = model.predict(&state.x, &uncond)?;
            if cfg.lambda_cfg == 0.0 {
                eps_u
            } else {
                cfg_combine(&eps_u, &model.predict(&state.x, &inputs)?, cfg.lambda_cfg)
            }
        };
        let eps = if cfg.clip_x0 { clip_eps(&state, &eps, &schedule) } else { eps };
        state = p_sample_step(&state, &eps, &schedule, &mut rngs);
    }
    Ok(state)
}

fn split_images<T: Scalar>(x: &Tensor<T>, from: usize) -> Vec<Tensor<T>> {
    let s = x.shape();
    (from..s[0])
        .map(|i| to_image_space(&x.slice_outer(i, 1).reshape(&s[1..])))
        .collect()
}

/// `N ≥ 2` frames from noise; images `[3, H, W]` in `[0, 1]`.
pub fn generate_unconditional<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    views: &[CameraView],
    caption: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<T>>> {
    if views.len() < 2 {
        return invalid("unconditional generation needs at least two views");
    }
    let state = denoise(model, schedule, &[], views, caption, cfg)?;
    Ok(split_images(&state.x, 0))
}

/// One frame from noise (2D prior sampling).
pub fn sample_single<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    view: &CameraView,
    caption: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let cfg = SamplerConfig {
        steps,
        seed,
        ..SamplerConfig::default()
    };
    let state = denoise(model, schedule, &[], std::slice::from_ref(view), caption, &cfg)?;
    Ok(split_images(&state.x, 0).remove(0))
}

/// Generates `targets` given posed images in `[0, 1]`. Returns only the
/// generated frames.
pub fn generate_conditional<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &[(Tensor<T>, CameraView)],
    targets: &[CameraView],
    caption: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<T>>> {
    Ok(generate_conditional_full(model, schedule, cond, targets, caption, cfg)?.1)
}

/// As [`generate_conditional`], also returning the conditioning frames as
/// they left the sampler (model space, `[n_c, 3, H, W]`).
pub fn generate_conditional_full<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &[(Tensor<T>, CameraView)],
    targets: &[CameraView],
    caption: &[usize],
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if cond.is_empty() {
        return invalid("conditional generation needs at least one conditioning image");
    }
    let cond_model: Vec<(Tensor<T>, CameraView)> =
        cond.iter().map(|(img, v)| (to_model_space(img), v.clone())).collect();
    let state = denoise(model, schedule, &cond_model, targets, caption, cfg)?;
    Ok((state.x.slice_outer(0, cond.len()), split_images(&state.x, cond.len())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Size of the unconditional 360° batch.
    pub first_batch: usize,
    /// Generated frames per later batch.
    pub batch_n_g: usize,
    pub first_lambda: f64,
    pub later_lambda: f64,
    pub steps: usize,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            first_batch: DEFAULT_FIRST_BATCH,
            batch_n_g: DEFAULT_FIRST_BATCH,
            first_lambda: DEFAULT_LAMBDA,
            later_lambda: 0.0,
            steps: 50,
            deterministic: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// Trajectory indices generated in this batch.
    pub generated: Vec<usize>,
    /// Trajectory indices used as conditioning frames.
    pub conditioned_on: Vec<usize>,
    pub lambda_cfg: f64,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryOutput<T> {
    /// One image per trajectory view, in trajectory order.
    pub images: Vec<Tensor<T>>,
    pub batches: Vec<BatchRecord>,
}

/// Trajectory indices of the first batch: `n` frames evenly spread over
/// the trajectory.
pub fn first_batch_indices(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| k * m / n).collect()
}

/// Batches after the first: `(conditioning indices, generated indices)`.
pub fn later_batches(m: usize, first: &[usize], batch_n_g: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let rest: Vec<usize> = (0..m).filter(|i| !first.contains(i)).collect();
    rest.chunks(batch_n_g.max(1))
        .map(|c| (first.to_vec(), c.to_vec()))
        .collect()
}

/// Rejects cameras that do not frame the normalized object: the origin
/// must lie in front of the camera and project inside the image.
pub fn check_normalized(views: &[CameraView]) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        v.validate()?;
        let p = project(&nalgebra::Vector3::zeros(), v);
        let [h, w] = v.resolution;
        let inside = (0.0..w as f64).contains(&p.pixel[0]) && (0.0..h as f64).contains(&p.pixel[1]);
        let r = v.center().norm();
        if p.is_behind() || !inside || r <= crate::geometry::CUBE_HALF * 3f64.sqrt() {
            return invalid(format!("trajectory view {i} is not normalized to the unit cube"));
        }
    }
    Ok(())
}

/// Median elevation and radius of a trajectory (for reporting).
pub fn median_orbit(views: &[CameraView]) -> (f64, f64) {
    let mut el: Vec<f64> = views.iter().map(|v| spherical_of(v).1).collect();
    let mut r: Vec<f64> = views.iter().map(|v| spherical_of(v).2).collect();
    el.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    (el[el.len() / 2], r[r.len() / 2])
}

/// Autoregressive rendering of `trajectory`: an unconditional first batch
/// spread over the whole trajectory, then batches of consecutive poses
/// conditioned on every first-batch image.
pub fn generate_trajectory<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    trajectory: &[CameraView],
    caption: &[usize],
    cfg: &TrajectoryConfig,
) -> Result<TrajectoryOutput<T>> {
    let m = trajectory.len();
    check_normalized(trajectory)?;
    if cfg.first_batch < 2 || m < cfg.first_batch {
        return invalid(format!(
            "trajectory of {m} poses cannot host a first batch of {}",
            cfg.first_batch
        ));
    }
    let mut images: Vec<Option<Tensor<T>>> = vec![None; m];
    let mut batches = Vec::new();

    let first = first_batch_indices(m, cfg.first_batch);
    let start = Instant::now();
    let sampler = SamplerConfig {
        steps: cfg.steps,
        lambda_cfg: cfg.first_lambda,
        deterministic: cfg.deterministic,
        seed: cfg.seed,
        clip_x0: true,
    };
    let views: Vec<CameraView> = first.iter().map(|&i| trajectory[i].clone()).collect();
    for (&i, img) in first.iter().zip(generate_unconditional(model, schedule, &views, caption, &sampler)?) {
        images[i] = Some(img);
    }
    batches.push(BatchRecord {
        generated: first.clone(),
        conditioned_on: Vec::new(),
        lambda_cfg: cfg.first_lambda,
        seed: cfg.seed,
        seconds: start.elapsed().as_secs_f64(),
    });

    for (b, (cond_idx, gen_idx)) in later_batches(m, &first, cfg.batch_n_g).into_iter().enumerate() {
        let start = Instant::now();
        let seed = cfg.seed.wrapping_add(b as u64 + 1);
        let cond: Vec<(Tensor<T>, CameraView)> = cond_idx
            .iter()
            .map(|&i| (images[i].clone().expect("first batch is done"), trajectory[i].clone()))
            .collect();
        let targets: Vec<CameraView> = gen_idx.iter().map(|&i| trajectory[i].clone()).collect();
        let sampler = SamplerConfig {
            lambda_cfg: cfg.later_lambda,
            seed,
            ..sampler
        };
        let out = generate_conditional(model, schedule, &cond, &targets, caption, &sampler)?;
        for (&i, img) in gen_idx.iter().zip(out) {
            images[i] = Some(img);
        }
        batches.push(BatchRecord {
            generated: gen_idx,
            conditioned_on: cond_idx,
            lambda_cfg: cfg.later_lambda,
            seed,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrajectoryOutput {
        images: images.into_iter().map(|i| i.expect("every pose is generated")).collect(),
        batches,
    })
}
