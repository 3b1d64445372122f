//! Joint multi-frame DDPM: schedule, forward noising, the ε objective,
//! ancestral reverse steps and classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::conditioning::ConditionVector;
use crate::error::{invalid, Result};
use crate::geometry::CameraView;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tables are indexed by timestep with index 0 holding `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Model timestep for each schedule index (identity unless respaced).
    pub timesteps: Vec<usize>,
}

/// Linear β from `beta_start` to `beta_end` over `t_max` steps, `σ_t² = β_t`.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let betas: Vec<f64> = (1..=t_max)
        .map(|t| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(&betas)
}

impl NoiseSchedule {
    /// Schedule from explicit `β_1..β_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return invalid("every beta must lie in (0, 1)");
        }
        let mut beta = vec![0.0];
        beta.extend_from_slice(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0];
        for a in &alpha[1..] {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            t_max: betas.len(),
            beta,
            alpha,
            alpha_bar,
            sigma,
            timesteps: (0..=betas.len()).collect(),
        })
    }

    /// 1000-step linear schedule, β from 1e-4 to 0.02.
    pub fn standard() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("valid schedule")
    }

    /// Toy default: 100 steps with the same total noise as [`Self::standard`].
    pub fn toy() -> Self {
        make_schedule(100, 1e-3, 0.2).expect("valid schedule")
    }

    /// `steps` evenly spaced timesteps of this schedule with the matching
    /// effective betas; `timesteps` maps back to the original indices.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.t_max {
            return invalid(format!("cannot respace {} steps to {steps}", self.t_max));
        }
        let picked: Vec<usize> = (1..=steps)
            .map(|i| ((i * self.t_max) as f64 / steps as f64).round() as usize)
            .collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(steps);
        for &t in &picked {
            let ab = self.alpha_bar[self.timesteps[t]];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut s = Self::from_betas(&betas)?;
        s.timesteps = std::iter::once(0)
            .chain(picked.iter().map(|&t| self.timesteps[t]))
            .collect();
        Ok(s)
    }

    /// Same schedule with `σ_t = 0` (deterministic reverse process).
    pub fn deterministic(&self) -> Self {
        Self {
            sigma: vec![0.0; self.sigma.len()],
            ..self.clone()
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return invalid(format!("timestep {t} outside [0, {}]", self.t_max));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with one timestep per frame (outer axis).
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.dim(0) != t.len() {
        return invalid("q_sample: x0, eps and per-frame timesteps must agree");
    }
    for &ti in t {
        schedule.check(ti)?;
    }
    let per = x0.len() / t.len();
    let mut out = x0.clone();
    for (n, &ti) in t.iter().enumerate() {
        let a = T::from_f64_lossy(schedule.alpha_bar[ti].sqrt());
        let b = T::from_f64_lossy((1.0 - schedule.alpha_bar[ti]).sqrt());
        let range = n * per..(n + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * *e;
        }
    }
    Ok(out)
}

/// Standard normal noise of `shape`.
pub fn gaussian<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsLoss {
    pub value: f64,
    /// Every frame was masked out; `value` is zero.
    pub all_masked: bool,
}

/// Mean squared error over the frames whose `active` flag is set.
pub fn eps_loss<T: Scalar>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>, active: &[bool]) -> EpsLoss {
    assert_eq!(eps_true.shape(), eps_pred.shape());
    assert_eq!(eps_true.dim(0), active.len());
    let per = eps_true.len() / active.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, _) in active.iter().enumerate().filter(|(_, a)| **a) {
        for k in n * per..(n + 1) * per {
            let d = eps_true.data()[k].to_f64_lossy() - eps_pred.data()[k].to_f64_lossy();
            sum += d * d;
        }
        count += per;
    }
    if count == 0 {
        return EpsLoss {
            value: 0.0,
            all_masked: true,
        };
    }
    EpsLoss {
        value: sum / count as f64,
        all_masked: false,
    }
}

/// Differentiable [`eps_loss`]; `None` when every frame is masked.
pub fn eps_loss_var<'t, T: Scalar>(
    eps_true: &Tensor<T>,
    eps_pred: &Var<'t, T>,
    active: &[bool],
) -> Option<Var<'t, T>> {
    let n_active = active.iter().filter(|a| **a).count();
    if n_active == 0 {
        return None;
    }
    let per = eps_true.len() / active.len();
    let scale = T::one() / T::from_usize(n_active * per).unwrap();
    let mask = Tensor::from_fn(eps_true.shape(), |k| {
        if active[k / per] {
            scale.sqrt()
        } else {
            T::zero()
        }
    });
    let tape = eps_pred.tape();
    let diff = eps_pred.sub(&tape.constant(eps_true.clone()));
    Some(diff.mul(&tape.constant(mask)).square().sum())
}

/// `ε_u + λ·(ε_c − ε_u)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let l = T::from_f64_lossy(lambda);
    eps_uncond.zip_map(eps_cond, |u, c| u + l * (c - u))
}

/// The joint sample state of one frame set.
#[derive(Clone, Debug)]
pub struct FrameSetState<T> {
    /// `[N, C, H, W]`.
    pub x: Tensor<T>,
    /// Schedule index per frame; 0 marks a conditioning (clean) frame.
    pub t: Vec<usize>,
    pub conditions: Vec<ConditionVector>,
    pub views: Vec<CameraView>,
    /// Caption token ids shared by all frames; empty for no caption.
    pub caption: Vec<usize>,
}

impl<T: Scalar> FrameSetState<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.t.len();
        if self.x.rank() != 4 || self.x.dim(0) != n || self.conditions.len() != n || self.views.len() != n {
            return invalid("frame set: x, t, conditions and views must agree in N");
        }
        for &t in &self.t {
            schedule.check(t)?;
        }
        Ok(())
    }

    /// Frames still being denoised.
    pub fn active(&self) -> Vec<bool> {
        self.t.iter().map(|&t| t > 0).collect()
    }
}

/// One ancestral step on every frame with `t > 0`, drawing noise from that
/// frame's own stream. Frames at `t = 0` are untouched.
pub fn p_sample_step<T: Scalar, R: Rng>(
    state: &FrameSetState<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> FrameSetState<T> {
    assert_eq!(eps_pred.shape(), state.x.shape());
    assert_eq!(rngs.len(), state.len(), "one noise stream per frame");
    let per = state.x.len() / state.len().max(1);
    let mut next = state.clone();
    for (n, rng) in rngs.iter_mut().enumerate() {
        let t = state.t[n];
        if t == 0 {
            continue;
        }
        let inv_sqrt_alpha = 1.0 / schedule.alpha[t].sqrt();
        let coef = schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt();
        let sigma = if t > 1 { schedule.sigma[t] } else { 0.0 };
        let range = n * per..(n + 1) * per;
        for (o, e) in next.x.data_mut()[range.clone()].iter_mut().zip(&eps_pred.data()[range]) {
            let mut v = inv_sqrt_alpha * (o.to_f64_lossy() - coef * e.to_f64_lossy());
            if sigma > 0.0 {
                v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            *o = T::from_f64_lossy(v);
        }
        next.t[n] = t - 1;
    }
    next
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn state(x: Tensor<f64>, t: Vec<usize>) -> FrameSetState<f64> {
        let n = t.len();
        let view = CameraView::orbit(Vector3::new(0.0, 0.0, 2.0), 4.0, 4).unwrap();
        FrameSetState {
            x,
            t,
            conditions: vec![ConditionVector::for_view(&view).unwrap(); n],
            views: vec![view; n],
            caption: vec![],
        }
    }

    fn rngs(n: usize) -> Vec<ChaCha8Rng> {
        (0..n)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(1);
                r.set_stream(k as u64);
                r
            })
            .collect()
    }

    #[test]
    fn schedule_cases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.t_max, 1000);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!((s.alpha_bar[1] - (1.0 - s.beta[1])).abs() < 1e-15);
        assert_eq!(NoiseSchedule::toy().t_max, 100);
        let s = NoiseSchedule::from_betas(&[0.1, 0.1, 0.1]).unwrap();
        assert!((s.alpha_bar[3] - 0.729).abs() < 1e-12);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        let s = NoiseSchedule::standard();
        for t in 1..=1000 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!(t == 1 || s.beta[t] >= s.beta[t - 1]);
        }
    }

    #[test]
    fn respacing_preserves_alpha_bar() {
        let s = make_schedule(100, 1e-4, 0.2).unwrap();
        let r = s.respace(10).unwrap();
        assert_eq!(r.t_max, 10);
        assert_eq!(r.timesteps[10], 100);
        for i in 0..=10 {
            assert!((r.alpha_bar[i] - s.alpha_bar[r.timesteps[i]]).abs() < 1e-12);
        }
        assert_eq!(s.respace(100).unwrap().alpha_bar, s.alpha_bar);
        assert!(s.respace(101).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::from_betas(&[0.1, 0.1]).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(q_sample(&z, &[2], &z, &s).unwrap(), z);
        let x0 = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -1.0]);
        let eps = Tensor::from_f64(&[1, 2], &[5.0, 7.0]);
        assert_eq!(q_sample(&x0, &[0], &eps, &s).unwrap(), x0);
        assert!(q_sample(&x0, &[3], &eps, &s).is_err());

        // chain iteration with matched noises: x2 = √α2·x1 + √β2·n2 where
        // the per-step noises combine into the marginal ε
        let (a1, a2) = (0.9f64, 0.9f64);
        let (n1, n2) = (0.5f64, 0.5f64);
        let x1 = a1.sqrt() * 1.0 + (1.0 - a1).sqrt() * n1;
        let x2 = a2.sqrt() * x1 + (1.0 - a2).sqrt() * n2;
        let combined = (a2.sqrt() * (1.0 - a1).sqrt() * n1 + (1.0 - a2).sqrt() * n2)
            / (1.0 - a1 * a2).sqrt();
        let closed: Tensor<f64> = q_sample(
            &Tensor::from_f64(&[1, 1], &[1.0]),
            &[2],
            &Tensor::from_f64(&[1, 1], &[combined]),
            &s,
        )
        .unwrap();
        assert!((closed.data()[0] - x2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn chain_matches_closed_form(
            betas in prop::collection::vec(0.001f64..0.5, 1..=10),
            noises in prop::collection::vec(-3.0f64..3.0, 10),
            x0 in -2.0f64..2.0,
        ) {
            let s = NoiseSchedule::from_betas(&betas).unwrap();
            let mut x = x0;
            let mut eps_num = 0.0;
            for t in 1..=s.t_max {
                x = s.alpha[t].sqrt() * x + s.beta[t].sqrt() * noises[t - 1];
                eps_num = s.alpha[t].sqrt() * eps_num + s.beta[t].sqrt() * noises[t - 1];
            }
            let eps = eps_num / (1.0 - s.alpha_bar[s.t_max]).sqrt();
            let closed: Tensor<f64> = q_sample(
                &Tensor::from_f64(&[1, 1], &[x0]),
                &[s.t_max],
                &Tensor::from_f64(&[1, 1], &[eps]),
                &s,
            ).unwrap();
            prop_assert!((closed.data()[0] - x).abs() < 1e-10);
        }

        #[test]
        fn conditioned_frames_pass_through(seed in 0u64..1000, t in 1usize..10) {
            let s = make_schedule(10, 0.01, 0.2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor<f64> = gaussian(&[2, 1, 2, 2], &mut rng);
            let eps: Tensor<f64> = gaussian(&[2, 1, 2, 2], &mut rng);
            let st = state(x.clone(), vec![0, t]);
            let next = p_sample_step(&st, &eps, &s, &mut rngs(2));
            prop_assert_eq!(&next.x.data()[..4], &x.data()[..4]);
            prop_assert_eq!(&next.t, &vec![0, t - 1]);
        }
    }

    #[test]
    fn q_sample_moments() {
        let s = make_schedule(100, 1e-4, 0.2).unwrap();
        let t = 37;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::full(&[1, n], 0.8);
        let eps: Tensor<f64> = gaussian(&[1, n], &mut rng);
        let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
        let mean = xt.mean().to_f64_lossy();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_mean = s.alpha_bar[t].sqrt() * 0.8;
        let want_var = 1.0 - s.alpha_bar[t];
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean);
        assert!((var - want_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn eps_loss_cases() {
        let a = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 2.0]);
        assert_eq!(eps_loss(&a, &a, &[true, true]).value, 0.0);
        let one = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 1.0, 1.0]);
        let zero = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(eps_loss(&one, &zero, &[true]).value, 1.0);
        let t = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 3.0]);
        let p = Tensor::<f64>::zeros(&[2, 1]);
        assert_eq!(eps_loss(&t, &p, &[true, false]).value, 1.0);
        let masked = eps_loss(&t, &p, &[false, false]);
        assert!(masked.all_masked && masked.value == 0.0);

        let tape = crate::autograd::Tape::new();
        let pv = tape.leaf(p);
        let lv = eps_loss_var(&t, &pv, &[true, false]).unwrap();
        assert!((lv.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(eps_loss_var(&t, &pv, &[false, false]).is_none());
    }

    #[test]
    fn reverse_step_cases() {
        // σ = 0, ε = 0 → x/√α
        let s = NoiseSchedule::from_betas(&[0.1, 0.3]).unwrap().deterministic();
        let st = state(Tensor::from_f64(&[1, 1, 1, 1], &[2.0]), vec![2]);
        let next = p_sample_step(&st, &Tensor::zeros(&[1, 1, 1, 1]), &s, &mut rngs(1));
        assert!((next.x.data()[0] - 2.0 / 0.7f64.sqrt()).abs() < 1e-12);

        // β_t = 0.1, ᾱ_t = 0.5, x_t = 1, ε = 0.2 → (1 − 0.1/√0.5·0.2)/√0.9
        let mut s = NoiseSchedule::from_betas(&[0.1, 0.1]).unwrap().deterministic();
        s.alpha_bar[2] = 0.5;
        let st = state(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]), vec![2]);
        let next = p_sample_step(&st, &Tensor::full(&[1, 1, 1, 1], 0.2), &s, &mut rngs(1));
        let want = (1.0 - 0.1 / 0.5f64.sqrt() * 0.2) / 0.9f64.sqrt();
        assert!((next.x.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_denoiser_converges() {
        let s = make_schedule(50, 1e-4, 0.3).unwrap().deterministic();
        let target = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |k| ((k as f64) * 0.37).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = state(gaussian(&[2, 1, 4, 4], &mut rng), vec![50, 50]);
        let mut streams = rngs(2);
        while st.t.iter().any(|&t| t > 0) {
            let t = st.t[0];
            let ab = s.alpha_bar[t];
            let eps = st
                .x
                .zip_map(&target, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt());
            st = p_sample_step(&st, &eps, &s, &mut streams);
        }
        let rms = (st.x.zip_map(&target, |a, b| (a - b).powi(2)).mean()).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }

    #[test]
    fn guidance_cases() {
        let u = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]);
        let c = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]);
        assert_eq!(cfg_combine(&u, &c, 0.0), u);
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        assert_eq!(cfg_combine(&u, &c, 7.5).data()[0], 7.5);
    }
}
