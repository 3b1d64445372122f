//! Invariant suites behind `mvdiff verify`, and gradient checks by
//! component name.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{check_gradients_with, GradCheckReport};
use crate::attention::{caption_attention_delta, cross_frame_attention_delta, AttentionWeights};
use crate::autograd::{compositing_weights, Tape, Var};
use crate::conditioning::{condition_matrix, ConditionVector};
use crate::denoiser::{DenoiserConfig, DenoiserInputs, Model};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::generation::{generate_conditional_full, generate_unconditional, to_model_space, OracleModel, SamplerConfig};
use crate::geometry::{contract, project, uncontract, unproject_pixel, CameraView};
use crate::nn::{Binder, Builder, Conv, GroupNorm, Linear, ParamStore};
use crate::projection::{plan_render, render_with, FrameContext, ProjectionConfig, ProjectionLayer, RenderField, RenderOptions};
use crate::synthdata::orbit_view;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Geometry,
    Render,
    Gradcheck,
    Diffusion,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Geometry, Suite::Render, Suite::Gradcheck, Suite::Diffusion];

    pub fn parse(name: &str) -> Result<Vec<Suite>> {
        Ok(match name {
            "geometry" => vec![Suite::Geometry],
            "render" => vec![Suite::Render],
            "gradcheck" => vec![Suite::Gradcheck],
            "diffusion" => vec![Suite::Diffusion],
            "all" => Suite::ALL.to_vec(),
            other => return invalid(format!("unknown suite {other:?}")),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: Suite, name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error < tolerance,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

pub fn run_suites(suites: &[Suite]) -> VerifyReport {
    let checks: Vec<CheckResult> = suites
        .iter()
        .flat_map(|s| match s {
            Suite::Geometry => geometry_suite(),
            Suite::Render => render_suite(compositing_weights::<f64>),
            Suite::Gradcheck => gradcheck_suite(),
            Suite::Diffusion => diffusion_suite(),
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { checks, passed }
}

// ---------------------------------------------------------------- geometry

pub fn geometry_suite() -> Vec<CheckResult> {
    let s = Suite::Geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6765_6f6d);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(-1.2..1.2);
        let view = orbit_view(az, el, rng.random_range(1.0..4.0), 32).expect("orbit camera");
        let pixel = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)];
        let depth = rng.random_range(0.1..10.0);
        let p = unproject_pixel(pixel, depth, &view).expect("positive depth");
        let back = project(&p, &view);
        worst = worst
            .max((back.pixel[0] - pixel[0]).abs())
            .max((back.pixel[1] - pixel[1]).abs())
            .max((back.depth - depth).abs());
    }
    let c = contract(&Vector3::new(4.0, 0.0, 0.0));
    let closed = (c - Vector3::new(1.75, 0.0, 0.0)).amax();
    let mut inv: f64 = 0.0;
    for _ in 0..10_000 {
        let x = Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0));
        inv = inv.max(((uncontract(&contract(&x)) - x).amax()) / x.amax().max(1.0));
    }
    vec![
        CheckResult::new(s, "project_unproject_round_trip", worst, 1e-5),
        // must be exact
        CheckResult::new(s, "contraction_closed_form", closed, f64::MIN_POSITIVE),
        CheckResult::new(s, "contraction_inverse", inv, 1e-9),
    ]
}

// ---------------------------------------------------------------- render

/// Per-sample weights from densities and segment lengths for `rays` rays
/// of `samples` samples.
pub type Compositor = fn(&[f64], &[f64], usize, usize) -> Vec<f64>;

/// Compositing checks against closed forms; `weights` is the function
/// under test.
pub fn render_suite(weights: Compositor) -> Vec<CheckResult> {
    let s = Suite::Render;
    let mut out = Vec::new();

    // constant density and feature along a unit-length segment
    let view = CameraView::orbit(Vector3::new(0.0, 0.0, 2.0), 1.0, 1).expect("axis camera");
    let opts = RenderOptions {
        n_samples: 256,
        background: false,
        stratified: false,
    };
    let plan = plan_render::<f64, ChaCha8Rng>(&view, 2, &opts, None);
    let (sigma, c) = (1.7, 0.6);
    let length: f64 = plan.deltas.iter().sum();
    let w = weights(&vec![sigma; 256], &plan.deltas, 1, 256);
    let got = c * w.iter().sum::<f64>();
    let want = c * (1.0 - (-sigma * length).exp());
    out.push(CheckResult::new(s, "constant_segment_relative_error", (got - want).abs() / want, 0.01));

    // the same through the differentiable renderer
    let tape = Tape::no_grad();
    let table = tape.constant(Tensor::zeros(&[8, 1]));
    let r = render_with(&table, &plan, |f| {
        let k = f.shape()[0];
        (tape.constant(Tensor::full(&[k, 1], sigma)), tape.constant(Tensor::full(&[k, 1], c)))
    });
    let got = r.value().data()[0];
    out.push(CheckResult::new(s, "render_constant_segment_relative_error", (got - want).abs() / want, 0.01));

    // weights are a sub-partition of unity for arbitrary densities
    let mut rng = ChaCha8Rng::seed_from_u64(0x7265_6e64);
    let (rays, samples) = (500, 32);
    let density: Vec<f64> = (0..rays * samples).map(|_| rng.random_range(0.0..40.0)).collect();
    let deltas: Vec<f64> = (0..rays * samples).map(|_| rng.random_range(0.0..0.2)).collect();
    let w = weights(&density, &deltas, rays, samples);
    let excess = w
        .chunks(samples)
        .map(|r| {
            let negative = r.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
            (r.iter().sum::<f64>() - 1.0).max(0.0).max(negative)
        })
        .fold(0.0, f64::max);
    out.push(CheckResult::new(s, "weights_sum_at_most_one", excess, 1e-6));

    let mut d = vec![0.3; 8];
    d[0] = 1e6;
    let w = weights(&d, &[0.1; 8], 1, 8);
    let err = (w[0] - 1.0).abs().max(w[1..].iter().map(|v| v.abs()).fold(0.0, f64::max));
    out.push(CheckResult::new(s, "saturated_first_sample", err, 1e-9));
    out
}

// ---------------------------------------------------------------- gradients

pub const GRAD_COMPONENTS: [(&str, f64); 8] = [
    ("linear", 1e-8),
    ("conv2d", 1e-6),
    ("group_norm", 1e-5),
    ("cross_frame_attention", 1e-5),
    ("caption_attention", 1e-5),
    ("render", 1e-4),
    ("projection", 1e-4),
    ("denoiser", 1e-3),
];

pub fn gradcheck_suite() -> Vec<CheckResult> {
    GRAD_COMPONENTS
        .iter()
        .map(|&(name, tol)| {
            let err = grad_check(name, 1e-6).map(|r| r.max_rel_error).unwrap_or(f64::INFINITY);
            CheckResult::new(Suite::Gradcheck, name, err, tol)
        })
        .collect()
}

fn randomized(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in store.values_mut() {
        *v = Tensor::randn(v.shape(), std, &mut rng);
    }
}

fn ring(n: usize, size: usize) -> Vec<CameraView> {
    (0..n)
        .map(|k| orbit_view(0.4 + std::f64::consts::TAU * k as f64 / n as f64, 0.4, 1.6, size).expect("ring camera"))
        .collect()
}

/// Parameters and inputs of a micro instance; the closure receives the
/// parameter vars first, then the inputs.
fn check_params<F>(store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, eps: f64, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&Binder<'t, f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let np = store.len();
    let mut all: Vec<Tensor<f64>> = store.values().to_vec();
    all.extend(inputs);
    check_gradients_with(&all, eps, store, |tape, store, vars| {
        let bx = Binder::with_vars(tape, store, &vars[..np]);
        f(&bx, &vars[np..])
    })
}

/// Central differences against reverse mode over every parameter and input
/// of a micro instance of `component`, in double precision.
pub fn grad_check(component: &str, eps: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let rnd = |shape: &[usize], seed: u64| Tensor::<f64>::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let report = match component {
        "linear" => {
            let l = Linear::new(&mut Builder::new(&mut store, &mut rng), 3, 2);
            check_params(store, vec![rnd(&[4, 3], 1)], eps, move |bx, x| l.forward(bx, &x[0]))
        }
        "conv2d" => {
            let c = Conv::new2d(&mut Builder::new(&mut store, &mut rng), 2, 3, 3, 1);
            randomized(&mut store, 2, 0.5);
            check_params(store, vec![rnd(&[2, 2, 4, 4], 3)], eps, move |bx, x| c.forward(bx, &x[0]))
        }
        "group_norm" => {
            let g = GroupNorm::new(&mut Builder::new(&mut store, &mut rng), 4, 2);
            randomized(&mut store, 4, 0.5);
            check_params(store, vec![rnd(&[2, 4, 3, 3], 5)], eps, move |bx, x| g.forward(bx, &x[0]))
        }
        "cross_frame_attention" | "caption_attention" => {
            let caption = component == "caption_attention";
            let d_kv = if caption { 3 } else { 4 };
            let w = AttentionWeights::new(&mut Builder::new(&mut store, &mut rng), 4, d_kv, 4, 2);
            randomized(&mut store, 6, 0.4);
            let inputs = vec![rnd(&[3, 4, 2, 2], 7), rnd(&[3, 10], 8), rnd(&[2, 3], 9)];
            check_params(store, inputs, eps, move |bx, x| {
                if caption {
                    caption_attention_delta(bx, &x[0], &x[1], Some(&x[2]), &w).expect("non-empty caption")
                } else {
                    cross_frame_attention_delta(bx, &x[0], &x[1], &w)
                }
            })
        }
        "render" => {
            let field = RenderField::new(&mut Builder::new(&mut store, &mut rng), 3, 5);
            randomized(&mut store, 10, 0.5);
            let view = orbit_view(0.7, 0.5, 1.5, 2)?;
            let opts = RenderOptions {
                n_samples: 4,
                background: true,
                stratified: false,
            };
            let plan = plan_render::<f64, ChaCha8Rng>(&view, 4, &opts, None);
            check_params(store, vec![rnd(&[128, 3], 11)], eps, move |bx, x| {
                render_with(&x[0], &plan, |f| field.forward(bx, f))
            })
        }
        "projection" => {
            let cfg = ProjectionConfig {
                channels: 3,
                reduced: 3,
                grid: 4,
                temb_dim: 6,
                temb_reduced: 3,
                hidden: 5,
                refine_blocks: 1,
            };
            let layer = ProjectionLayer::new(&mut Builder::new(&mut store, &mut rng), cfg);
            randomized(&mut store, 12, 0.4);
            let ctx = FrameContext {
                views: ring(2, 2),
                temb: rnd(&[2, 6], 13),
                skip: None,
                render: RenderOptions {
                    n_samples: 4,
                    background: true,
                    stratified: false,
                },
                seed: 0,
            };
            check_params(store, vec![rnd(&[2, 3, 2, 2], 14)], eps, move |bx, x| {
                layer.forward(bx, &x[0], &ctx, 0).expect("valid frame context")
            })
        }
        "denoiser" => {
            let mut model = Model::<f64>::new(&DenoiserConfig::nano(), 15)?;
            randomized(&mut model.params, 16, 0.1);
            let views = ring(2, 4);
            let conds = views.iter().map(ConditionVector::for_view).collect::<Result<Vec<_>>>()?;
            let inputs = DenoiserInputs {
                timesteps: vec![12, 40],
                conditions: condition_matrix(&conds),
                views,
                caption: vec![1, 4],
                skip: None,
                stratified: false,
                seed: 0,
            };
            let net = model.net;
            check_params(model.params, vec![rnd(&[2, 3, 4, 4], 17)], eps, move |bx, x| {
                net.forward(bx, &x[0], &inputs).expect("valid micro inputs")
            })
        }
        other => return invalid(format!("unknown gradient-check component {other:?}")),
    };
    Ok(report)
}

// ---------------------------------------------------------------- diffusion

pub fn diffusion_suite() -> Vec<CheckResult> {
    let s = Suite::Diffusion;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6469_6666);
    let mut chain: f64 = 0.0;
    for _ in 0..1000 {
        let t_max = rng.random_range(1..=10);
        let betas: Vec<f64> = (0..t_max).map(|_| rng.random_range(0.001..0.5)).collect();
        let sched = NoiseSchedule::from_betas(&betas).expect("valid betas");
        let x0: f64 = rng.random_range(-2.0..2.0);
        let (mut x, mut noise) = (x0, 0.0);
        for t in 1..=t_max {
            let n: f64 = rng.random_range(-3.0..3.0);
            x = sched.alpha[t].sqrt() * x + sched.beta[t].sqrt() * n;
            noise = sched.alpha[t].sqrt() * noise + sched.beta[t].sqrt() * n;
        }
        let eps = noise / (1.0 - sched.alpha_bar[t_max]).sqrt();
        let closed = sched.alpha_bar[t_max].sqrt() * x0 + (1.0 - sched.alpha_bar[t_max]).sqrt() * eps;
        chain = chain.max((closed - x).abs());
    }

    let sched = NoiseSchedule::toy();
    let views = ring(3, 4);
    let targets = Tensor::from_fn(&[3, 3, 4, 4], |k| ((k as f64) * 0.37).sin() * 0.9);
    let oracle = OracleModel {
        targets: targets.clone(),
        schedule: sched.clone(),
    };
    let cfg = SamplerConfig {
        steps: 50,
        lambda_cfg: 1.0,
        deterministic: true,
        seed: 1,
        clip_x0: false,
    };
    let rms = match generate_unconditional(&oracle, &sched, &views, &[], &cfg) {
        Ok(out) => {
            let got = Tensor::stack(&out.iter().map(to_model_space).collect::<Vec<_>>());
            got.zip_map(&targets, |a, b| (a - b) * (a - b)).mean().sqrt()
        }
        Err(_) => f64::INFINITY,
    };

    let cond_img = Tensor::from_fn(&[3, 4, 4], |k| (k % 5) as f64 / 4.0);
    let cond = vec![(cond_img.clone(), views[0].clone())];
    let cfg = SamplerConfig {
        deterministic: false,
        ..cfg
    };
    let immut = match generate_conditional_full(&oracle, &sched, &cond, &views[1..], &[], &cfg) {
        Ok((frames, _)) => frames.reshape(&[3, 4, 4]).max_abs_diff(&to_model_space(&cond_img)),
        Err(_) => f64::INFINITY,
    };
    vec![
        CheckResult::new(s, "chain_matches_marginal", chain, 1e-10),
        CheckResult::new(s, "oracle_reverse_rms", rms, 0.05),
        // bit-exact
        CheckResult::new(s, "conditioning_frames_immutable", immut, f64::MIN_POSITIVE),
    ]
}
