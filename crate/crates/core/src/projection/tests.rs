use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::voxel_index;
use super::*;
use crate::autograd::{compositing_weights, Tape};
use crate::evaluation::gradcheck::check_gradients_with;
use crate::geometry::{project, unproject_pixel};
use crate::nn::ParamStore;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn ring_views(n: usize, size: usize) -> Vec<CameraView> {
    (0..n)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / n as f64;
            CameraView::orbit(Vector3::new(2.0 * a.sin(), 0.6, 2.0 * a.cos()), size as f64 * 1.2, size).unwrap()
        })
        .collect()
}

fn layer(cfg: ProjectionConfig, seed: u64) -> (ParamStore<f64>, ProjectionLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = ProjectionLayer::new(&mut Builder::new(&mut store, &mut rng), cfg);
    (store, l)
}

fn small_cfg(c: usize, g: usize) -> ProjectionConfig {
    ProjectionConfig {
        channels: c,
        reduced: 4.min(c),
        grid: g,
        temb_dim: 6,
        temb_reduced: 3,
        hidden: 5,
        refine_blocks: 2,
    }
}

fn ctx(views: Vec<CameraView>, n_samples: usize, background: bool) -> FrameContext<f64> {
    let n = views.len();
    FrameContext {
        views,
        temb: rnd(&[n, 6], 99),
        skip: None,
        render: RenderOptions {
            n_samples,
            background,
            stratified: false,
        },
        seed: 0,
    }
}

#[test]
fn compress_identity_and_matrix_oracle() {
    let (mut store, l) = layer(small_cfg(4, 2), 1);
    let x = rnd(&[2, 4, 2, 2], 2);
    let w = l.compress.weight;
    *store.value_mut(w) = Tensor::from_fn(&[4, 4, 1, 1, 1], |k| if k / 4 == k % 4 { 1.0 } else { 0.0 });
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    assert_eq!(l.compress.forward(&bx, &tape.constant(x.clone())).value(), &x);

    let zero = l.compress.forward(&bx, &tape.constant(Tensor::zeros(&[1, 4, 2, 2])));
    assert!(zero.value().data().iter().all(|v| *v == 0.0));

    *store.value_mut(w) = rnd(&[4, 4, 1, 1, 1], 3);
    let bx = Binder::new(&tape, &store);
    let out = l.compress.forward(&bx, &tape.constant(x.clone()));
    let k = store.value(w).data();
    for n in 0..2 {
        for o in 0..4 {
            for p in 0..4 {
                let want: f64 = (0..4).map(|i| k[o * 4 + i] * x.data()[(n * 4 + i) * 4 + p]).sum();
                assert!((out.value().data()[(n * 4 + o) * 4 + p] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn expand_zero_init_and_matrix_oracle() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ProjectionConfig::new(32, 2, 8);
    let l = ProjectionLayer::new(&mut Builder::new(&mut store, &mut rng), cfg);
    let tape = Tape::no_grad();
    let x = Tensor::randn(&[2, 16, 2, 2], 1.0, &mut rng);
    let bx = Binder::new(&tape, &store);
    let out = l.expand.forward(&bx, &tape.constant(x.clone()));
    assert_eq!(out.shape(), &[2, 32, 2, 2]);
    assert!(out.value().data().iter().all(|v| *v == 0.0));

    *store.value_mut(l.expand.weight) = Tensor::randn(&[32, 16, 1, 1, 1], 1.0, &mut rng);
    let bx = Binder::new(&tape, &store);
    let out = l.expand.forward(&bx, &tape.constant(x.clone()));
    let k = store.value(l.expand.weight).data();
    for o in [0, 7, 31] {
        for p in 0..4 {
            let want: f64 = (0..16).map(|i| k[o * 16 + i] * x.data()[(16 + i) * 4 + p]).sum();
            assert!((out.value().data()[(32 + o) * 4 + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn unproject_node_and_midpoint() {
    let view = CameraView::orbit(Vector3::new(0.4, 0.3, 2.0), 5.0, 4).unwrap();
    let feats = rnd(&[1, 3, 4, 4], 5);
    let node = unproject_pixel([2.5, 1.5], 1.8, &view).unwrap();
    let mid = unproject_pixel([2.0, 2.0], 1.7, &view).unwrap();
    let plan = plan_unprojection::<f64>(std::slice::from_ref(&view), &[node, mid], None).unwrap();
    assert_eq!(*plan.mask, vec![true, true]);
    let tape = Tape::no_grad();
    let out = to_tokens(&tape.constant(feats.clone())).gather_weighted(plan.idx.clone(), plan.weights.clone(), 4);
    let px = |c: usize, y: usize, x: usize| feats.data()[(c * 4 + y) * 4 + x];
    for c in 0..3 {
        assert!((out.value().data()[c] - px(c, 1, 2)).abs() < 1e-9);
        let avg = (px(c, 1, 1) + px(c, 1, 2) + px(c, 2, 1) + px(c, 2, 2)) / 4.0;
        assert!((out.value().data()[3 + c] - avg).abs() < 1e-9);
    }
}

fn hand_aggregator(c: usize) -> (ParamStore<f64>, Aggregator) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let agg = Aggregator::new(&mut Builder::new(&mut store, &mut rng), c, 1, 2);
    (store, agg)
}

#[test]
fn aggregate_single_view_and_identical_views() {
    let (store, agg) = hand_aggregator(3);
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    // voxel 0 seen by view 1 only, voxel 1 by both
    let feats = rnd(&[2, 2, 3], 7);
    let mask = Rc::new(vec![false, true, true, true]);
    let enc = tape.constant(rnd(&[4, 4], 8));
    let temb = tape.constant(rnd(&[2, 1], 9));
    let a = agg.forward(&bx, &tape.constant(feats.clone()), &mask, &enc, &temb);
    assert_eq!(a.weights.value().data()[2], 1.0);
    for c in 0..3 {
        assert!((a.weighted_mean.value().data()[c] - feats.data()[6 + c]).abs() < 1e-12);
        assert_eq!(a.variance.value().data()[c], 0.0);
    }

    let shared = rnd(&[1, 2, 3], 10);
    let same = Tensor::concat_outer(&[&shared, &shared]);
    let all = Rc::new(vec![true; 4]);
    let a = agg.forward(&bx, &tape.constant(same.clone()), &all, &enc, &temb);
    assert!(a.mean.value().max_abs_diff(&shared.clone().reshape(&[2, 3])) < 1e-12);
    assert!(a.variance.value().data().iter().all(|v| v.abs() < 1e-24));
    assert!(a.weighted_mean.value().max_abs_diff(&shared.clone().reshape(&[2, 3])) < 1e-12);

    // no valid view: zero output
    let none = Rc::new(vec![false, true, false, true]);
    let a = agg.forward(&bx, &tape.constant(feats), &none, &enc, &temb);
    assert!(a.grid.value().data()[..3].iter().all(|v| *v == 0.0));
}

#[test]
fn aggregate_hand_set_logits() {
    let (mut store, agg) = hand_aggregator(2);
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    // hidden unit 0 copies the timestep input (index c + 4 = 6)
    store.value_mut(agg.weight_mlp.layers[0].weight).data_mut()[6 * 2] = 1.0;
    store.value_mut(agg.weight_mlp.layers[1].weight).data_mut()[0] = 1.0;
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    let feats = Tensor::from_f64(&[2, 1, 2], &[1.0, -2.0, 5.0, 4.0]);
    let temb = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 3f64.ln()]));
    let enc = tape.constant(Tensor::zeros(&[2, 4]));
    let a = agg.forward(&bx, &tape.constant(feats), &Rc::new(vec![true, true]), &enc, &temb);
    let w = a.weights.value().data();
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
    let wm = a.weighted_mean.value().data();
    assert!((wm[0] - (0.25 * 1.0 + 0.75 * 5.0)).abs() < 1e-12);
    assert!((wm[1] - (0.25 * -2.0 + 0.75 * 4.0)).abs() < 1e-12);
    assert_eq!(a.mean.value().data(), &[3.0, 1.0]);
    assert_eq!(a.variance.value().data(), &[4.0, 9.0]);
}

#[test]
fn refine_identity_at_init_and_shapes() {
    for g in [4, 8, 16] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blk = ResBlock3d::new(&mut Builder::new(&mut store, &mut rng), 4, 3);
        let tape = Tape::no_grad();
        let bx = Binder::new(&tape, &store);
        let x = rnd(&[2, 4, g, g, g], 12);
        let out = blk.forward(&bx, &tape.constant(x.clone()), &tape.constant(rnd(&[1, 3], 13)));
        assert_eq!(out.value(), &x);
    }
}

#[test]
fn conv3d_impulse_matches_discrete_convolution() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let conv = Conv::new3d(&mut Builder::new(&mut store, &mut rng), 1, 1);
    let k = rnd(&[1, 1, 3, 3, 3], 15);
    *store.value_mut(conv.weight) = k.clone();
    let mut x = Tensor::zeros(&[1, 1, 3, 3, 3]);
    x.data_mut()[13] = 1.0;
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    let out = conv.forward(&bx, &tape.constant(x));
    // correlation with an impulse at the center reflects the kernel
    for p in 0..27 {
        assert!((out.value().data()[p] - k.data()[26 - p]).abs() < 1e-12);
    }
}

fn axis_view() -> CameraView {
    // single pixel whose ray runs along -z through the cube center
    CameraView::orbit(Vector3::new(0.0, 0.0, 2.0), 1.0, 1).unwrap()
}

fn constant_field<'t>(
    tape: &'t Tape<f64>,
    sigma: f64,
    c: Vec<f64>,
) -> impl Fn(&Var<'t, f64>) -> (Var<'t, f64>, Var<'t, f64>) {
    move |f: &Var<'t, f64>| {
        let k = f.shape()[0];
        (
            tape.constant(Tensor::full(&[k, 1], sigma)),
            tape.constant(Tensor::from_fn(&[k, c.len()], |i| c[i % c.len()])),
        )
    }
}

#[test]
fn render_empty_and_constant_segment() {
    let tape = Tape::no_grad();
    let table = tape.constant(rnd(&[8, 2], 16));
    let opts = RenderOptions {
        n_samples: 256,
        background: false,
        stratified: false,
    };
    let plan = plan_render::<f64, ChaCha8Rng>(&axis_view(), 2, &opts, None);
    let zero = render_with(&table, &plan, constant_field(&tape, 0.0, vec![0.3, 0.9]));
    assert_eq!(zero.value().data(), &[0.0, 0.0]);
    let opacity = compositing_weights(&vec![0.0; 256], &plan.deltas, 1, 256);
    assert!(opacity.iter().all(|w| *w == 0.0));

    let sigma = 1.7;
    let r = render_with(&table, &plan, constant_field(&tape, sigma, vec![0.3, 0.9]));
    let l = 1.0;
    for (got, c) in r.value().data().iter().zip([0.3, 0.9]) {
        let want = c * (1.0 - (-sigma * l).exp());
        assert!((got - want).abs() / want < 0.01);
    }
}

#[test]
fn saturated_first_sample_dominates() {
    let mut density = vec![0.3; 8];
    density[0] = 1e6;
    let w: Vec<f64> = compositing_weights(&density, &[0.1; 8], 1, 8);
    assert!((w[0] - 1.0).abs() < 1e-12);
    assert!(w[1..].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn constant_feature_stays_in_hull() {
    let tape = Tape::no_grad();
    let table = tape.constant(rnd(&[128, 2], 17));
    let opts = RenderOptions {
        n_samples: 16,
        background: true,
        stratified: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let view = CameraView::orbit(Vector3::new(1.0, 0.7, 1.5), 6.0, 5).unwrap();
    let plan = plan_render::<f64, _>(&view, 4, &opts, Some(&mut rng));
    let c = [0.4, -0.8];
    let r = render_with(&table, &plan, constant_field(&tape, 2.5, c.to_vec()));
    for px in r.value().data().chunks(2) {
        for (v, ci) in px.iter().zip(c) {
            assert!(v * ci >= 0.0 && v.abs() <= ci.abs() + 1e-12);
        }
    }
}

#[test]
fn impulse_appears_at_projected_pixel() {
    let g = 8;
    let voxel = voxel_index(g, 5, 2, 3);
    let center = foreground_centers(g)[voxel];
    let mut grid = vec![0.0; g * g * g];
    grid[voxel] = 1.0;
    let tape = Tape::no_grad();
    let table = tape.constant(Tensor::new(&[g * g * g, 1], grid));
    let opts = RenderOptions {
        n_samples: 64,
        background: false,
        stratified: false,
    };
    for view in ring_views(2, 16) {
        let plan = plan_render::<f64, ChaCha8Rng>(&view, g, &opts, None);
        let r = render_with(&table, &plan, |f| (f.scale(50.0), f.clone()));
        let data = r.value().data();
        let best = (0..data.len()).max_by(|&a, &b| data[a].total_cmp(&data[b])).unwrap();
        let (bx, by) = ((best % 16) as f64 + 0.5, (best / 16) as f64 + 0.5);
        let p = project(&center, &view).pixel;
        assert!((bx - p[0]).abs() <= 1.0 && (by - p[1]).abs() <= 1.0, "{best} vs {p:?}");
    }
}

#[test]
fn scale_net_zero_and_hand_set() {
    let (mut store, l) = layer(small_cfg(4, 2), 19);
    let tape = Tape::no_grad();
    let x = rnd(&[1, 4, 1, 1], 20);
    for id in [l.scale1.weight, l.scale2.weight] {
        *store.value_mut(id) = Tensor::zeros(&[4, 4, 1, 1, 1]);
    }
    let run = |store: &ParamStore<f64>| {
        let bx = Binder::new(&tape, store);
        let h = l.scale1.forward(&bx, &tape.constant(x.clone())).relu();
        l.scale2.forward(&bx, &h).value().clone()
    };
    assert!(run(&store).data().iter().all(|v| *v == 0.0));
    let k1 = rnd(&[4, 4, 1, 1, 1], 21);
    let k2 = rnd(&[4, 4, 1, 1, 1], 22);
    *store.value_mut(l.scale1.weight) = k1.clone();
    *store.value_mut(l.scale2.weight) = k2.clone();
    let out = run(&store);
    assert_eq!(out.shape(), &[1, 4, 1, 1]);
    let hidden: Vec<f64> = (0..4)
        .map(|o| (0..4).map(|i| k1.data()[o * 4 + i] * x.data()[i]).sum::<f64>().max(0.0))
        .collect();
    for o in 0..4 {
        let want: f64 = (0..4).map(|i| k2.data()[o * 4 + i] * hidden[i]).sum();
        assert!((out.data()[o] - want).abs() < 1e-12);
    }
}

#[test]
fn skipped_frame_is_never_read() {
    let (store, l) = layer(small_cfg(4, 4), 23);
    let views = ring_views(3, 4);
    let mut c = ctx(views, 4, true);
    c.skip = Some(2);
    let x = rnd(&[3, 4, 4, 4], 24);
    let mut y = x.clone();
    for v in &mut y.data_mut()[2 * 64..] {
        *v += 10.0;
    }
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    let a = l.grid(&bx, &tape.constant(x), &c).unwrap();
    let b = l.grid(&bx, &tape.constant(y), &c).unwrap();
    assert_eq!(a, b);
}

#[test]
fn layer_is_residual_identity_at_init() {
    let (store, l) = layer(small_cfg(4, 4), 25);
    let c = ctx(ring_views(2, 4), 4, true);
    let x = rnd(&[2, 4, 4, 4], 26);
    let tape = Tape::no_grad();
    let bx = Binder::new(&tape, &store);
    let out = l.forward(&bx, &tape.constant(x.clone()), &c, 0).unwrap();
    assert_eq!(out.value(), &x);
    let grid = l.grid(&bx, &tape.constant(x), &c).unwrap();
    assert_eq!(grid.resolution(), 4);
    assert_eq!(grid.to_table().shape(), &[128, 4]);
    assert!(grid.foreground.all_finite());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let (mut store, l) = layer(small_cfg(3, 4), 27);
    let l = &l;
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for v in store.values_mut() {
        *v = Tensor::randn(v.shape(), 0.4, &mut rng);
    }
    let c = ctx(ring_views(2, 2), 4, true);
    let x = rnd(&[2, 3, 2, 2], 29);
    let report = check_gradients_with(&[x], 1e-6, store, |tape, store, v| {
        let bx = Binder::new(tape, store);
        l.forward(&bx, &v[0], &c, 0).unwrap()
    });
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.max_grad > 0.0);
}
