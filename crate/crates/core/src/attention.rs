//! Cross-frame attention and caption cross-attention with condition vectors
//! injected through low-rank adapters.
//!
//! Every projection is `W·h + s·W′·[h; z]` where `W′ = B·A` has rank `r`
//! and `B` starts at zero, so a freshly added adapter leaves the base
//! projection unchanged.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::conditioning::CONDITION_DIM;
use crate::nn::{Binder, Builder, Linear, ParamKind};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionedProjection {
    pub base: Linear,
    pub lora_down: Linear,
    pub lora_up: Linear,
    pub scale: f64,
}

impl ConditionedProjection {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        d_in: usize,
        d_out: usize,
        rank: usize,
    ) -> Self {
        let base = Linear::no_bias(&mut b.scope("base"), d_in, d_out);
        let mut lora = b.scope("lora").with_kind(ParamKind::Lora);
        let lora_down = Linear::no_bias(&mut lora.scope("down"), d_in + CONDITION_DIM, rank);
        let lora_up = Linear::zero_init(&mut lora.scope("up"), rank, d_out, false);
        Self {
            base,
            lora_down,
            lora_up,
            scale: 1.0,
        }
    }

    /// `h·W + s·([h, z]·A·B)` per token; `h` is `[M, d_in]`, `z` is `[M, 10]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        h: &Var<'t, T>,
        z: &Var<'t, T>,
    ) -> Var<'t, T> {
        conditioned_projection(bx, self, h, z, self.scale)
    }
}

/// [`ConditionedProjection::forward`] with an explicit adapter scale `s`.
pub fn conditioned_projection<'t, T: Scalar>(
    bx: &Binder<'t, T>,
    proj: &ConditionedProjection,
    h: &Var<'t, T>,
    z: &Var<'t, T>,
    s: f64,
) -> Var<'t, T> {
    let base = proj.base.forward(bx, h);
    if s == 0.0 {
        return base;
    }
    let hz = Var::concat(&[h.clone(), z.clone()], 1);
    let delta = proj
        .lora_up
        .forward(bx, &proj.lora_down.forward(bx, &hz));
    base.add(&delta.scale(T::from_f64_lossy(s)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub query: ConditionedProjection,
    pub key: ConditionedProjection,
    pub value: ConditionedProjection,
    pub out: Linear,
    pub d_att: usize,
}

impl AttentionWeights {
    /// Queries read `d_q`-wide tokens, keys/values `d_kv`-wide tokens.
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        d_q: usize,
        d_kv: usize,
        d_att: usize,
        rank: usize,
    ) -> Self {
        Self {
            query: ConditionedProjection::new(&mut b.scope("q"), d_q, d_att, rank),
            key: ConditionedProjection::new(&mut b.scope("k"), d_kv, d_att, rank),
            value: ConditionedProjection::new(&mut b.scope("v"), d_kv, d_att, rank),
            out: Linear::no_bias(&mut b.scope("out"), d_att, d_q),
            d_att,
        }
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::from_usize(self.d_att).unwrap().sqrt()
    }
}

/// `[N, C, H, W]` → `[N·H·W, C]`.
pub fn to_tokens<'t, T: Scalar>(h: &Var<'t, T>) -> Var<'t, T> {
    let s = h.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    h.reshape(&[n, c, sp]).permute(&[0, 2, 1]).reshape(&[n * sp, c])
}

/// Inverse of [`to_tokens`] for the given frame shape.
pub fn from_tokens<'t, T: Scalar>(tokens: &Var<'t, T>, shape: &[usize]) -> Var<'t, T> {
    let (n, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    tokens.reshape(&[n, sp, c]).permute(&[0, 2, 1]).reshape(shape)
}

/// Repeats each frame's condition row for its `per_frame` tokens.
fn expand_conditions<'t, T: Scalar>(z: &Var<'t, T>, per_frame: usize) -> Var<'t, T> {
    let n = z.shape()[0];
    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, per_frame)).collect();
    z.gather_rows(Rc::new(idx))
}

/// Attention update without the residual: for each frame `i`, queries from
/// frame `i` attend over the tokens of every other frame (all frames'
/// own tokens when `N = 1`).
pub fn cross_frame_attention_delta<'t, T: Scalar>(
    bx: &Binder<'t, T>,
    h: &Var<'t, T>,
    z: &Var<'t, T>,
    w: &AttentionWeights,
) -> Var<'t, T> {
    let shape = h.shape().to_vec();
    let n = shape[0];
    let sp: usize = shape[2..].iter().product();
    assert_eq!(z.shape(), &[n, CONDITION_DIM], "one condition per frame");
    let tokens = to_tokens(h);
    let zt = expand_conditions(z, sp);
    let q = w.query.forward(bx, &tokens, &zt);
    let k = w.key.forward(bx, &tokens, &zt);
    let v = w.value.forward(bx, &tokens, &zt);
    let scale = w.scale::<T>();
    let outs: Vec<Var<'t, T>> = (0..n)
        .map(|i| {
            let qi = q.narrow(0, i * sp, sp);
            if n == 1 {
                return Var::attention(&qi, &k, &v, scale);
            }
            // other frames in ascending order
            let idx: Rc<Vec<usize>> = Rc::new(
                (0..n)
                    .filter(|&j| j != i)
                    .flat_map(|j| j * sp..(j + 1) * sp)
                    .collect(),
            );
            let ki = k.gather_rows(Rc::clone(&idx));
            let vi = v.gather_rows(idx);
            Var::attention(&qi, &ki, &vi, scale)
        })
        .collect();
    let o = w.out.forward(bx, &Var::concat(&outs, 0));
    from_tokens(&o, &shape)
}

/// Cross-frame attention with the residual connection on its input.
pub fn cross_frame_attention<'t, T: Scalar>(
    bx: &Binder<'t, T>,
    h: &Var<'t, T>,
    z: &Var<'t, T>,
    w: &AttentionWeights,
) -> Var<'t, T> {
    h.add(&cross_frame_attention_delta(bx, h, z, w))
}

/// Caption cross-attention update without the residual. `caption` holds
/// `[L, d_txt]` token embeddings; `None` (the empty caption) yields `None`.
pub fn caption_attention_delta<'t, T: Scalar>(
    bx: &Binder<'t, T>,
    h: &Var<'t, T>,
    z: &Var<'t, T>,
    caption: Option<&Var<'t, T>>,
    w: &AttentionWeights,
) -> Option<Var<'t, T>> {
    let caption = caption.filter(|c| c.shape()[0] > 0)?;
    let shape = h.shape().to_vec();
    let n = shape[0];
    let sp: usize = shape[2..].iter().product();
    let len = caption.shape()[0];
    let tokens = to_tokens(h);
    let q = w.query.forward(bx, &tokens, &expand_conditions(z, sp));
    let scale = w.scale::<T>();
    let outs: Vec<Var<'t, T>> = (0..n)
        .map(|i| {
            let zi = z.gather_rows(Rc::new(vec![i; len]));
            let k = w.key.forward(bx, caption, &zi);
            let v = w.value.forward(bx, caption, &zi);
            Var::attention(&q.narrow(0, i * sp, sp), &k, &v, scale)
        })
        .collect();
    let o = w.out.forward(bx, &Var::concat(&outs, 0));
    Some(from_tokens(&o, &shape))
}

/// Caption cross-attention with residual; identity for an empty caption.
pub fn caption_cross_attention<'t, T: Scalar>(
    bx: &Binder<'t, T>,
    h: &Var<'t, T>,
    z: &Var<'t, T>,
    caption: Option<&Var<'t, T>>,
    w: &AttentionWeights,
) -> Var<'t, T> {
    match caption_attention_delta(bx, h, z, caption, w) {
        Some(d) => h.add(&d),
        None => h.clone(),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::evaluation::gradcheck::check_gradients;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.values_mut() {
            *v = Tensor::randn(v.shape(), 0.5, &mut rng);
        }
    }

    fn setup(c: usize, d_kv: usize, seed: u64) -> (ParamStore<f64>, AttentionWeights) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = AttentionWeights::new(&mut Builder::new(&mut store, &mut rng), c, d_kv, 3, 2);
        randomize(&mut store, seed + 100);
        (store, w)
    }

    fn mat(store: &ParamStore<f64>, l: &Linear) -> (usize, usize, Vec<f64>) {
        (l.d_in, l.d_out, store.value(l.weight).data().to_vec())
    }

    /// Dense reference `x·W` for a row vector.
    fn apply(m: &(usize, usize, Vec<f64>), x: &[f64]) -> Vec<f64> {
        (0..m.1)
            .map(|o| (0..m.0).map(|i| x[i] * m.2[i * m.1 + o]).sum())
            .collect()
    }

    fn proj_oracle(store: &ParamStore<f64>, p: &ConditionedProjection, h: &[f64], z: &[f64]) -> Vec<f64> {
        let base = apply(&mat(store, &p.base), h);
        let hz: Vec<f64> = h.iter().chain(z).copied().collect();
        let lo = apply(&mat(store, &p.lora_up), &apply(&mat(store, &p.lora_down), &hz));
        base.iter().zip(lo).map(|(a, b)| a + p.scale * b).collect()
    }

    fn softmax_attend(q: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>]) -> Vec<f64> {
        let d = q.len() as f64;
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; vals[0].len()];
        for (w, v) in e.iter().zip(vals) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w / z * x;
            }
        }
        out
    }

    #[test]
    fn projection_switch_off_and_zero_adapter() {
        let (mut store, w) = setup(4, 4, 1);
        let tape = Tape::no_grad();
        let h = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let z = tape.constant(Tensor::randn(&[5, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let plain = {
            let bx = Binder::new(&tape, &store);
            let base = w.query.base.forward(&bx, &h).value().clone();
            let off = conditioned_projection(&bx, &w.query, &h, &z, 0.0).value().clone();
            assert_eq!(off, base);
            let on = conditioned_projection(&bx, &w.query, &h, &z, 1.0).value().clone();
            assert!(on.max_abs_diff(&base) > 1e-3);
            base
        };
        *store.value_mut(w.query.lora_up.weight) = Tensor::zeros(&[2, 3]);
        let bx = Binder::new(&tape, &store);
        let out = w.query.forward(&bx, &h, &z).value().clone();
        assert!(out.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let (store, w) = setup(4, 4, 4);
        let tape = Tape::no_grad();
        let h = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let z = Tensor::randn(&[3, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let bx = Binder::new(&tape, &store);
        let out = w.key.forward(&bx, &tape.constant(h.clone()), &tape.constant(z.clone()));
        for m in 0..3 {
            let want = proj_oracle(&store, &w.key, &h.data()[m * 4..m * 4 + 4], &z.data()[m * 10..m * 10 + 10]);
            for (o, wv) in want.iter().enumerate() {
                assert!((out.value().data()[m * 3 + o] - wv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        // N=2 with one spatial token per frame
        let (store, w) = setup(4, 4, 7);
        let tape = Tape::no_grad();
        let h = Tensor::randn(&[2, 4, 1, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let z = Tensor::randn(&[2, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let bx = Binder::new(&tape, &store);
        let out = cross_frame_attention(&bx, &tape.constant(h.clone()), &tape.constant(z.clone()), &w);
        for i in 0..2 {
            let j = 1 - i;
            let vj = proj_oracle(&store, &w.value, &h.data()[j * 4..j * 4 + 4], &z.data()[j * 10..j * 10 + 10]);
            let o = apply(&mat(&store, &w.out), &vj);
            for c in 0..4 {
                let want = o[c] + h.data()[i * 4 + c];
                assert!((out.value().data()[i * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_frame_matches_dense_oracle() {
        let (n, c, hh, ww) = (3, 4, 2, 2);
        let sp = hh * ww;
        let (store, w) = setup(c, c, 10);
        let h = Tensor::randn(&[n, c, hh, ww], 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let z = Tensor::randn(&[n, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let tape = Tape::no_grad();
        let bx = Binder::new(&tape, &store);
        let out = cross_frame_attention(&bx, &tape.constant(h.clone()), &tape.constant(z.clone()), &w);
        let token = |f: usize, s: usize| -> Vec<f64> { (0..c).map(|ch| h.data()[(f * c + ch) * sp + s]).collect() };
        let zf = |f: usize| z.data()[f * 10..f * 10 + 10].to_vec();
        for i in 0..n {
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for j in (0..n).filter(|&j| j != i) {
                for s in 0..sp {
                    keys.push(proj_oracle(&store, &w.key, &token(j, s), &zf(j)));
                    vals.push(proj_oracle(&store, &w.value, &token(j, s), &zf(j)));
                }
            }
            for s in 0..sp {
                let q = proj_oracle(&store, &w.query, &token(i, s), &zf(i));
                let o = apply(&mat(&store, &w.out), &softmax_attend(&q, &keys, &vals));
                for ch in 0..c {
                    let got = out.value().data()[(i * c + ch) * sp + s];
                    let want = o[ch] + token(i, s)[ch];
                    assert!((got - want).abs() < 1e-5, "frame {i} token {s}");
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance_and_identical_frames() {
        let (n, c) = (4, 4);
        let (mut store, w) = setup(c, c, 13);
        let h = Tensor::randn(&[n, c, 2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let z = Tensor::randn(&[n, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            let items: Vec<Tensor<f64>> = perm.iter().map(|&p| t.slice_outer(p, 1)).collect();
            let refs: Vec<&Tensor<f64>> = items.iter().collect();
            Tensor::concat_outer(&refs)
        };
        let tape = Tape::no_grad();
        let run = |store: &ParamStore<f64>, h: &Tensor<f64>, z: &Tensor<f64>| {
            let bx = Binder::new(&tape, store);
            cross_frame_attention(&bx, &tape.constant(h.clone()), &tape.constant(z.clone()), &w)
                .value()
                .clone()
        };
        let a = permute(&run(&store, &h, &z));
        let b = run(&store, &permute(&h), &permute(&z));
        assert!(a.max_abs_diff(&b) < 1e-6);

        // zero adapters and identical frames give identical outputs
        for p in [&w.query, &w.key, &w.value] {
            let shape = store.value(p.lora_up.weight).shape().to_vec();
            *store.value_mut(p.lora_up.weight) = Tensor::zeros(&shape);
        }
        let frame = h.slice_outer(0, 1);
        let same = Tensor::concat_outer(&[&frame, &frame, &frame, &frame]);
        let out = run(&store, &same, &z);
        for i in 1..n {
            assert!(out.slice_outer(i, 1).max_abs_diff(&out.slice_outer(0, 1)) < 1e-12);
        }
    }

    #[test]
    fn caption_attention_cases() {
        let (c, dt) = (4, 5);
        let (store, w) = setup(c, dt, 16);
        let tape = Tape::no_grad();
        let bx = Binder::new(&tape, &store);
        let h = Tensor::randn(&[2, c, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(17));
        let z = Tensor::randn(&[2, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(18));
        let hv = tape.constant(h.clone());
        let zv = tape.constant(z.clone());
        // empty caption is the identity
        let empty = tape.constant(Tensor::zeros(&[0, dt]));
        assert_eq!(caption_cross_attention(&bx, &hv, &zv, Some(&empty), &w).value(), &h);
        assert_eq!(caption_cross_attention(&bx, &hv, &zv, None, &w).value(), &h);

        let cap = Tensor::randn(&[3, dt], 1.0, &mut ChaCha8Rng::seed_from_u64(19));
        let out = caption_cross_attention(&bx, &hv, &zv, Some(&tape.constant(cap.clone())), &w);
        for i in 0..2 {
            let zi = z.data()[i * 10..i * 10 + 10].to_vec();
            let keys: Vec<Vec<f64>> = (0..3).map(|l| proj_oracle(&store, &w.key, &cap.data()[l * dt..(l + 1) * dt], &zi)).collect();
            let vals: Vec<Vec<f64>> = (0..3).map(|l| proj_oracle(&store, &w.value, &cap.data()[l * dt..(l + 1) * dt], &zi)).collect();
            for s in 0..4 {
                let tok: Vec<f64> = (0..c).map(|ch| h.data()[(i * c + ch) * 4 + s]).collect();
                let q = proj_oracle(&store, &w.query, &tok, &zi);
                let o = apply(&mat(&store, &w.out), &softmax_attend(&q, &keys, &vals));
                for ch in 0..c {
                    let got = out.value().data()[(i * c + ch) * 4 + s];
                    assert!((got - (o[ch] + tok[ch])).abs() < 1e-5);
                }
            }
        }

        // a single caption token receives weight 1
        let one = Tensor::randn(&[1, dt], 1.0, &mut ChaCha8Rng::seed_from_u64(20));
        let out = caption_cross_attention(&bx, &hv, &zv, Some(&tape.constant(one.clone())), &w);
        let zi = z.data()[0..10].to_vec();
        let v = proj_oracle(&store, &w.value, one.data(), &zi);
        let o = apply(&mat(&store, &w.out), &v);
        for s in 0..4 {
            for ch in 0..c {
                let got = out.value().data()[ch * 4 + s] - h.data()[ch * 4 + s];
                assert!((got - o[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (frame, caption) = {
            let mut b = Builder::new(&mut store, &mut rng);
            (
                AttentionWeights::new(&mut b.scope("frame"), 3, 3, 3, 2),
                AttentionWeights::new(&mut b.scope("caption"), 3, 4, 3, 2),
            )
        };
        randomize(&mut store, 25);
        let mut inputs: Vec<Tensor<f64>> = store.values().to_vec();
        let np = inputs.len();
        inputs.push(Tensor::randn(&[3, 3, 2, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(22)));
        inputs.push(Tensor::randn(&[3, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(23)));
        inputs.push(Tensor::randn(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(24)));
        let report = check_gradients(&inputs, 1e-6, |tape, v| {
            let bx = Binder::with_vars(tape, &store, &v[..np]);
            let h = cross_frame_attention(&bx, &v[np], &v[np + 1], &frame);
            caption_cross_attention(&bx, &h, &v[np + 1], Some(&v[np + 2]), &caption)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
