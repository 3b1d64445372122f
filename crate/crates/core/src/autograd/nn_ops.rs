//! Fused network operations with hand-derived backward passes.

use std::rc::Rc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Spatial layout of a convolution over `[D, H, W]` volumes. Planar
/// convolutions use `D = 1` with a depth-1 kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            let span = self.input[a] + 2 * self.pad[a];
            assert!(span >= self.kernel[a], "kernel larger than padded input");
            o[a] = (span - self.kernel[a]) / self.stride + 1;
        }
        o
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == [0, 0, 0]
    }

    /// Unfolds one `[C, D, H, W]` volume to `[C·kd·kh·kw, Do·Ho·Wo]`.
    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, col: &mut [T]) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output();
        let [kd, kh, kw] = self.kernel;
        let n_out = od * oh * ow;
        let s = self.stride as isize;
        let [pd, ph, pw] = self.pad.map(|p| p as isize);
        let mut row = 0;
        for c in 0..channels {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut col[row * n_out..(row + 1) * n_out];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = z as isize * s + a as isize - pd;
                            for y in 0..oh {
                                let iy = y as isize * s + b as isize - ph;
                                let z_ok = iz >= 0 && iz < d as isize;
                                let y_ok = iy >= 0 && iy < h as isize;
                                for xo in 0..ow {
                                    let ix = xo as isize * s + e as isize - pw;
                                    dst[o] = if z_ok && y_ok && ix >= 0 && ix < w as isize {
                                        xc[(iz as usize * h + iy as usize) * w + ix as usize]
                                    } else {
                                        T::zero()
                                    };
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating.
    fn col2im<T: Scalar>(&self, col: &[T], channels: usize, x: &mut [T]) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output();
        let [kd, kh, kw] = self.kernel;
        let n_out = od * oh * ow;
        let s = self.stride as isize;
        let [pd, ph, pw] = self.pad.map(|p| p as isize);
        let mut row = 0;
        for c in 0..channels {
            let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &col[row * n_out..(row + 1) * n_out];
                        let mut o = 0;
                        for z in 0..od {
                            let iz = z as isize * s + a as isize - pd;
                            for y in 0..oh {
                                let iy = y as isize * s + b as isize - ph;
                                let zy_ok =
                                    iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize;
                                for xo in 0..ow {
                                    let ix = xo as isize * s + e as isize - pw;
                                    if zy_ok && ix >= 0 && ix < w as isize {
                                        xc[(iz as usize * h + iy as usize) * w + ix as usize] +=
                                            src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Convolution of `[B, Cin, D·H·W]`-shaped input (any trailing layout
    /// with that element count) with weights `[Cout, Cin, kd, kh, kw]`.
    /// Output has shape `[B, Cout, Do, Ho, Wo]` squeezed to the rank of the
    /// input (planar inputs `[B, C, H, W]` give `[B, Cout, Ho, Wo]`).
    pub fn conv(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        geom: ConvGeometry,
    ) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (batch, cin) = (x.dim(0), x.dim(1));
        let spatial_in: usize = geom.input.iter().product();
        assert_eq!(x.len(), batch * cin * spatial_in, "conv input layout mismatch");
        let cout = w.dim(0);
        let klen = cin * geom.kernel_len();
        assert_eq!(w.len(), cout * klen, "conv weight shape mismatch");
        let out_sp = geom.output();
        let n_out: usize = out_sp.iter().product();
        let pointwise = geom.is_pointwise();

        let mut out = vec![T::zero(); batch * cout * n_out];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); klen * n_out] };
        for b in 0..batch {
            let xb = &x.data()[b * cin * spatial_in..(b + 1) * cin * spatial_in];
            let rhs: &[T] = if pointwise {
                xb
            } else {
                geom.im2col(xb, cin, &mut col);
                &col
            };
            let ob = &mut out[b * cout * n_out..(b + 1) * cout * n_out];
            gemm(cout, klen, n_out, w.data(), false, rhs, false, ob, false);
            if let Some(bias) = bias {
                for (co, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut ob[co * n_out..(co + 1) * n_out] {
                        *v += bv;
                    }
                }
            }
        }
        let shape: Vec<usize> = if x.rank() == 4 {
            assert_eq!(geom.input[0], 1, "rank-4 conv input must be planar");
            vec![batch, cout, out_sp[1], out_sp[2]]
        } else {
            vec![batch, cout, out_sp[0], out_sp[1], out_sp[2]]
        };
        let value = Tensor::new(&shape, out);
        let (xr, wr) = (self.rc(), weight.rc());
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.tape.record(&inputs, value, move |g, needs| {
            let gd = g.data();
            let mut dw = needs[1].then(|| vec![T::zero(); cout * klen]);
            let mut dx = needs[0].then(|| vec![T::zero(); batch * cin * spatial_in]);
            let mut col = vec![T::zero(); if pointwise { 0 } else { klen * n_out }];
            let mut dcol = vec![T::zero(); klen * n_out];
            for b in 0..batch {
                let gb = &gd[b * cout * n_out..(b + 1) * cout * n_out];
                let xb = &xr.data()[b * cin * spatial_in..(b + 1) * cin * spatial_in];
                if let Some(dw) = dw.as_mut() {
                    let rhs: &[T] = if pointwise {
                        xb
                    } else {
                        geom.im2col(xb, cin, &mut col);
                        &col
                    };
                    gemm(cout, n_out, klen, gb, false, rhs, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * cin * spatial_in..(b + 1) * cin * spatial_in];
                    if pointwise {
                        gemm(klen, cout, n_out, wr.data(), true, gb, false, dxb, true);
                    } else {
                        gemm(klen, cout, n_out, wr.data(), true, gb, false, &mut dcol, false);
                        geom.col2im(&dcol, cin, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(&x_shape, d)),
                dw.map(|d| Tensor::new(&w_shape, d)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for b in 0..batch {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let base = (b * cout + co) * n_out;
                            *acc += gd[base..base + n_out].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(&[cout], db)
                }));
            }
            grads
        })
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: f64,
    ) -> Var<'t, T> {
        let x = self.value();
        let (batch, channels) = (x.dim(0), x.dim(1));
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        let spatial = x.len() / (batch * channels);
        let cg = channels / groups;
        let group_len = cg * spatial;
        let n = T::from_usize(group_len).unwrap();
        let eps = T::from_f64_lossy(eps);
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for g in 0..groups {
                let base = (b * channels + g * cg) * spatial;
                let seg = &x.data()[base..base + group_len];
                let mean = seg.iter().copied().sum::<T>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[b * groups + g] = r;
                for (i, &v) in seg.iter().enumerate() {
                    let c = g * cg + i / spatial;
                    let xh = (v - mean) * r;
                    xhat[base + i] = xh;
                    out[base + i] = xh * gm[c] + bt[c];
                }
            }
        }
        let value = Tensor::new(x.shape(), out);
        let gr = gamma.rc();
        let shape = x.shape().to_vec();
        self.tape.record(&[self, gamma, beta], value, move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            let mut dx = vec![T::zero(); gd.len()];
            let gmv = gr.data();
            for b in 0..batch {
                for grp in 0..groups {
                    let base = (b * channels + grp * cg) * spatial;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in 0..group_len {
                        let c = grp * cg + i / spatial;
                        let gv = gd[base + i];
                        let xh = xhat[base + i];
                        dgamma[c] += gv * xh;
                        dbeta[c] += gv;
                        let dxh = gv * gmv[c];
                        sum_d += dxh;
                        sum_dx += dxh * xh;
                    }
                    let r = rstd[b * groups + grp];
                    let (md, mdx) = (sum_d / n, sum_dx / n);
                    for i in 0..group_len {
                        let c = grp * cg + i / spatial;
                        let dxh = gd[base + i] * gmv[c];
                        dx[base + i] = r * (dxh - md - xhat[base + i] * mdx);
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&shape, dx)),
                needs[1].then(|| Tensor::new(&[channels], dgamma)),
                needs[2].then(|| Tensor::new(&[channels], dbeta)),
            ]
        })
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 4);
        let (bc, h, w) = (x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
        let mut out = vec![T::zero(); bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xo] = x.data()[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::new(&[x.dim(0), x.dim(1), 2 * h, 2 * w], out);
        let shape = x.shape().to_vec();
        self.tape.record(&[self], value, move |g, _| {
            let mut d = Tensor::zeros(&shape);
            let dd = d.data_mut();
            for p in 0..bc {
                for y in 0..2 * h {
                    for xo in 0..2 * w {
                        dd[(p * h + y / 2) * w + xo / 2] += g.data()[(p * 2 * h + y) * 2 * w + xo];
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Scaled dot-product attention `softmax(q·kᵀ·scale)·v` for one head:
    /// q `[Lq, d]`, k `[Lk, d]`, v `[Lk, dv]`.
    pub fn attention(q: &Var<'t, T>, k: &Var<'t, T>, v: &Var<'t, T>, scale: T) -> Var<'t, T> {
        let (lq, d) = (q.value().dim(0), q.value().dim(1));
        let lk = k.value().dim(0);
        assert_eq!(k.value().dim(1), d, "attention key width");
        assert_eq!(v.value().dim(0), lk, "attention value count");
        let dv = v.value().dim(1);
        let mut p = vec![T::zero(); lq * lk];
        gemm(lq, d, lk, q.value().data(), false, k.value().data(), true, &mut p, false);
        for row in p.chunks_mut(lk) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - m).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
        }
        let mut out = vec![T::zero(); lq * dv];
        gemm(lq, lk, dv, &p, false, v.value().data(), false, &mut out, false);
        let value = Tensor::new(&[lq, dv], out);
        let (qr, kr, vr) = (q.rc(), k.rc(), v.rc());
        q.tape.record(&[q, k, v], value, move |g, needs| {
            let gd = g.data();
            let dv_grad = needs[2].then(|| {
                let mut dvv = vec![T::zero(); lk * dv];
                gemm(lk, lq, dv, &p, true, gd, false, &mut dvv, false);
                Tensor::new(&[lk, dv], dvv)
            });
            let mut ds = vec![T::zero(); lq * lk];
            if needs[0] || needs[1] {
                gemm(lq, dv, lk, gd, false, vr.data(), true, &mut ds, false);
                for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dsv, &pv) in drow.iter_mut().zip(prow) {
                        *dsv = pv * (*dsv - dot) * scale;
                    }
                }
            }
            let dq = needs[0].then(|| {
                let mut dq = vec![T::zero(); lq * d];
                gemm(lq, lk, d, &ds, false, kr.data(), false, &mut dq, false);
                Tensor::new(&[lq, d], dq)
            });
            let dk = needs[1].then(|| {
                let mut dk = vec![T::zero(); lk * d];
                gemm(lk, lq, d, &ds, true, qr.data(), false, &mut dk, false);
                Tensor::new(&[lk, d], dk)
            });
            vec![dq, dk, dv_grad]
        })
    }

    /// Front-to-back alpha compositing. `density` is `[R, S]`, `features`
    /// `[R, S, C]`, `deltas` holds the `R·S` segment lengths. Returns
    /// `Σ_k T_k (1 − exp(−d_k δ_k)) s_k` per ray, shape `[R, C]`.
    pub fn composite(
        density: &Var<'t, T>,
        features: &Var<'t, T>,
        deltas: Rc<Vec<T>>,
    ) -> Var<'t, T> {
        let (rays, samples) = (density.value().dim(0), density.value().dim(1));
        let fshape = features.shape();
        assert_eq!(&fshape[..2], &[rays, samples], "composite feature layout");
        let ch = fshape[2];
        assert_eq!(deltas.len(), rays * samples);
        let weights = compositing_weights(density.value().data(), &deltas, rays, samples);
        let fd = features.value().data();
        let mut out = vec![T::zero(); rays * ch];
        for r in 0..rays {
            for s in 0..samples {
                let w = weights[r * samples + s];
                let f = &fd[(r * samples + s) * ch..(r * samples + s + 1) * ch];
                for (o, &fv) in out[r * ch..(r + 1) * ch].iter_mut().zip(f) {
                    *o += w * fv;
                }
            }
        }
        let value = Tensor::new(&[rays, ch], out);
        let (dr, fr) = (density.rc(), features.rc());
        density
            .tape
            .record(&[density, features], value, move |g, needs| {
                let gd = g.data();
                let fd = fr.data();
                let dd = dr.data();
                let dfeat = needs[1].then(|| {
                    let mut d = vec![T::zero(); rays * samples * ch];
                    for r in 0..rays {
                        for s in 0..samples {
                            let w = weights[r * samples + s];
                            let base = (r * samples + s) * ch;
                            for c in 0..ch {
                                d[base + c] = w * gd[r * ch + c];
                            }
                        }
                    }
                    Tensor::new(&[rays, samples, ch], d)
                });
                let ddens = needs[0].then(|| {
                    let mut d = vec![T::zero(); rays * samples];
                    let mut proj = vec![T::zero(); samples];
                    for r in 0..rays {
                        let grow = &gd[r * ch..(r + 1) * ch];
                        for (s, p) in proj.iter_mut().enumerate() {
                            let f = &fd[(r * samples + s) * ch..(r * samples + s + 1) * ch];
                            *p = f.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        }
                        // suffix = Σ_{j>k} w_j g_j, trans_next = T_{k+1}
                        let mut suffix = T::zero();
                        let mut optical = T::zero();
                        let mut trans_after = vec![T::zero(); samples];
                        for s in 0..samples {
                            let i = r * samples + s;
                            optical += dd[i] * deltas[i];
                            trans_after[s] = (-optical).exp();
                        }
                        for s in (0..samples).rev() {
                            let i = r * samples + s;
                            d[i] = deltas[i] * (trans_after[s] * proj[s] - suffix);
                            suffix += weights[i] * proj[s];
                        }
                    }
                    Tensor::new(&[rays, samples], d)
                });
                vec![ddens, dfeat]
            })
    }

    /// Softmax over axis 0 of `[V, M]` restricted to `mask`; masked entries
    /// and fully masked columns are zero.
    pub fn masked_softmax_axis0(&self, mask: Rc<Vec<bool>>) -> Var<'t, T> {
        let x = self.value();
        let (views, m) = (x.dim(0), x.dim(1));
        assert_eq!(mask.len(), views * m);
        let mut out = vec![T::zero(); views * m];
        for j in 0..m {
            let mut mx = T::neg_infinity();
            for v in 0..views {
                if mask[v * m + j] {
                    mx = mx.max(x.data()[v * m + j]);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for v in 0..views {
                if mask[v * m + j] {
                    let e = (x.data()[v * m + j] - mx).exp();
                    out[v * m + j] = e;
                    z += e;
                }
            }
            for v in 0..views {
                out[v * m + j] /= z;
            }
        }
        let y = Rc::new(out.clone());
        let value = Tensor::new(&[views, m], out);
        self.tape.record(&[self], value, move |g, _| {
            let gd = g.data();
            let mut d = vec![T::zero(); views * m];
            for j in 0..m {
                let dot: T = (0..views).map(|v| gd[v * m + j] * y[v * m + j]).sum();
                for v in 0..views {
                    d[v * m + j] = y[v * m + j] * (gd[v * m + j] - dot);
                }
            }
            vec![Some(Tensor::new(&[views, m], d))]
        })
    }

    /// `out[m, c] = Σ_v w[v, m] · f[v, m, c]` for weights `[V, M]` and
    /// features `[V, M, C]`.
    pub fn weighted_view_sum(weights: &Var<'t, T>, features: &Var<'t, T>) -> Var<'t, T> {
        let (views, m) = (weights.value().dim(0), weights.value().dim(1));
        let fs = features.shape();
        assert_eq!(&fs[..2], &[views, m], "weighted_view_sum layout");
        let ch = fs[2];
        let (wd, fd) = (weights.value().data(), features.value().data());
        let mut out = vec![T::zero(); m * ch];
        for v in 0..views {
            for j in 0..m {
                let w = wd[v * m + j];
                if w == T::zero() {
                    continue;
                }
                let f = &fd[(v * m + j) * ch..(v * m + j + 1) * ch];
                for (o, &fv) in out[j * ch..(j + 1) * ch].iter_mut().zip(f) {
                    *o += w * fv;
                }
            }
        }
        let value = Tensor::new(&[m, ch], out);
        let (wr, fr) = (weights.rc(), features.rc());
        weights
            .tape
            .record(&[weights, features], value, move |g, needs| {
                let gd = g.data();
                let dw = needs[0].then(|| {
                    let fd = fr.data();
                    Tensor::from_fn(&[views, m], |i| {
                        let j = i % m;
                        let f = &fd[i * ch..(i + 1) * ch];
                        f.iter().zip(&gd[j * ch..(j + 1) * ch]).map(|(&a, &b)| a * b).sum()
                    })
                });
                let df = needs[1].then(|| {
                    let wd = wr.data();
                    Tensor::from_fn(&[views, m, ch], |i| {
                        let vm = i / ch;
                        let (j, c) = (vm % m, i % ch);
                        wd[vm] * gd[j * ch + c]
                    })
                });
                vec![dw, df]
            })
    }
}

/// Per-sample compositing weights `T_k (1 − exp(−d_k δ_k))`.
pub(crate) fn compositing_weights<T: Scalar>(
    density: &[T],
    deltas: &[T],
    rays: usize,
    samples: usize,
) -> Vec<T> {
    let mut w = vec![T::zero(); rays * samples];
    for r in 0..rays {
        let mut trans = T::one();
        for s in 0..samples {
            let i = r * samples + s;
            let tau = density[i] * deltas[i];
            let alpha = T::one() - (-tau).exp();
            w[i] = trans * alpha;
            trans *= (-tau).exp();
        }
    }
    w
}
