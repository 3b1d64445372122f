//! Elementwise, reduction, matrix and shape operations.

use std::rc::Rc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` read through `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let len: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..len {
        out.push(f(ad[ia], bd[ib]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Sums `g` (of the broadcast shape) back down to `target`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let out_shape = g.shape().to_vec();
    let st = broadcast_strides(target, &out_shape);
    let mut acc = Tensor::zeros(target);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    let ad = acc.data_mut();
    for &v in g.data() {
        ad[it] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            it += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            it -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    acc
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let rank = x.rank();
    assert_eq!(axes.len(), rank);
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let len = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..len {
        out.push(xd[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn narrow_tensor<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, dim, inner) = around(x.shape(), axis);
    assert!(start + len <= dim, "narrow out of range");
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        &self,
        other: &Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let out_shape = broadcast_shape(self.shape(), other.shape());
        let value = broadcast_zip(self.value(), other.value(), &out_shape, f);
        let (a, b) = (self.rc(), other.rc());
        self.tape.record(&[self, other], value, move |g, needs| {
            // gradients evaluated on the broadcast grid, then reduced
            let expand = |t: &Tensor<T>| broadcast_zip(g, t, g.shape(), |_, v| v);
            let (ae, be) = (expand(&a), expand(&b));
            let ga = needs[0].then(|| {
                let full = Tensor::from_fn(g.shape(), |i| {
                    da(g.data()[i], ae.data()[i], be.data()[i])
                });
                reduce_to(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = Tensor::from_fn(g.shape(), |i| {
                    db(g.data()[i], ae.data()[i], be.data()[i])
                });
                reduce_to(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Broadcasting sum (equal rank; size-1 axes broadcast).
    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        if self.shape() == other.shape() {
            let value = self.value().zip_map(other.value(), |a, b| a + b);
            return self.tape.record(&[self, other], value, |g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            });
        }
        self.binary(other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        )
    }

    /// Elementwise map with derivative `df(x, y)` in terms of input and output.
    pub fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let value = self.value().map(f);
        let x = self.rc();
        let y = Rc::new(value.clone());
        self.tape.record(&[self], value, move |g, _| {
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(|v| -v, |_, _| -T::one())
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.unary(move |v| v + s, |_, _| T::one())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.unary(
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn elu(&self) -> Var<'t, T> {
        self.unary(
            |v| if v > T::zero() { v } else { v.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.tape.record(&[self], value, move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Matrix product of 2-D operands, optionally transposing either side.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rank(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.rank(), 2, "matmul rhs must be 2-D");
        let (m, k) = if ta {
            (a.dim(1), a.dim(0))
        } else {
            (a.dim(0), a.dim(1))
        };
        let (k2, n) = if tb {
            (b.dim(1), b.dim(0))
        } else {
            (b.dim(0), b.dim(1))
        };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), ta, b.data(), tb, &mut out, false);
        let (ar, br) = (self.rc(), other.rc());
        self.tape
            .record(&[self, other], Tensor::new(&[m, n], out), move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    // d(a) = g·bᵀ (or its transpose)
                    let mut d = vec![T::zero(); m * k];
                    if ta {
                        gemm(k, n, m, br.data(), tb, gd, true, &mut d, false);
                        Tensor::new(&[k, m], d)
                    } else {
                        gemm(m, n, k, gd, false, br.data(), !tb, &mut d, false);
                        Tensor::new(&[m, k], d)
                    }
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    if tb {
                        gemm(n, m, k, gd, true, ar.data(), ta, &mut d, false);
                        Tensor::new(&[n, k], d)
                    } else {
                        gemm(k, m, n, ar.data(), !ta, gd, false, &mut d, false);
                        Tensor::new(&[k, n], d)
                    }
                });
                vec![ga, gb]
            })
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_t(other, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let value = (*self.value).clone().reshape(shape);
        let orig = self.shape().to_vec();
        self.tape.record(&[self], value, move |g, _| {
            vec![Some(g.clone().reshape(&orig))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t, T> {
        let value = permute_tensor(self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(&[self], value, move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    pub fn transpose(&self) -> Var<'t, T> {
        assert_eq!(self.value().rank(), 2);
        self.permute(&[1, 0])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let value = narrow_tensor(self.value(), axis, start, len);
        let shape = self.shape().to_vec();
        self.tape.record(&[self], value, move |g, _| {
            let (outer, dim, inner) = around(&shape, axis);
            let mut d = Tensor::zeros(&shape);
            let dd = d.data_mut();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(d)]
        })
    }

    /// Concatenation along `axis`.
    pub fn concat(items: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!items.is_empty(), "concat of nothing");
        let tape = items[0].tape;
        let first = items[0].shape().to_vec();
        let dims: Vec<usize> = items
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(ax == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = dims.iter().sum();
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in items.iter().zip(&dims) {
                let src = o * d * inner;
                out.extend_from_slice(&v.value().data()[src..src + d * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let refs: Vec<&Var<'t, T>> = items.iter().collect();
        let value = Tensor::new(&shape, out);
        tape.record(&refs, value, move |g, needs| {
            let mut start = 0;
            dims.iter()
                .zip(needs)
                .map(|(&d, &need)| {
                    let r = need.then(|| narrow_tensor(g, axis, start, d));
                    start += d;
                    r
                })
                .collect()
        })
    }

    /// Rows `idx[i]` of a 2-D tensor; repeated indices accumulate gradient.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "gather_rows expects [rows, cols]");
        let (rows, cols) = (x.dim(0), x.dim(1));
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            assert!(r < rows, "row {r} out of {rows}");
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(&[idx.len(), cols], out);
        self.tape.record(&[self], value, move |g, _| {
            let mut d = Tensor::zeros(&[rows, cols]);
            let dd = d.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    dd[r * cols + c] += g.data()[i * cols + c];
                }
            }
            vec![Some(d)]
        })
    }

    /// Interpolating gather: output row `l` is `Σ_k w[l·K+k] · x[idx[l·K+k]]`.
    pub fn gather_weighted(
        &self,
        idx: Rc<Vec<u32>>,
        weights: Rc<Vec<T>>,
        corners: usize,
    ) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "gather_weighted expects [rows, cols]");
        assert_eq!(idx.len(), weights.len());
        assert_eq!(idx.len() % corners, 0);
        let (rows, cols) = (x.dim(0), x.dim(1));
        let n_out = idx.len() / corners;
        let xd = x.data();
        let mut out = vec![T::zero(); n_out * cols];
        for l in 0..n_out {
            let dst = &mut out[l * cols..(l + 1) * cols];
            for k in 0..corners {
                let w = weights[l * corners + k];
                if w == T::zero() {
                    continue;
                }
                let r = idx[l * corners + k] as usize;
                debug_assert!(r < rows);
                for (o, &v) in dst.iter_mut().zip(&xd[r * cols..(r + 1) * cols]) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(&[n_out, cols], out);
        self.tape.record(&[self], value, move |g, _| {
            let mut d = Tensor::zeros(&[rows, cols]);
            let dd = d.data_mut();
            let gd = g.data();
            for l in 0..n_out {
                let src = &gd[l * cols..(l + 1) * cols];
                for k in 0..corners {
                    let w = weights[l * corners + k];
                    if w == T::zero() {
                        continue;
                    }
                    let r = idx[l * corners + k] as usize;
                    for (o, &v) in dd[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
            vec![Some(d)]
        })
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
