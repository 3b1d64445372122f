//! Parameter storage and the small set of layers the models are built from.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

/// Optimizer group. The volume renderer MLP and the feature scale network
/// train with their own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Renderer,
    Base,
}

/// Low-rank condition adapters stay frozen at zero during 2D pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Lora,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            infos: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, info: ParamInfo, value: Tensor<T>) -> ParamId {
        assert_eq!(info.shape, value.shape(), "param {} shape", info.name);
        self.infos.push(info);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            infos: self.infos.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Flat little-endian encoding of every parameter in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_elements() * T::BYTES);
        for v in &self.values {
            for &x in v.data() {
                let f = x.to_f64_lossy();
                if T::BYTES == 4 {
                    out.extend_from_slice(&(f as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
        out
    }

    /// Inverse of [`Self::to_bytes`]; `bytes_per` is 4 or 8.
    pub fn load_bytes(&mut self, bytes: &[u8], bytes_per: usize) -> Result<(), String> {
        let want = self.num_elements() * bytes_per;
        if bytes.len() != want {
            return Err(format!("archive has {} bytes, expected {want}", bytes.len()));
        }
        let mut chunks = bytes.chunks_exact(bytes_per);
        for v in &mut self.values {
            for x in v.data_mut() {
                let c = chunks.next().expect("length checked");
                let f = if bytes_per == 4 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                };
                *x = T::from_f64_lossy(f);
            }
        }
        Ok(())
    }
}

/// Declares parameters with a name prefix and group/kind context.
pub struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
    group: ParamGroup,
    kind: ParamKind,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group: ParamGroup::Base,
            kind: ParamKind::Weight,
        }
    }

    /// A child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
            kind: self.kind,
        }
    }

    pub fn with_group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    pub fn with_kind(mut self, kind: ParamKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let info = ParamInfo {
            name: full,
            shape: value.shape().to_vec(),
            group: self.group,
            kind: self.kind,
        };
        self.store.add(info, value)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let v = Tensor::uniform(shape, bound, self.rng);
        self.param(name, v)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::ones(shape))
    }
}

/// Lazily places parameters on a tape, once per forward pass.
pub struct Binder<'t, T: Scalar> {
    tape: &'t Tape<T>,
    store: Option<&'t ParamStore<T>>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: Vec<bool>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self::with_trainable(tape, store, |_| true)
    }

    pub fn with_trainable(
        tape: &'t Tape<T>,
        store: &'t ParamStore<T>,
        trainable: impl Fn(&ParamInfo) -> bool,
    ) -> Self {
        Self {
            tape,
            store: Some(store),
            vars: RefCell::new(vec![None; store.len()]),
            trainable: store.infos().iter().map(trainable).collect(),
        }
    }

    /// Binds parameter `i` to `vars[i]` instead of the stored value; used to
    /// differentiate through parameters with external perturbation.
    pub fn with_vars(tape: &'t Tape<T>, store: &ParamStore<T>, vars: &[Var<'t, T>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            tape,
            store: None,
            vars: RefCell::new(vars.iter().cloned().map(Some).collect()),
            trainable: vec![true; store.len()],
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = &vars[id] {
            return v.clone();
        }
        let value = self.store.expect("all parameters pre-bound").value(id).clone();
        let v = if self.trainable[id] {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        vars[id] = Some(v.clone());
        v
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Gradient per parameter id (`None` for parameters the root ignores).
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.as_ref().and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d_in: usize, d_out: usize) -> Self {
        let weight = b.fan_in("weight", &[d_in, d_out], d_in);
        let bias = Some(b.zeros("bias", &[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn no_bias<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d_in: usize, d_out: usize) -> Self {
        let weight = b.fan_in("weight", &[d_in, d_out], d_in);
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn zero_init<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = b.zeros("weight", &[d_in, d_out]);
        let bias = bias.then(|| b.zeros("bias", &[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x · W + b` for `x` of shape `[M, d_in]`.
    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let y = x.matmul(&bx.param(self.weight));
        match self.bias {
            Some(b) => y.add(&bx.param(b).reshape(&[1, self.d_out])),
            None => y,
        }
    }
}

/// Planar or volumetric convolution with odd cubic/square kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub volumetric: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        volumetric: bool,
        zero: bool,
    ) -> Self {
        let kd = if volumetric { kernel } else { 1 };
        let shape = [c_out, c_in, kd, kernel, kernel];
        let weight = if zero {
            b.zeros("weight", &shape)
        } else {
            b.fan_in("weight", &shape, c_in * kd * kernel * kernel)
        };
        let bias = Some(b.zeros("bias", &[c_out]));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            volumetric,
        }
    }

    pub fn new2d<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self::build(b, c_in, c_out, kernel, stride, false, false)
    }

    pub fn zero2d<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        Self::build(b, c_in, c_out, kernel, 1, false, true)
    }

    pub fn new3d<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c_in: usize, c_out: usize) -> Self {
        Self::build(b, c_in, c_out, 3, 1, true, false)
    }

    pub fn zero3d<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c_in: usize, c_out: usize) -> Self {
        Self::build(b, c_in, c_out, 3, 1, true, true)
    }

    /// Input `[B, C, H, W]` (planar) or `[B, C, D, H, W]` (volumetric),
    /// "same" padding.
    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        let p = self.kernel / 2;
        let geom = if self.volumetric {
            assert_eq!(s.len(), 5, "volumetric conv expects [B, C, D, H, W]");
            ConvGeometry {
                input: [s[2], s[3], s[4]],
                kernel: [self.kernel; 3],
                stride: self.stride,
                pad: [p; 3],
            }
        } else {
            assert_eq!(s.len(), 4, "planar conv expects [B, C, H, W]");
            ConvGeometry {
                input: [1, s[2], s[3]],
                kernel: [1, self.kernel, self.kernel],
                stride: self.stride,
                pad: [0, p, p],
            }
        };
        let bias = self.bias.map(|b| bx.param(b));
        x.conv(&bx.param(self.weight), bias.as_ref(), geom)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        Self {
            gamma: b.ones("gamma", &[channels]),
            beta: b.zeros("beta", &[channels]),
            groups,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.group_norm(self.groups, &bx.param(self.gamma), &bx.param(self.beta), 1e-5)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Linear layers with ELU between them (none after the last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.scope(&format!("l{i}")), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(bx, &h);
            if i + 1 < self.layers.len() {
                h = h.elu();
            }
        }
        h
    }
}
