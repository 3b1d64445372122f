//! The projection layer: compress image features, lift them into a voxel
//! grid shared by all frames, refine it in 3D, render it back into every
//! frame and expand to the original width.

pub mod sampling;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{from_tokens, to_tokens};
use crate::autograd::Var;
use crate::error::Result;
use crate::geometry::CameraView;
use crate::nn::{Binder, Builder, Conv, GroupNorm, Linear, Mlp, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use sampling::{
    background_centers, contract_background, foreground_centers, plan_render, plan_unprojection,
    RenderOptions, RenderPlan, UnprojectPlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Width `C` of the surrounding U-Net features.
    pub channels: usize,
    /// Reduced width `C′` of the 3D features.
    pub reduced: usize,
    /// Voxel grid resolution `G`.
    pub grid: usize,
    /// Width of the incoming timestep embedding.
    pub temb_dim: usize,
    /// Width the timestep embedding is projected to inside the layer.
    pub temb_reduced: usize,
    pub hidden: usize,
    pub refine_blocks: usize,
}

impl ProjectionConfig {
    pub fn new(channels: usize, grid: usize, temb_dim: usize) -> Self {
        Self {
            channels,
            reduced: 16.min(channels),
            grid,
            temb_dim,
            temb_reduced: 16,
            hidden: 32,
            refine_blocks: 5,
        }
    }
}

/// Per-call frame information shared by every projection layer in a
/// forward pass.
#[derive(Clone, Debug)]
pub struct FrameContext<T> {
    /// Cameras at image resolution, normalized to the unit cube.
    pub views: Vec<CameraView>,
    /// `[N, temb_dim]`.
    pub temb: Tensor<T>,
    /// Frame left out of the voxel grid (still rendered).
    pub skip: Option<usize>,
    pub render: RenderOptions,
    /// Base seed for stratified sampling; each layer derives its own stream.
    pub seed: u64,
}

/// Voxel features of the foreground cube and the contracted background,
/// each `[C′, G, G, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVoxelGrid<T> {
    pub foreground: Tensor<T>,
    pub background: Option<Tensor<T>>,
}

impl<T: Scalar> FeatureVoxelGrid<T> {
    pub fn resolution(&self) -> usize {
        self.foreground.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.foreground.dim(0)
    }

    /// Row table `[G³ (+ G³), C′]` as used by rendering.
    pub fn to_table(&self) -> Tensor<T> {
        let mut parts = vec![&self.foreground];
        if let Some(b) = &self.background {
            parts.push(b);
        }
        let c = self.channels();
        let m = self.foreground.len() / c;
        let mut out = Vec::with_capacity(m * c * parts.len());
        for p in parts {
            for v in 0..m {
                out.extend((0..c).map(|ch| p.data()[ch * m + v]));
            }
        }
        Tensor::new(&[out.len() / c, c], out)
    }
}

/// Output of aggregation with its intermediate statistics, all `[M, C′]`
/// except `weights` which is `[V, M]`.
pub struct Aggregated<'t, T: Scalar> {
    pub grid: Var<'t, T>,
    pub weights: Var<'t, T>,
    pub weighted_mean: Var<'t, T>,
    pub mean: Var<'t, T>,
    pub variance: Var<'t, T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregator {
    pub weight_mlp: Mlp,
    pub out_mlp: Mlp,
}

impl Aggregator {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, t: usize, hidden: usize) -> Self {
        Self {
            weight_mlp: Mlp::new(&mut b.scope("weight"), &[c + 4 + t, hidden, 1]),
            out_mlp: Mlp::new(&mut b.scope("out"), &[3 * c, hidden, c]),
        }
    }

    /// `features` is `[V, M, C′]`, `encoding` `[V·M, 4]`, `temb` `[V, T]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        features: &Var<'t, T>,
        mask: &Rc<Vec<bool>>,
        encoding: &Var<'t, T>,
        temb: &Var<'t, T>,
    ) -> Aggregated<'t, T> {
        let (v, m, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
        let flat = features.reshape(&[v * m, c]);
        let t_rows = temb.gather_rows(Rc::new((0..v).flat_map(|i| std::iter::repeat_n(i, m)).collect()));
        let input = Var::concat(&[flat, encoding.clone(), t_rows], 1);
        let logits = self.weight_mlp.forward(bx, &input).reshape(&[v, m]);
        let weights = logits.masked_softmax_axis0(Rc::clone(mask));
        let weighted_mean = Var::weighted_view_sum(&weights, features);

        let mut counts = vec![0usize; m];
        for (k, &ok) in mask.iter().enumerate() {
            counts[k % m] += ok as usize;
        }
        let uniform: Vec<T> = mask
            .iter()
            .enumerate()
            .map(|(k, &ok)| if ok { T::one() / T::from_usize(counts[k % m]).unwrap() } else { T::zero() })
            .collect();
        let uniform = bx.constant(Tensor::new(&[v, m], uniform));
        let mean = Var::weighted_view_sum(&uniform, features);
        let centered = features.sub(&mean.reshape(&[1, m, c]));
        let variance = Var::weighted_view_sum(&uniform, &centered.square());

        let any = bx.constant(Tensor::from_fn(&[m, 1], |j| {
            if counts[j] > 0 {
                T::one()
            } else {
                T::zero()
            }
        }));
        let stats = Var::concat(&[weighted_mean.clone(), mean.clone(), variance.clone()], 1);
        let grid = self.out_mlp.forward(bx, &stats).mul(&any);
        Aggregated {
            grid,
            weights,
            weighted_mean,
            mean,
            variance,
        }
    }
}

/// 3D ResNet block with a timestep bias between its convolutions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResBlock3d {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub temb: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv,
}

impl ResBlock3d {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, t: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.scope("norm1"), c, 4),
            conv1: Conv::new3d(&mut b.scope("conv1"), c, c),
            temb: Linear::new(&mut b.scope("temb"), t, c),
            norm2: GroupNorm::new(&mut b.scope("norm2"), c, 4),
            conv2: Conv::zero3d(&mut b.scope("conv2"), c, c),
        }
    }

    /// `x` is `[B, C′, G, G, G]`, `temb` `[1, T]`.
    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, x: &Var<'t, T>, temb: &Var<'t, T>) -> Var<'t, T> {
        let c = x.shape()[1];
        let h = self.conv1.forward(bx, &self.norm1.forward(bx, x).silu());
        let bias = self.temb.forward(bx, &temb.silu()).reshape(&[1, c, 1, 1, 1]);
        let h = self.conv2.forward(bx, &self.norm2.forward(bx, &h.add(&bias)).silu());
        x.add(&h)
    }
}

/// The 3-layer field network mapping an interpolated feature to density
/// and a sampled feature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderField {
    pub layers: [Linear; 3],
}

impl RenderField {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, hidden: usize) -> Self {
        Self {
            layers: [
                Linear::new(&mut b.scope("l0"), c, hidden),
                Linear::new(&mut b.scope("l1"), hidden, hidden),
                Linear::new(&mut b.scope("l2"), hidden, 1 + c),
            ],
        }
    }

    /// `[K, C′]` → (density `[K, 1]` via softplus, feature `[K, C′]` via sigmoid).
    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, T>, f: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let h = self.layers[0].forward(bx, f).silu();
        let h = self.layers[1].forward(bx, &h).silu();
        let out = self.layers[2].forward(bx, &h);
        let c = out.shape()[1] - 1;
        (out.narrow(1, 0, 1).softplus(), out.narrow(1, 1, c).sigmoid())
    }
}

/// Volume-renders one view from a grid table with an arbitrary field.
/// Returns `[H·W, C′]`.
pub fn render_with<'t, T: Scalar>(
    table: &Var<'t, T>,
    plan: &RenderPlan<T>,
    field: impl Fn(&Var<'t, T>) -> (Var<'t, T>, Var<'t, T>),
) -> Var<'t, T> {
    let f = table.gather_weighted(Rc::clone(&plan.idx), Rc::clone(&plan.weights), 8);
    let (density, feats) = field(&f);
    let c = feats.shape()[1];
    Var::composite(
        &density.reshape(&[plan.rays, plan.samples]),
        &feats.reshape(&[plan.rays, plan.samples, c]),
        Rc::clone(&plan.deltas),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub config: ProjectionConfig,
    pub compress: Conv,
    pub temb_proj: Linear,
    pub aggregator: Aggregator,
    pub refine: Vec<ResBlock3d>,
    pub field: RenderField,
    pub scale1: Conv,
    pub scale2: Conv,
    pub expand: Conv,
}

impl ProjectionLayer {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, config: ProjectionConfig) -> Self {
        let (c, cr, t, hid) = (config.channels, config.reduced, config.temb_reduced, config.hidden);
        let refine = (0..config.refine_blocks)
            .map(|i| ResBlock3d::new(&mut b.scope(&format!("refine{i}")), cr, t))
            .collect();
        let mut rb = b.scope("render").with_group(ParamGroup::Renderer);
        let field = RenderField::new(&mut rb.scope("field"), cr, hid);
        let scale1 = Conv::new2d(&mut rb.scope("scale1"), cr, cr, 1, 1);
        let scale2 = Conv::new2d(&mut rb.scope("scale2"), cr, cr, 1, 1);
        Self {
            config,
            compress: Conv::new2d(&mut b.scope("compress"), c, cr, 1, 1),
            temb_proj: Linear::new(&mut b.scope("temb"), config.temb_dim, t),
            aggregator: Aggregator::new(&mut b.scope("aggregate"), cr, t, hid),
            refine,
            field,
            scale1,
            scale2,
            expand: Conv::zero2d(&mut b.scope("expand"), cr, c, 1),
        }
    }

    fn grid_points(&self, background: bool) -> Vec<nalgebra::Vector3<f64>> {
        let g = self.config.grid;
        let mut pts = foreground_centers(g);
        if background {
            pts.extend(background_centers(g));
        }
        pts
    }

    /// Builds the refined grid table `[G³ (+ G³), C′]` from compressed
    /// features `[N, C′, H, W]`.
    pub fn build_grid<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        compressed: &Var<'t, T>,
        ctx: &FrameContext<T>,
    ) -> Result<Var<'t, T>> {
        let s = compressed.shape().to_vec();
        let (n, cr, hh, ww) = (s[0], s[1], s[2], s[3]);
        let g = self.config.grid;
        let views: Vec<CameraView> = ctx.views.iter().map(|v| v.rescaled(hh, ww)).collect();
        let plan = plan_unprojection::<T>(&views, &self.grid_points(ctx.render.background), ctx.skip)?;
        let (v, m) = (plan.views.len(), plan.voxels);

        let table = to_tokens(compressed);
        let per_view = table
            .gather_weighted(Rc::clone(&plan.idx), Rc::clone(&plan.weights), 4)
            .reshape(&[v, m, cr]);
        let temb = self
            .temb_proj
            .forward(bx, &bx.constant(ctx.temb.clone()).silu());
        let used_temb = temb.gather_rows(Rc::new(plan.views.clone()));
        let encoding = bx.constant(Tensor::new(&[v * m, 4], plan.encoding.clone()));
        let agg = self.aggregator.forward(bx, &per_view, &plan.mask, &encoding, &used_temb);

        let batches = m / (g * g * g);
        let mut vol = agg
            .grid
            .reshape(&[batches, g * g * g, cr])
            .permute(&[0, 2, 1])
            .reshape(&[batches, cr, g, g, g]);
        let avg = bx.constant(Tensor::full(&[1, n], T::one() / T::from_usize(n).unwrap()));
        let t_mean = avg.matmul(&temb);
        for blk in &self.refine {
            vol = blk.forward(bx, &vol, &t_mean);
        }
        Ok(vol
            .reshape(&[batches, cr, g * g * g])
            .permute(&[0, 2, 1])
            .reshape(&[m, cr]))
    }

    /// Renders every frame from a grid table; `[N, C′, H, W]`.
    pub fn render<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        table: &Var<'t, T>,
        ctx: &FrameContext<T>,
        hw: [usize; 2],
        layer_seed: u64,
    ) -> Var<'t, T> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(layer_seed);
        let rendered: Vec<Var<'t, T>> = ctx
            .views
            .iter()
            .map(|view| {
                let view = view.rescaled(hw[0], hw[1]);
                let plan = plan_render::<T, _>(
                    &view,
                    self.config.grid,
                    &ctx.render,
                    ctx.render.stratified.then_some(&mut rng),
                );
                render_with(table, &plan, |f| self.field.forward(bx, f))
            })
            .collect();
        let n = ctx.views.len();
        from_tokens(&Var::concat(&rendered, 0), &[n, self.config.reduced, hw[0], hw[1]])
    }

    /// `h + expand(scale(render(refine(aggregate(unproject(compress(h)))))))`.
    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        h: &Var<'t, T>,
        ctx: &FrameContext<T>,
        layer_seed: u64,
    ) -> Result<Var<'t, T>> {
        let s = h.shape().to_vec();
        let compressed = self.compress.forward(bx, h);
        let table = self.build_grid(bx, &compressed, ctx)?;
        let r = self.render(bx, &table, ctx, [s[2], s[3]], layer_seed);
        let scaled = self.scale2.forward(bx, &self.scale1.forward(bx, &r).relu());
        Ok(h.add(&self.expand.forward(bx, &scaled)))
    }

    /// Refined grid for inspection, detached from any tape.
    pub fn grid<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, T>,
        h: &Var<'t, T>,
        ctx: &FrameContext<T>,
    ) -> Result<FeatureVoxelGrid<T>> {
        let table = self.build_grid(bx, &self.compress.forward(bx, h), ctx)?;
        let (g, c) = (self.config.grid, self.config.reduced);
        let m = g * g * g;
        let t = table.value();
        let grid = |off: usize| {
            Tensor::from_fn(&[c, g, g, g], |k| t.data()[(off + k % m) * c + k / m])
        };
        Ok(FeatureVoxelGrid {
            foreground: grid(0),
            background: (t.dim(0) == 2 * m).then(|| grid(m)),
        })
    }
}

#[cfg(test)]
mod tests;
