//! Precomputed sampling patterns: where voxels land in each image and where
//! ray samples land in the grids. Everything here is pure geometry in f64.

use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::{
    contract, generate_rays, project, uncontract, CameraView, Ray, CONTRACTION_SCALE, CUBE_HALF,
};
use crate::scalar::Scalar;

/// Contracted background coordinates span `[-2, 2]³`.
pub const BACKGROUND_HALF: f64 = 2.0;

/// MERF contraction of a point already rescaled so the foreground cube is
/// `‖x‖∞ ≤ 1`.
pub fn contract_background(x: &Vector3<f64>) -> Vector3<f64> {
    contract(x)
}

/// Flat voxel index for grid axes `(z, y, x)`.
pub fn voxel_index(g: usize, iz: usize, iy: usize, ix: usize) -> usize {
    (iz * g + iy) * g + ix
}

fn cell_center(g: usize, v: usize, half: f64) -> Vector3<f64> {
    let c = |i: usize| -half + (i as f64 + 0.5) * 2.0 * half / g as f64;
    Vector3::new(c(v % g), c((v / g) % g), c(v / (g * g)))
}

/// World-space centers of the foreground voxels.
pub fn foreground_centers(g: usize) -> Vec<Vector3<f64>> {
    (0..g * g * g).map(|v| cell_center(g, v, CUBE_HALF)).collect()
}

/// World-space points whose contraction lands on the background voxel
/// centers.
pub fn background_centers(g: usize) -> Vec<Vector3<f64>> {
    (0..g * g * g)
        .map(|v| uncontract(&cell_center(g, v, BACKGROUND_HALF)) / CONTRACTION_SCALE)
        .collect()
}

/// Bilinear taps of every voxel in every contributing view.
#[derive(Clone, Debug)]
pub struct UnprojectPlan<T> {
    /// Frame indices that contribute, ascending.
    pub views: Vec<usize>,
    pub voxels: usize,
    /// 4 taps per (view, voxel) into the `[N·H·W, C]` token table.
    pub idx: Rc<Vec<u32>>,
    pub weights: Rc<Vec<T>>,
    /// `[V, M]` validity.
    pub mask: Rc<Vec<bool>>,
    /// `[V·M, 4]`: unit direction from the camera and depth over camera
    /// distance from the origin.
    pub encoding: Vec<T>,
}

impl<T> UnprojectPlan<T> {
    /// Per-voxel count of valid views.
    pub fn valid_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.voxels];
        for (k, &m) in self.mask.iter().enumerate() {
            if m {
                counts[k % self.voxels] += 1;
            }
        }
        counts
    }
}

/// Bilinear taps at continuous pixel coordinates (centers at `i + 0.5`),
/// clamped to the border. `None` outside the image.
pub fn bilinear_taps(pixel: [f64; 2], h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    let (u, v) = (pixel[0], pixel[1]);
    if !(0.0..=w as f64).contains(&u) || !(0.0..=h as f64).contains(&v) {
        return None;
    }
    let axis = |p: f64, n: usize| {
        let x = (p - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (x0, x1, fx) = axis(u, w);
    let (y0, y1, fy) = axis(v, h);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// Projects `points` into every view except `skip`. `views` must already be
/// at feature resolution; all share one resolution.
pub fn plan_unprojection<T: Scalar>(
    views: &[CameraView],
    points: &[Vector3<f64>],
    skip: Option<usize>,
) -> Result<UnprojectPlan<T>> {
    let used: Vec<usize> = (0..views.len()).filter(|&i| Some(i) != skip).collect();
    if used.is_empty() {
        return invalid("every view is skipped; nothing to unproject");
    }
    let m = points.len();
    let mut idx = Vec::with_capacity(used.len() * m * 4);
    let mut weights = Vec::with_capacity(used.len() * m * 4);
    let mut mask = Vec::with_capacity(used.len() * m);
    let mut encoding = Vec::with_capacity(used.len() * m * 4);
    for &n in &used {
        let view = &views[n];
        let (h, w) = (view.height(), view.width());
        let base = (n * h * w) as u32;
        let center = view.center();
        let radius = center.norm().max(1e-9);
        for p in points {
            let proj = project(p, view);
            let taps = if proj.is_behind() {
                None
            } else {
                bilinear_taps(proj.pixel, h, w)
            };
            mask.push(taps.is_some());
            match taps {
                Some(taps) => {
                    for (i, wt) in taps {
                        idx.push(base + i as u32);
                        weights.push(T::from_f64_lossy(wt));
                    }
                }
                None => {
                    idx.extend([base; 4]);
                    weights.extend([T::zero(); 4]);
                }
            }
            let d = p - center;
            let dist = d.norm().max(1e-12);
            let dir = d / dist;
            encoding.extend([dir.x, dir.y, dir.z, dist / radius].map(T::from_f64_lossy));
        }
    }
    Ok(UnprojectPlan {
        views: used,
        voxels: m,
        idx: Rc::new(idx),
        weights: Rc::new(weights),
        mask: Rc::new(mask),
        encoding,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Samples per ray in each of the foreground and background segments.
    pub n_samples: usize,
    pub background: bool,
    /// Jittered samples within each bin; midpoints otherwise.
    pub stratified: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: 32,
            background: true,
            stratified: false,
        }
    }
}

/// Trilinear taps of every sample of every ray of one view.
#[derive(Clone, Debug)]
pub struct RenderPlan<T> {
    pub rays: usize,
    pub samples: usize,
    /// 8 taps per sample into the `[M_fg (+ M_bg), C]` grid table.
    pub idx: Rc<Vec<u32>>,
    pub weights: Rc<Vec<T>>,
    pub deltas: Rc<Vec<T>>,
}

/// Trilinear taps at a position in `[-half, half]³`, clamped to the grid.
pub fn trilinear_taps(p: &Vector3<f64>, g: usize, half: f64) -> [(usize, f64); 8] {
    let axis = |x: f64| {
        let q = ((x + half) / (2.0 * half) * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let i0 = (q.floor() as usize).min(g - 1);
        (i0, (i0 + 1).min(g - 1), q - i0 as f64)
    };
    let (x0, x1, fx) = axis(p.x);
    let (y0, y1, fy) = axis(p.y);
    let (z0, z1, fz) = axis(p.z);
    let mut out = [(0, 0.0); 8];
    let mut k = 0;
    for (iz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (iy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (ix, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                out[k] = (voxel_index(g, iz, iy, ix), wz * wy * wx);
                k += 1;
            }
        }
    }
    out
}

/// Contracted position at background parameter `s ∈ [0, 1]`, where `s`
/// is uniform in inverse distance from the background start.
fn background_point(ray: &Ray, s: f64) -> Vector3<f64> {
    if s >= 1.0 {
        let d = ray.direction;
        let norm = d.amax();
        let j = d.iamax();
        let mut out = d / norm;
        out[j] = d[j].signum() * BACKGROUND_HALF;
        return out;
    }
    let t = ray.near / (1.0 - s);
    contract(&(ray.at(t) * CONTRACTION_SCALE))
}

fn offsets<R: Rng>(n: usize, rng: &mut Option<&mut R>) -> Vec<f64> {
    (0..n)
        .map(|_| match rng {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        })
        .collect()
}

/// Sample layout for every pixel of `view` against grids of resolution
/// `g`. Background rows start at `g³` in the table.
pub fn plan_render<T: Scalar, R: Rng>(
    view: &CameraView,
    g: usize,
    opts: &RenderOptions,
    mut rng: Option<&mut R>,
) -> RenderPlan<T> {
    let s = opts.n_samples;
    let sb = if opts.background { s } else { 0 };
    let per_ray = s + sb;
    let rays = generate_rays(view);
    let m = g * g * g;
    let mut idx = Vec::with_capacity(rays.len() * per_ray * 8);
    let mut weights = Vec::with_capacity(rays.len() * per_ray * 8);
    let mut deltas = Vec::with_capacity(rays.len() * per_ray);
    let mut push = |taps: [(usize, f64); 8], offset: usize, delta: f64| {
        for (i, w) in taps {
            idx.push((offset + i) as u32);
            weights.push(T::from_f64_lossy(w));
        }
        deltas.push(T::from_f64_lossy(delta));
    };
    for pr in &rays {
        let jitter = offsets(per_ray, &mut rng);
        match &pr.foreground {
            Some(ray) => {
                let step = (ray.far - ray.near) / s as f64;
                for (k, u) in jitter[..s].iter().enumerate() {
                    let p = ray.at(ray.near + (k as f64 + u) * step);
                    push(trilinear_taps(&p, g, CUBE_HALF), 0, step);
                }
            }
            None => {
                for _ in 0..s {
                    push([(0, 0.0); 8], 0, 0.0);
                }
            }
        }
        for (k, u) in jitter[s..].iter().enumerate() {
            let c = background_point(&pr.background, (k as f64 + u) / sb as f64);
            let a = background_point(&pr.background, k as f64 / sb as f64);
            let b = background_point(&pr.background, (k + 1) as f64 / sb as f64);
            push(trilinear_taps(&c, g, BACKGROUND_HALF), m, (b - a).norm());
        }
    }
    RenderPlan {
        rays: rays.len(),
        samples: per_ray,
        idx: Rc::new(idx),
        weights: Rc::new(weights),
        deltas: Rc::new(deltas),
    }
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn contraction_cases() {
        let a = contract_background(&Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(a, Vector3::new(0.5, 0.0, 0.0));
        let b = contract_background(&Vector3::new(4.0, 0.0, 0.0));
        assert!((b - Vector3::new(1.75, 0.0, 0.0)).norm() < 1e-12);
        let far = contract_background(&Vector3::new(1e9, -3e8, 2.0));
        assert!((far.amax() - 2.0).abs() < 1e-8 && far.amax() < 2.0);
    }

    #[test]
    fn background_centers_contract_back() {
        let g = 4;
        for (v, p) in background_centers(g).iter().enumerate() {
            let want = cell_center(g, v, BACKGROUND_HALF);
            // the contraction never reaches points with two coordinates
            // beyond the unit cube
            if want.iter().filter(|c| c.abs() > 1.0).count() > 1 {
                continue;
            }
            let c = contract(&(p * CONTRACTION_SCALE));
            assert!((c - want).norm() < 1e-9);
        }
    }

    #[test]
    fn bilinear_node_and_midpoint() {
        let taps = bilinear_taps([2.5, 1.5], 4, 4).unwrap();
        assert_eq!(taps[0], (6, 1.0));
        let taps = bilinear_taps([2.0, 2.0], 4, 4).unwrap();
        let mut got: Vec<(usize, f64)> = taps.to_vec();
        got.sort_by_key(|t| t.0);
        assert_eq!(got, vec![(5, 0.25), (6, 0.25), (9, 0.25), (10, 0.25)]);
        assert!(bilinear_taps([-0.1, 1.0], 4, 4).is_none());
        assert!(bilinear_taps([1.0, 4.1], 4, 4).is_none());
    }

    #[test]
    fn trilinear_weights_sum_to_one() {
        for p in [Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.49, 0.5, -0.5)] {
            let taps = trilinear_taps(&p, 4, 0.5);
            let s: f64 = taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // exactly at a voxel center
        let c = cell_center(4, voxel_index(4, 1, 2, 3), 0.5);
        let taps = trilinear_taps(&c, 4, 0.5);
        assert_eq!(taps[0], (voxel_index(4, 1, 2, 3), 1.0));
    }

    #[test]
    fn voxels_behind_camera_are_invalid() {
        let view = CameraView::orbit(Vector3::new(0.0, 0.0, 0.3), 4.0, 4).unwrap();
        // (0, 0, 0.45) sits behind a camera at z=0.3 looking towards -z
        let plan = plan_unprojection::<f64>(&[view], &[Vector3::new(0.0, 0.0, 0.45), Vector3::zeros()], None)
            .unwrap();
        assert_eq!(*plan.mask, vec![false, true]);
    }

    #[test]
    fn all_skipped_is_an_error() {
        let view = CameraView::orbit(Vector3::new(0.0, 0.0, 2.0), 4.0, 4).unwrap();
        assert!(plan_unprojection::<f64>(&[view], &foreground_centers(2), Some(0)).is_err());
    }

    #[test]
    fn render_plan_geometry() {
        let view = CameraView::orbit(Vector3::new(0.3, 0.4, 2.0), 8.0, 6).unwrap();
        let opts = RenderOptions {
            n_samples: 8,
            background: true,
            stratified: false,
        };
        let plan = plan_render::<f64, ChaCha8Rng>(&view, 4, &opts, None);
        assert_eq!(plan.rays, 36);
        assert_eq!(plan.samples, 16);
        for r in 0..plan.rays {
            let d = &plan.deltas[r * 16..(r + 1) * 16];
            // contracted background lies inside [-2, 2]³
            let bg: f64 = d[8..].iter().sum();
            assert!(bg > 0.0 && bg < 4.0 * 3f64.sqrt());
            assert!(d.iter().all(|x| *x >= 0.0));
        }
        for k in 0..plan.rays * 16 {
            let s: f64 = plan.weights[k * 8..(k + 1) * 8].iter().sum();
            let fg_missing = k % 16 < 8 && plan.deltas[k] == 0.0;
            assert!(fg_missing || (s - 1.0).abs() < 1e-9);
            assert!(plan.idx[k * 8..(k + 1) * 8].iter().all(|&i| (i as usize) < 128));
        }
    }
}
