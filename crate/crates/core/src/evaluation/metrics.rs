//! Image metrics restricted to object pixels, and depth-based multi-view
//! consistency.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, unproject_pixel, CameraView};
use crate::tensor::Tensor;

/// Reported in place of +∞ for identical masked pixels.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::InvalidInput(format!(
            "images must be [C, H, W] of equal shape, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (c, h, w) = (pred.dim(0), pred.dim(1), pred.dim(2));
    if mask.len() != h * w {
        return Err(Error::InvalidInput("mask size differs from image".into()));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::UndefinedMetric("empty mask".into()));
    }
    Ok((c, h, w))
}

/// PSNR (peak 1) over masked pixels of `[C, H, W]` images, capped at 99 dB.
pub fn masked_psnr(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    let (c, h, w) = check_pair(pred, target, mask)?;
    let hw = h * w;
    let mut se = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for p in (0..hw).filter(|&p| mask[p]) {
            let d = pred.data()[ch * hw + p] - target.data()[ch * hw + p];
            se += d * d;
            n += 1;
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM over 7×7 uniform windows (fully inside the image) whose center
/// pixel is masked, averaged over channels. Data range 1, sample
/// covariances.
pub fn masked_ssim(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    let (c, h, w) = check_pair(pred, target, mask)?;
    let k = SSIM_WINDOW;
    let r = k / 2;
    if h < k || w < k {
        return Err(Error::UndefinedMetric(format!("images smaller than the {k}x{k} window")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in r..h - r {
        for x in r..w - r {
            if !mask[y * w + x] {
                continue;
            }
            for ch in 0..c {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        let a = pred.data()[ch * hw + yy * w + xx];
                        let b = target.data()[ch * hw + yy * w + xx];
                        sa += a;
                        sb += b;
                        saa += a * a;
                        sbb += b * b;
                        sab += a * b;
                    }
                }
                let (ma, mb) = (sa / np, sb / np);
                let va = cov_norm * (saa / np - ma * ma);
                let vb = cov_norm * (sbb / np - mb * mb);
                let cab = cov_norm * (sab / np - ma * mb);
                let s = ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no masked pixel has a full SSIM window".into()));
    }
    Ok(total / count as f64)
}

/// Ground-truth geometry of one view: camera-space depth and object mask,
/// row-major `H × W`.
#[derive(Clone, Debug)]
pub struct ViewGeometry {
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Relative depth slack when testing whether a warped point is visible.
const VISIBILITY_TOL: f64 = 0.03;

/// Mean absolute color difference between object pixels of image `i` and
/// the pixels they warp to in image `j`, averaged over ordered pairs with at
/// least one visible correspondence.
pub fn reprojection_consistency(images: &[Tensor<f64>], views: &[CameraView], geometry: &[ViewGeometry]) -> Result<f64> {
    let m = images.len();
    if views.len() != m || geometry.len() != m {
        return Err(Error::InvalidInput("images, views and geometry must have equal length".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let errors = pairs
        .par_iter()
        .map(|&(i, j)| pair_error(&images[i], &views[i], &geometry[i], &images[j], &views[j], &geometry[j]))
        .collect::<Result<Vec<_>>>()?;
    // summed in pair order so the result is independent of the thread count
    let valid: Vec<f64> = errors.into_iter().flatten().collect();
    let (pair_sum, pairs) = (valid.iter().sum::<f64>(), valid.len());
    if pairs == 0 {
        return Err(Error::UndefinedMetric("no valid correspondences between any pair".into()));
    }
    Ok(pair_sum / pairs as f64)
}

/// Mean color error of one ordered pair, `None` without correspondences.
pub fn pair_error(
    img_a: &Tensor<f64>,
    view_a: &CameraView,
    geo_a: &ViewGeometry,
    img_b: &Tensor<f64>,
    view_b: &CameraView,
    geo_b: &ViewGeometry,
) -> Result<Option<f64>> {
    let (c, h, w) = (img_a.dim(0), img_a.dim(1), img_a.dim(2));
    let (hb, wb) = (img_b.dim(1), img_b.dim(2));
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !geo_a.mask[p] {
                continue;
            }
            let world = unproject_pixel([x as f64 + 0.5, y as f64 + 0.5], geo_a.depth[p], view_a)?;
            let pr = project(&world, view_b);
            if pr.is_behind() {
                continue;
            }
            let (u, v) = (pr.pixel[0].floor(), pr.pixel[1].floor());
            if u < 0.0 || v < 0.0 || u >= wb as f64 || v >= hb as f64 {
                continue;
            }
            let q = v as usize * wb + u as usize;
            if !geo_b.mask[q] || (geo_b.depth[q] - pr.depth).abs() > VISIBILITY_TOL * pr.depth {
                continue;
            }
            let err: f64 = (0..c)
                .map(|ch| (img_a.data()[ch * h * w + p] - img_b.data()[ch * hb * wb + q]).abs())
                .sum::<f64>()
                / c as f64;
            sum += err;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthdata::{render_scene, Scene};

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::uniform(&[3, h, w], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v + 0.5)
    }

    #[test]
    fn psnr_cases() {
        let a = img(0, 8, 8);
        let mask = vec![true; 64];
        assert_eq!(masked_psnr(&a, &a, &mask).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((masked_psnr(&a, &b, &mask).unwrap() - 20.0).abs() < 1e-9);
        // errors only outside the mask
        let mut c = a.clone();
        let mut m = vec![true; 64];
        m[5] = false;
        for ch in 0..3 {
            c.data_mut()[ch * 64 + 5] += 0.7;
        }
        assert_eq!(masked_psnr(&a, &c, &m).unwrap(), PSNR_CAP);
        assert!(matches!(masked_psnr(&a, &b, &[false; 64]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ssim_cases() {
        let a = img(1, 12, 12);
        let mask = vec![true; 144];
        assert_eq!(masked_ssim(&a, &a, &mask).unwrap(), 1.0);
        for v in [0.0, 0.3, 1.0] {
            let k = Tensor::full(&[3, 12, 12], v);
            assert!((masked_ssim(&k, &k, &mask).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(masked_ssim(&a, &img(2, 12, 12), &mask).unwrap() < 0.5);
        assert!(matches!(masked_ssim(&a, &a, &[false; 144]), Err(Error::UndefinedMetric(_))));
    }

    /// Independent SSIM: per-window statistics through explicit means and
    /// centered sums.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                let wa: Vec<f64> = (0..49).map(|k| a[(y + k / 7 - 3) * w + x + k % 7 - 3]).collect();
                let wb: Vec<f64> = (0..49).map(|k| b[(y + k / 7 - 3) * w + x + k % 7 - 3]).collect();
                let ma = wa.iter().sum::<f64>() / 49.0;
                let mb = wb.iter().sum::<f64>() / 49.0;
                let va = wa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 48.0;
                let vb = wb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 48.0;
                let cab = wa.iter().zip(&wb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 48.0;
                let (c1, c2) = (0.0001, 0.0009);
                acc += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn ssim_inverted_binary_image_matches_oracle() {
        let (h, w) = (12, 10);
        let bin: Vec<f64> = (0..h * w).map(|k| ((k * 7919) % 13 < 6) as u8 as f64).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        let to3 = |v: &[f64]| Tensor::new(&[3, h, w], v.repeat(3));
        let got = masked_ssim(&to3(&inv), &to3(&bin), &vec![true; h * w]).unwrap();
        let want = ssim_oracle(&inv, &bin, h, w);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got < 0.0);
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(s1 in 0u64..500, s2 in 0u64..500) {
            let (a, b) = (img(s1, 6, 6), img(s2 + 1000, 6, 6));
            let m = vec![true; 36];
            prop_assert_eq!(masked_psnr(&a, &b, &m).unwrap(), masked_psnr(&b, &a, &m).unwrap());
        }
    }

    fn scene_geometry(scene: &Scene, idx: &[usize]) -> (Vec<Tensor<f64>>, Vec<CameraView>, Vec<ViewGeometry>) {
        let images = idx.iter().map(|&i| scene.frames[i].image.clone()).collect();
        let views = idx.iter().map(|&i| scene.views[i].clone()).collect();
        let geo = idx
            .iter()
            .map(|&i| ViewGeometry {
                depth: scene.frames[i].depth.clone(),
                mask: scene.frames[i].mask.clone(),
            })
            .collect();
        (images, views, geo)
    }

    #[test]
    fn ground_truth_renders_are_consistent() {
        for s in 0..4 {
            let scene = Scene::from_seed(5, s, 32).unwrap();
            let (images, views, geo) = scene_geometry(&scene, &[0, 1, 2, 3, 4]);
            let e = reprojection_consistency(&images, &views, &geo).unwrap();
            assert!(e < 0.1, "scene {s}: {e}");
        }
    }

    #[test]
    fn identical_pose_is_direct_difference() {
        let scene = Scene::from_seed(6, 0, 32).unwrap();
        let v = scene.views[0].clone();
        let r = render_scene(&scene.spec, &v);
        let geo = ViewGeometry {
            depth: r.depth.clone(),
            mask: r.mask.clone(),
        };
        let other = img(3, 32, 32);
        let e = reprojection_consistency(&[r.image.clone(), other.clone()], &[v.clone(), v], &[geo.clone(), geo.clone()])
            .unwrap();
        let n = r.mask.iter().filter(|m| **m).count() as f64;
        let direct: f64 = (0..1024)
            .filter(|&p| r.mask[p])
            .map(|p| (0..3).map(|c| (r.image.data()[c * 1024 + p] - other.data()[c * 1024 + p]).abs()).sum::<f64>() / 3.0)
            .sum::<f64>()
            / n;
        assert!((e - direct).abs() < 1e-12);
    }

    #[test]
    fn scrambling_increases_error_and_order_is_irrelevant() {
        let scene = Scene::from_seed(7, 1, 32).unwrap();
        let (mut images, views, geo) = scene_geometry(&scene, &[0, 2, 4]);
        let base = reprojection_consistency(&images, &views, &geo).unwrap();
        let (ri, rv, rg) = scene_geometry(&scene, &[4, 0, 2]);
        let reordered = reprojection_consistency(&ri, &rv, &rg).unwrap();
        assert!((base - reordered).abs() < 1e-12);
        images[1] = img(9, 32, 32);
        assert!(reprojection_consistency(&images, &views, &geo).unwrap() > base);
    }

    #[test]
    fn no_correspondence_is_undefined() {
        let scene = Scene::from_seed(7, 2, 16).unwrap();
        let (images, views, mut geo) = scene_geometry(&scene, &[0, 1]);
        for g in &mut geo {
            g.mask.iter_mut().for_each(|m| *m = false);
        }
        assert!(matches!(
            reprojection_consistency(&images, &views, &geo),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
