//! Per-frame condition vectors and timestep embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::CameraView;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONDITION_DIM: usize = 10;

/// Whether the intensity part carries image statistics or the fixed
/// inference value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    Train,
    Test,
}

/// Intensity encoding used for every frame at inference.
pub const TEST_INTENSITY: [f64; 2] = [0.5, 0.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionVector {
    pub pose: [f64; 4],
    pub intrinsics: [f64; 4],
    pub intensity: [f64; 2],
}

impl ConditionVector {
    pub fn build<T: Scalar>(view: &CameraView, image: &Tensor<T>, mode: IntensityMode) -> Result<Self> {
        Ok(Self {
            pose: encode_pose(view)?,
            intrinsics: encode_intrinsics(view),
            intensity: encode_intensity(image, mode),
        })
    }

    /// Condition for a frame whose content is unknown (generative frames).
    pub fn for_view(view: &CameraView) -> Result<Self> {
        Ok(Self {
            pose: encode_pose(view)?,
            intrinsics: encode_intrinsics(view),
            intensity: TEST_INTENSITY,
        })
    }

    /// `[z1; z2; z3]`.
    pub fn to_array(&self) -> [f64; CONDITION_DIM] {
        let mut z = [0.0; CONDITION_DIM];
        z[..4].copy_from_slice(&self.pose);
        z[4..8].copy_from_slice(&self.intrinsics);
        z[8..].copy_from_slice(&self.intensity);
        z
    }
}

/// Stacks conditions into an `[N, 10]` tensor.
pub fn condition_matrix<T: Scalar>(conds: &[ConditionVector]) -> Tensor<T> {
    let data: Vec<f64> = conds.iter().flat_map(|c| c.to_array()).collect();
    Tensor::from_f64(&[conds.len(), CONDITION_DIM], &data)
}

/// `(sin az, cos az, elevation, radius)` of the camera center, azimuth
/// measured from +z towards +x about the y axis.
pub fn encode_pose(view: &CameraView) -> Result<[f64; 4]> {
    let c = view.center();
    let radius = c.norm();
    if radius < 1e-12 {
        return invalid("camera at the origin has no azimuth");
    }
    let az = c.x.atan2(c.z);
    let elevation = (c.y / radius).clamp(-1.0, 1.0).asin();
    Ok([az.sin(), az.cos(), elevation, radius])
}

/// `(fx/W, fy/H, cx/W, cy/H)`.
pub fn encode_intrinsics(view: &CameraView) -> [f64; 4] {
    let (h, w) = (view.height() as f64, view.width() as f64);
    [
        view.focal[0] / w,
        view.focal[1] / h,
        view.principal[0] / w,
        view.principal[1] / h,
    ]
}

/// Mean and population variance over all pixels and channels of an image
/// in `[0, 1]`, or the fixed test value.
pub fn encode_intensity<T: Scalar>(image: &Tensor<T>, mode: IntensityMode) -> [f64; 2] {
    match mode {
        IntensityMode::Test => TEST_INTENSITY,
        IntensityMode::Train => {
            let n = image.len().max(1) as f64;
            let mean = image.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
            let var = image
                .data()
                .iter()
                .map(|v| (v.to_f64_lossy() - mean).powi(2))
                .sum::<f64>()
                / n;
            [mean, var]
        }
    }
}

/// Sinusoidal embedding: `dim/2` sines followed by `dim/2` cosines at
/// frequencies `10000^(−k/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return invalid(format!("timestep embedding dim must be even, got {dim}"));
    }
    let half = dim / 2;
    let t = t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    Ok(freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect())
}

/// `[N, dim]` embeddings of per-frame timesteps.
pub fn timestep_matrix<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t, dim)?);
    }
    Ok(Tensor::from_f64(&[ts.len(), dim], &data))
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;

    fn view_at(eye: Vector3<f64>) -> CameraView {
        CameraView::orbit(eye, 32.0, 32).unwrap()
    }

    #[test]
    fn axis_cases() {
        let z = encode_pose(&view_at(Vector3::new(0.0, 0.0, 1.5))).unwrap();
        let want = [0.0, 1.0, 0.0, 1.5];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let x = encode_pose(&view_at(Vector3::new(2.0, 0.0, 0.0))).unwrap();
        for (a, b) in x.iter().zip([1.0, 0.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_matches_spherical_oracle() {
        let c = Vector3::new(0.7, 0.9, -1.1);
        let z = encode_pose(&view_at(c)).unwrap();
        let rho = (c.x * c.x + c.z * c.z).sqrt();
        let oracle = [c.x / rho, c.z / rho, c.y.atan2(rho), c.norm()];
        for (a, b) in z.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12, "{z:?} vs {oracle:?}");
        }
    }

    #[test]
    fn pose_at_origin_rejected() {
        let mut v = view_at(Vector3::new(0.0, 0.0, 1.0));
        v.pose[(2, 3)] = 0.0;
        assert!(encode_pose(&v).is_err());
    }

    #[test]
    fn intrinsics_cases() {
        let v = CameraView::new(nalgebra::Matrix4::identity(), [256.0, 256.0], [128.0, 128.0], [256, 256])
            .unwrap();
        assert_eq!(encode_intrinsics(&v), [1.0, 1.0, 0.5, 0.5]);
        let doubled = CameraView::new(v.pose, [512.0, 512.0], [256.0, 256.0], [512, 512]).unwrap();
        assert_eq!(encode_intrinsics(&doubled), encode_intrinsics(&v));
        let v = CameraView::new(v.pose, [200.0, 300.0], [50.0, 25.0], [100, 100]).unwrap();
        assert_eq!(encode_intrinsics(&v), [2.0, 3.0, 0.5, 0.25]);
    }

    #[test]
    fn intensity_cases() {
        let gray = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        assert_eq!(encode_intensity(&gray, IntensityMode::Train), [0.5, 0.0]);
        let half = Tensor::<f32>::from_fn(&[3, 4, 4], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert_eq!(encode_intensity(&half, IntensityMode::Train), [0.5, 0.25]);
        let noisy = Tensor::<f32>::from_fn(&[3, 2, 2], |i| (i as f32 * 0.37).fract());
        assert_eq!(encode_intensity(&noisy, IntensityMode::Test), [0.5, 0.0]);
    }

    #[test]
    fn condition_concatenates() {
        let v = view_at(Vector3::new(1.0, 0.5, 1.0));
        let img = Tensor::<f64>::full(&[3, 32, 32], 0.25);
        let c = ConditionVector::build(&v, &img, IntensityMode::Train).unwrap();
        let z = c.to_array();
        assert_eq!(&z[..4], &encode_pose(&v).unwrap());
        assert_eq!(&z[4..8], &encode_intrinsics(&v));
        assert_eq!(&z[8..], &[0.25, 0.0]);
    }

    #[test]
    fn timestep_cases() {
        let e0 = timestep_embedding(0, 8).unwrap();
        assert_eq!(&e0[..4], &[0.0; 4]);
        assert_eq!(&e0[4..], &[1.0; 4]);
        let e_max = timestep_embedding(1000, 8).unwrap();
        let dist: f64 = e0.iter().zip(&e_max).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
        assert!(timestep_embedding(3, 7).is_err());

        let e = timestep_embedding(17, 8).unwrap();
        for k in 0..4 {
            let f = 1.0 / 10000f64.powf(k as f64 / 4.0);
            assert!((e[k] - (17.0 * f).sin()).abs() < 1e-12);
            assert!((e[k + 4] - (17.0 * f).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn timesteps_distinct_over_schedule() {
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embedding(t, 32).unwrap()).collect();
        for t in 1..embs.len() {
            let d: f64 = embs[t].iter().zip(&embs[t - 1]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 1e-8);
        }
    }
}
