//! Pinhole cameras, pose normalization, projection and ray generation.
//!
//! Conventions: the world is y-up, cameras follow the OpenCV convention
//! (x right, y down, z forward), and pixel `(i, j)` covers `[i, i+1)×[j, j+1)`
//! so its center sits at `(i + 0.5, j + 0.5)`. The foreground region is the
//! cube `[-0.5, 0.5]³`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CUBE_HALF: f64 = 0.5;
const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    /// World-to-camera rigid transform.
    pub pose: Matrix4<f64>,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    /// `(H, W)` in pixels.
    pub resolution: [usize; 2],
}

impl CameraView {
    pub fn new(
        pose: Matrix4<f64>,
        focal: [f64; 2],
        principal: [f64; 2],
        resolution: [usize; 2],
    ) -> Result<Self> {
        let view = Self {
            pose,
            focal,
            principal,
            resolution,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > ORTHO_TOL {
            return invalid("camera rotation is not orthonormal");
        }
        if r.determinant() <= 0.0 {
            return invalid("camera rotation has negative determinant");
        }
        let bottom = self.pose.fixed_view::<1, 4>(3, 0);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return invalid("pose is not a rigid 4x4 transform");
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return invalid("focal lengths must be positive");
        }
        let [h, w] = self.resolution;
        if h == 0 || w == 0 {
            return invalid("empty resolution");
        }
        let [cx, cy] = self.principal;
        if !(0.0..w as f64).contains(&cx) || !(0.0..h as f64).contains(&cy) {
            return invalid("principal point outside the image");
        }
        if !self.pose.iter().all(|v| v.is_finite()) {
            return invalid("non-finite pose");
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is a world direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: [f64; 2],
        principal: [f64; 2],
        resolution: [usize; 2],
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("eye coincides with target".into()))?;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // looking along `up`: pick any perpendicular
            right = forward.cross(&Vector3::new(0.0, 0.0, 1.0));
            if right.norm() < 1e-9 {
                right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        Self::new(compose(&rot, &t), focal, principal, resolution)
    }

    /// Square image, centered principal point, focal given in pixels.
    pub fn orbit(eye: Vector3<f64>, focal: f64, size: usize) -> Result<Self> {
        let c = size as f64 / 2.0;
        Self::look_at(
            eye,
            Vector3::zeros(),
            Vector3::y(),
            [focal, focal],
            [c, c],
            [size, size],
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// World direction of the camera's +z axis.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().transpose() * Vector3::z()
    }

    pub fn height(&self) -> usize {
        self.resolution[0]
    }

    pub fn width(&self) -> usize {
        self.resolution[1]
    }

    /// Same camera with intrinsics rescaled to an `h × w` feature map.
    pub fn rescaled(&self, h: usize, w: usize) -> Self {
        let sx = w as f64 / self.width() as f64;
        let sy = h as f64 / self.height() as f64;
        Self {
            pose: self.pose,
            focal: [self.focal[0] * sx, self.focal[1] * sy],
            principal: [self.principal[0] * sx, self.principal[1] * sy],
            resolution: [h, w],
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

pub(crate) fn compose(rot: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Result of projecting a world point. `pixel` is meaningless when
/// [`Projection::is_behind`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Projection {
    pub fn is_behind(&self) -> bool {
        self.depth <= 0.0
    }
}

pub fn project(point: &Vector3<f64>, view: &CameraView) -> Projection {
    let pc = view.to_camera(point);
    let depth = pc.z;
    if depth == 0.0 {
        return Projection {
            pixel: [f64::NAN; 2],
            depth,
        };
    }
    Projection {
        pixel: [
            view.focal[0] * pc.x / depth + view.principal[0],
            view.focal[1] * pc.y / depth + view.principal[1],
        ],
        depth,
    }
}

pub fn unproject_pixel(pixel: [f64; 2], depth: f64, view: &CameraView) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return invalid(format!("unproject needs positive depth, got {depth}"));
    }
    let pc = Vector3::new(
        (pixel[0] - view.principal[0]) / view.focal[0] * depth,
        (pixel[1] - view.principal[1]) / view.focal[1] * depth,
        depth,
    );
    Ok(view.rotation().transpose() * (pc - view.translation()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn unit_cube() -> Self {
        Self::new(Vector3::repeat(-CUBE_HALF), Vector3::repeat(CUBE_HALF))
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        std::array::from_fn(|i| {
            Vector3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            )
        })
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }

    /// Slab intersection of the ray `origin + t·dir`, clipped to `t ≥ 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Isotropic similarity `x ↦ scale · (R x − offset)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub offset: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation * p - self.offset) * self.scale
    }

    /// Axis-aligned bounds of the transformed box.
    pub fn apply_to_box(&self, b: &Aabb) -> Aabb {
        let c = b.corners().map(|c| self.apply(&c));
        let (mut lo, mut hi) = (c[0], c[0]);
        for p in &c[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Aabb::new(lo, hi)
    }

    /// The same physical camera expressed in the transformed world.
    pub fn apply_to_view(&self, view: &CameraView) -> CameraView {
        let r = view.rotation() * self.rotation.transpose();
        let t = (r * self.offset + view.translation()) * self.scale;
        CameraView {
            pose: compose(&r, &t),
            ..view.clone()
        }
    }
}

/// Similarity that levels the camera-center plane to `y = const` and maps
/// `object_bounds` into the foreground cube.
pub fn normalization_transform(views: &[CameraView], object_bounds: &Aabb) -> Result<Similarity> {
    if views.is_empty() {
        return invalid("normalize_poses needs at least one view");
    }
    let ext = object_bounds.extent();
    if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) || !ext.iter().all(|v| v.is_finite()) {
        return invalid("object bounds have zero volume");
    }
    let centers: Vec<Vector3<f64>> = views.iter().map(CameraView::center).collect();
    let rotation = match plane_normal(&centers) {
        Some(n) => {
            let n = if n.y < 0.0 { -n } else { n };
            Rotation3::rotation_between(&n, &Vector3::y())
                .map(|r| r.into_inner())
                .unwrap_or_else(Matrix3::identity)
        }
        None => Matrix3::identity(),
    };
    let rotated = Similarity {
        rotation,
        offset: Vector3::zeros(),
        scale: 1.0,
    }
    .apply_to_box(object_bounds);
    let offset = rotated.center();
    let scale = 2.0 * CUBE_HALF / rotated.extent().max();
    Ok(Similarity {
        rotation,
        offset,
        scale,
    })
}

/// Least-squares plane normal of the points, or `None` when the plane is
/// undetermined and the identity rotation should be kept.
fn plane_normal(points: &[Vector3<f64>]) -> Option<Unit<Vector3<f64>>> {
    if points.len() < 2 {
        return None;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let scale = cov.trace();
    if scale < 1e-18 {
        return None;
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if middle < 1e-12 * scale {
        // collinear centers: level the line while keeping it horizontal
        let dir = eig.eigenvectors.column(order[2]).into_owned();
        let n = dir.cross(&Vector3::y()).cross(&dir);
        return Unit::try_new(n, 1e-12);
    }
    let _ = smallest;
    let n = eig.eigenvectors.column(order[0]).into_owned();
    // snap exact axis alignment so already-level rings stay untouched
    let mut n = Unit::new_normalize(n).into_inner();
    for v in n.iter_mut() {
        if v.abs() < 1e-12 {
            *v = 0.0;
        }
    }
    Unit::try_new(n, 1e-12)
}

/// Applies [`normalization_transform`] to every view.
pub fn normalize_poses(views: &[CameraView], object_bounds: &Aabb) -> Result<Vec<CameraView>> {
    let sim = normalization_transform(views, object_bounds)?;
    Ok(views.iter().map(|v| sim.apply_to_view(v)).collect())
}

/// Rays for one pixel: the foreground segment through the cube (absent when
/// the ray misses it) and the background segment behind it.
#[derive(Clone, Copy, Debug)]
pub struct PixelRays {
    pub foreground: Option<Ray>,
    pub background: Ray,
}

/// Smallest start distance of a background segment.
const MIN_BACKGROUND_NEAR: f64 = 1e-3;

pub fn pixel_direction(view: &CameraView, pixel: [f64; 2]) -> Vector3<f64> {
    let d = Vector3::new(
        (pixel[0] - view.principal[0]) / view.focal[0],
        (pixel[1] - view.principal[1]) / view.focal[1],
        1.0,
    );
    (view.rotation().transpose() * d).normalize()
}

/// One ray pair per pixel center, row-major `H × W`.
pub fn generate_rays(view: &CameraView) -> Vec<PixelRays> {
    let cube = Aabb::unit_cube();
    let origin = view.center();
    let mut rays = Vec::with_capacity(view.height() * view.width());
    for j in 0..view.height() {
        for i in 0..view.width() {
            let dir = pixel_direction(view, [i as f64 + 0.5, j as f64 + 0.5]);
            let foreground = cube.intersect(&origin, &dir).map(|(near, far)| Ray {
                origin,
                direction: dir,
                near,
                far,
            });
            let bg_near = match foreground {
                Some(r) => r.far,
                // closest approach to the cube center
                None => (-origin.dot(&dir)).max(0.0),
            }
            .max(MIN_BACKGROUND_NEAR);
            rays.push(PixelRays {
                foreground,
                background: Ray {
                    origin,
                    direction: dir,
                    near: bg_near,
                    far: f64::INFINITY,
                },
            });
        }
    }
    rays
}

/// Piecewise-projective contraction of unbounded space into `[-2, 2]³`:
/// identity inside the unit ∞-ball, otherwise the dominant coordinate maps
/// to `sign·(2 − 1/|x_j|)` and the others to `x_i / |x_j|`.
pub fn contract(x: &Vector3<f64>) -> Vector3<f64> {
    let norm = x.amax();
    if norm <= 1.0 {
        return *x;
    }
    let j = x.iamax();
    let mut out = x / norm;
    out[j] = x[j].signum() * (2.0 - 1.0 / norm);
    out
}

/// Inverse of [`contract`] on the open box `(-2, 2)³`.
pub fn uncontract(c: &Vector3<f64>) -> Vector3<f64> {
    let norm = c.amax();
    if norm <= 1.0 {
        return *c;
    }
    let j = c.iamax();
    let mag = 1.0 / (2.0 - norm);
    let mut out = c * mag;
    out[j] = c[j].signum() * mag;
    out
}

/// Scene coordinates are doubled before contraction so the foreground cube
/// coincides with the contraction's identity region.
pub const CONTRACTION_SCALE: f64 = 1.0 / CUBE_HALF;

/// Camera record as stored in pose files and dataset camera files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// World-to-camera 4×4, row-major.
    pub pose: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

impl From<&CameraView> for CameraRecord {
    fn from(v: &CameraView) -> Self {
        // row-major
        let pose = (0..16).map(|i| v.pose[(i / 4, i % 4)]).collect();
        Self {
            pose,
            fx: v.focal[0],
            fy: v.focal[1],
            cx: v.principal[0],
            cy: v.principal[1],
            h: v.resolution[0],
            w: v.resolution[1],
        }
    }
}

impl TryFrom<&CameraRecord> for CameraView {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        if r.pose.len() != 16 {
            return invalid(format!("pose must have 16 entries, got {}", r.pose.len()));
        }
        let pose = Matrix4::from_fn(|i, j| r.pose[i * 4 + j]);
        CameraView::new(pose, [r.fx, r.fy], [r.cx, r.cy], [r.h, r.w])
    }
}

pub fn load_pose_file(path: &std::path::Path) -> Result<Vec<CameraView>> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    records.iter().map(CameraView::try_from).collect()
}

pub fn write_pose_file(path: &std::path::Path, views: &[CameraView]) -> Result<()> {
    let records: Vec<CameraRecord> = views.iter().map(CameraRecord::from).collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ring_view(az: f64, el: f64, radius: f64) -> CameraView {
        let eye = Vector3::new(
            radius * el.cos() * az.sin(),
            radius * el.sin(),
            radius * el.cos() * az.cos(),
        );
        CameraView::orbit(eye, 40.0, 32).unwrap()
    }

    #[test]
    fn optical_axis_projection() {
        let view = ring_view(0.7, 0.3, 2.0);
        let p = view.center() + view.optical_axis();
        let pr = project(&p, &view);
        assert!((pr.depth - 1.0).abs() < 1e-12);
        assert!((pr.pixel[0] - view.principal[0]).abs() < 1e-9);
        assert!((pr.pixel[1] - view.principal[1]).abs() < 1e-9);
    }

    #[test]
    fn project_matches_matrix_oracle() {
        let view = CameraView::look_at(
            Vector3::new(0.3, 1.1, -1.7),
            Vector3::new(0.05, -0.1, 0.02),
            Vector3::y(),
            [41.0, 37.5],
            [15.2, 17.9],
            [36, 30],
        )
        .unwrap();
        let p = Vector3::new(0.21, -0.13, 0.34);
        // K·[R|t]·p, then dehomogenize
        let k = nalgebra::Matrix3x4::new(
            41.0, 0.0, 15.2, 0.0, //
            0.0, 37.5, 17.9, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        );
        let h = k * view.pose * p.push(1.0);
        let pr = project(&p, &view);
        assert!((pr.pixel[0] - h.x / h.z).abs() < 1e-10);
        assert!((pr.pixel[1] - h.y / h.z).abs() < 1e-10);
        assert!((pr.depth - h.z).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let view = ring_view(0.0, 0.0, 2.0);
        assert!(project(&(view.center() - view.optical_axis()), &view).is_behind());
        assert!(unproject_pixel([1.0, 1.0], 0.0, &view).is_err());
        assert!(unproject_pixel([1.0, 1.0], -1.0, &view).is_err());
    }

    #[test]
    fn principal_pixel_unprojects_along_axis() {
        let view = ring_view(1.2, 0.4, 1.5);
        let p = unproject_pixel(view.principal, 0.8, &view).unwrap();
        assert!((p - (view.center() + view.optical_axis() * 0.8)).norm() < 1e-12);
    }

    #[test]
    fn corner_pixel_matches_inverse_intrinsics() {
        let view = CameraView::new(
            Matrix4::identity(),
            [50.0, 40.0],
            [16.0, 12.0],
            [24, 32],
        )
        .unwrap();
        let p = unproject_pixel([0.0, 0.0], 2.0, &view).unwrap();
        // K⁻¹ (0, 0, 1) · 2 with K = [[50,0,16],[0,40,12],[0,0,1]]
        let kinv = Matrix3::new(50.0, 0.0, 16.0, 0.0, 40.0, 12.0, 0.0, 0.0, 1.0)
            .try_inverse()
            .unwrap();
        let want = kinv * Vector3::new(0.0, 0.0, 1.0) * 2.0;
        assert!((p - want).norm() < 1e-12);
        assert!((p - Vector3::new(-0.64, -0.6, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn hundred_random_pixels_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let view = ring_view(2.0, 0.5, 1.7);
        for _ in 0..100 {
            let px = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)];
            let d = rng.random_range(0.1..5.0);
            let p = unproject_pixel(px, d, &view).unwrap();
            let pr = project(&p, &view);
            assert!((pr.pixel[0] - px[0]).abs() < 1e-5 && (pr.pixel[1] - px[1]).abs() < 1e-5);
            assert!((pr.depth - d).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_ray_is_optical_axis_and_cube_slab() {
        let view = CameraView::orbit(Vector3::new(0.0, 0.0, 2.0), 32.0, 32).unwrap();
        let rays = generate_rays(&view);
        for r in &rays {
            assert!((r.background.direction.norm() - 1.0).abs() < 1e-6);
        }
        // pixel centers straddle the principal point, so aim exactly at it
        let dir = pixel_direction(&view, view.principal);
        assert!((dir - view.optical_axis()).norm() < 1e-12);
        let (near, far) = Aabb::unit_cube().intersect(&view.center(), &dir).unwrap();
        assert!((near - 1.5).abs() < 1e-12 && (far - 2.5).abs() < 1e-12);
        let center = rays[16 * 32 + 16];
        let fg = center.foreground.unwrap();
        assert!(fg.near < fg.far && (fg.near - 1.5).abs() < 0.01);
        assert!(center.background.near >= fg.far);
    }

    #[test]
    fn normalize_identity_case() {
        let views: Vec<_> = (0..6).map(|i| ring_view(i as f64, 0.0, 1.5)).collect();
        let out = normalize_poses(&views, &Aabb::unit_cube()).unwrap();
        for (a, b) in views.iter().zip(&out) {
            assert!((a.pose - b.pose).abs().max() < 1e-9);
        }
    }

    #[test]
    fn normalize_scales_side_two_box_by_half() {
        let views: Vec<_> = (0..5).map(|i| ring_view(i as f64 * 1.1, 0.0, 3.0)).collect();
        let bounds = Aabb::new(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let out = normalize_poses(&views, &bounds).unwrap();
        for (a, b) in views.iter().zip(&out) {
            assert!((b.translation() - a.translation() * 0.5).norm() < 1e-9);
            assert!((b.rotation() - a.rotation()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn normalize_levels_tilted_ring_and_keeps_relative_poses() {
        let tilt = Rotation3::from_euler_angles(0.4, -0.2, 0.3).into_inner();
        let views: Vec<_> = (0..8)
            .map(|i| {
                let v = ring_view(i as f64 * 0.8, 0.35, 1.6);
                let sim = Similarity {
                    rotation: tilt,
                    offset: Vector3::new(0.3, -0.2, 0.1),
                    scale: 2.5,
                };
                sim.apply_to_view(&v)
            })
            .collect();
        let bounds = Aabb::new(Vector3::new(-0.2, -0.4, -0.3), Vector3::new(0.5, 0.6, 0.2));
        let sim = normalization_transform(&views, &bounds).unwrap();
        let out = normalize_poses(&views, &bounds).unwrap();
        let ys: Vec<f64> = out.iter().map(|v| v.center().y).collect();
        for y in &ys {
            assert!((y - ys[0]).abs() < 1e-9, "centers not level: {ys:?}");
        }
        for c in bounds.corners() {
            assert!(Aabb::unit_cube().contains(&sim.apply(&c), 1e-9));
        }
        let rel = |a: &CameraView, b: &CameraView| a.rotation() * b.rotation().transpose();
        assert!((rel(&views[0], &views[3]) - rel(&out[0], &out[3])).abs().max() < 1e-6);
        // idempotent on the normalized scene
        let cube = sim.apply_to_box(&bounds);
        let twice = normalize_poses(&out, &cube).unwrap();
        for (a, b) in out.iter().zip(&twice) {
            assert!((a.pose - b.pose).abs().max() < 1e-6);
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let views = vec![ring_view(0.0, 0.0, 1.5)];
        let flat = Aabb::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0));
        assert!(matches!(
            normalize_poses(&views, &flat),
            Err(Error::InvalidInput(_))
        ));
        assert!(normalize_poses(&[], &Aabb::unit_cube()).is_err());
    }

    #[test]
    fn contraction_values() {
        assert_eq!(contract(&Vector3::new(0.5, 0.0, 0.0)), Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(contract(&Vector3::new(4.0, 0.0, 0.0)), Vector3::new(1.75, 0.0, 0.0));
        let far = contract(&Vector3::new(1e9, -3e8, 2.0));
        assert!(far.amax() < 2.0 && far.amax() > 2.0 - 1e-8);
        let x = Vector3::new(-3.0, 1.2, 0.4);
        assert!((uncontract(&contract(&x)) - x).norm() < 1e-12);
    }

    #[test]
    fn pose_record_round_trip() {
        let v = ring_view(0.3, 0.2, 1.4);
        let r = CameraRecord::from(&v);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"pose\"") && json.contains("\"H\"") && json.contains("\"fx\""));
        let back = CameraView::try_from(&serde_json::from_str::<CameraRecord>(&json).unwrap()).unwrap();
        assert!((back.pose - v.pose).abs().max() < 1e-15);
    }

    proptest! {
        #[test]
        fn project_unproject_inverse(
            az in 0.0..std::f64::consts::TAU, el in -1.2..1.2f64, radius in 0.5..4.0f64,
            u in 0.0..32.0f64, v in 0.0..32.0f64, d in 0.05..10.0f64,
        ) {
            let view = ring_view(az, el, radius);
            let p = unproject_pixel([u, v], d, &view).unwrap();
            let pr = project(&p, &view);
            prop_assert!((pr.pixel[0] - u).abs() < 1e-5);
            prop_assert!((pr.pixel[1] - v).abs() < 1e-5);
        }

        #[test]
        fn contraction_monotone_bounded(x in -1e6..1e6f64, y in -1e6..1e6f64, z in -1e6..1e6f64) {
            let c = contract(&Vector3::new(x, y, z));
            prop_assert!(c.amax() <= 2.0);
        }
    }
}
