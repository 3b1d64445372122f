//! Procedural multi-view scenes: one primitive on a textured floor, a
//! 24-pose turn-table ring, exact depth and masks, and templated captions.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionVector, IntensityMode};
use crate::error::{invalid, Error, Result};
use crate::geometry::{pixel_direction, Aabb, CameraRecord, CameraView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RING_POSES: usize = 24;
pub const ELEVATION_DEG: [f64; 2] = [10.0, 40.0];
pub const RADIUS: [f64; 2] = [1.2, 1.8];
pub const IMAGE_SIZE: usize = 32;
/// Focal length as a multiple of the image width (about 53° field of view).
pub const FOCAL_FACTOR: f64 = 1.0;
/// Fraction of training draws that drop the caption.
pub const EMPTY_CAPTION_RATE: f64 = 0.1;
/// Depth PNGs store `round(depth / DEPTH_UNIT)` as 16-bit integers.
pub const DEPTH_UNIT: f64 = 1e-4;
pub const SKY: [f64; 3] = [0.62, 0.72, 0.88];
const AMBIENT: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Cube,
    Sphere,
    Cylinder,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Cube, Primitive::Sphere, Primitive::Cylinder];

    pub fn word(self) -> &'static str {
        match self {
            Primitive::Cube => "cube",
            Primitive::Sphere => "sphere",
            Primitive::Cylinder => "cylinder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorTexture {
    Checker,
    Stripes,
    Plain,
}

impl FloorTexture {
    pub const ALL: [FloorTexture; 3] = [FloorTexture::Checker, FloorTexture::Stripes, FloorTexture::Plain];

    pub fn word(self) -> &'static str {
        match self {
            FloorTexture::Checker => "checker",
            FloorTexture::Stripes => "striped",
            FloorTexture::Plain => "plain",
        }
    }

    fn albedo(self, x: f64, z: f64) -> [f64; 3] {
        let light = [0.78, 0.76, 0.72];
        let dark = [0.32, 0.30, 0.28];
        let tile = 0.25;
        let on = match self {
            FloorTexture::Checker => ((x / tile).floor() + (z / tile).floor()).rem_euclid(2.0) < 1.0,
            FloorTexture::Stripes => (x / tile).floor().rem_euclid(2.0) < 1.0,
            FloorTexture::Plain => true,
        };
        if on {
            light
        } else {
            dark
        }
    }
}

/// Named object colors; captions use the name.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.3, 0.85]),
    ("yellow", [0.9, 0.82, 0.15]),
    ("cyan", [0.15, 0.75, 0.8]),
    ("magenta", [0.8, 0.2, 0.7]),
    ("white", [0.92, 0.92, 0.92]),
    ("orange", [0.95, 0.5, 0.1]),
];

/// Caption templates over the fixed vocabulary.
pub const TEMPLATES: [&str; 2] = ["{color} {object} on {texture} floor", "a {color} {object}"];

/// Every caption word. Token ids are indices into this list.
pub const VOCABULARY: [&str; 18] = [
    "a", "on", "floor", "cube", "sphere", "cylinder", "checker", "striped", "plain", "red", "green", "blue",
    "yellow", "cyan", "magenta", "white", "orange", "object",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitive: Primitive,
    pub color: [f64; 3],
    /// Half extent of the object; the object rests on the floor at `y = −size`.
    pub size: f64,
    pub texture: FloorTexture,
    /// Unit direction towards the light.
    pub light: [f64; 3],
    pub template: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn random<R: Rng>(rng: &mut R, seed: u64) -> Self {
        let (_, color) = PALETTE[rng.random_range(0..PALETTE.len())];
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.random_range(0.6..1.3);
        Self {
            primitive: Primitive::ALL[rng.random_range(0..3)],
            color,
            size: rng.random_range(0.2..0.35),
            texture: FloorTexture::ALL[rng.random_range(0..3)],
            light: [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()],
            template: rng.random_range(0..TEMPLATES.len()),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return invalid("color components must lie in [0, 1]");
        }
        // the half diagonal of a cube must stay inside the unit cube
        if !(self.size > 0.0 && self.size < 0.5) {
            return invalid(format!("object size {} outside (0, 0.5)", self.size));
        }
        let l = Vector3::from(self.light);
        if (l.norm() - 1.0).abs() > 1e-6 {
            return invalid("light direction must be a unit vector");
        }
        if self.template >= TEMPLATES.len() {
            return invalid(format!("unknown caption template {}", self.template));
        }
        Ok(())
    }

    /// Palette name closest to the object color.
    pub fn color_name(&self) -> &'static str {
        let d = |c: &[f64; 3]| (0..3).map(|i| (c[i] - self.color[i]).powi(2)).sum::<f64>();
        PALETTE
            .iter()
            .min_by(|a, b| d(&a.1).total_cmp(&d(&b.1)))
            .map(|p| p.0)
            .expect("palette is non-empty")
    }

    pub fn floor_y(&self) -> f64 {
        -self.size
    }
}

// ---------------------------------------------------------------- captions

pub fn caption_text(spec: &SceneSpec) -> String {
    TEMPLATES[spec.template]
        .replace("{color}", spec.color_name())
        .replace("{object}", spec.primitive.word())
        .replace("{texture}", spec.texture.word())
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            VOCABULARY
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::InvalidInput(format!("word {w:?} not in the caption vocabulary")))
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| VOCABULARY.get(t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn caption_of(spec: &SceneSpec) -> Vec<usize> {
    tokenize(&caption_text(spec)).expect("templates only use vocabulary words")
}

/// Caption for a training draw: empty with probability 0.1.
pub fn training_caption<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<usize> {
    if rng.random_bool(EMPTY_CAPTION_RATE) {
        Vec::new()
    } else {
        caption_of(spec)
    }
}

// ---------------------------------------------------------------- rendering

/// `image` is `[3, H, W]` in `[0, 1]`; `depth` is camera-space z at the first
/// hit (0 for sky); `mask` marks object pixels. Both row-major `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Tensor<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

fn intersect_object(spec: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let r = spec.size;
    match spec.primitive {
        Primitive::Sphere => {
            let b = o.dot(d);
            let c = o.norm_squared() - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t > 0.0).then(|| Hit {
                t,
                normal: (o + d * t) / r,
            })
        }
        Primitive::Cube => {
            let bx = Aabb::new(Vector3::repeat(-r), Vector3::repeat(r));
            let (near, _) = bx.intersect(o, d)?;
            let p = o + d * near;
            let j = p.iamax();
            let mut normal = Vector3::zeros();
            normal[j] = p[j].signum();
            Some(Hit { t: near, normal })
        }
        Primitive::Cylinder => {
            let mut best: Option<Hit> = None;
            let mut consider = |t: f64, normal: Vector3<f64>| {
                if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal });
                }
            };
            let a = d.x * d.x + d.z * d.z;
            if a > 1e-15 {
                let b = o.x * d.x + o.z * d.z;
                let c = o.x * o.x + o.z * o.z - r * r;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let p = o + d * t;
                    if p.y.abs() <= r {
                        consider(t, Vector3::new(p.x, 0.0, p.z) / r);
                    }
                }
            }
            if d.y.abs() > 1e-15 {
                for cap in [-r, r] {
                    let t = (cap - o.y) / d.y;
                    let p = o + d * t;
                    if p.x * p.x + p.z * p.z <= r * r {
                        consider(t, Vector3::new(0.0, cap.signum(), 0.0));
                    }
                }
            }
            best
        }
    }
}

fn shade(albedo: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>, brightness: f64) -> [f64; 3] {
    let s = (AMBIENT + (1.0 - AMBIENT) * normal.dot(light).max(0.0)) * brightness;
    albedo.map(|a| (a * s).clamp(0.0, 1.0))
}

pub fn render_scene(spec: &SceneSpec, view: &CameraView) -> Rendered {
    render_scene_with(spec, view, 1.0)
}

/// Render with a global brightness factor (view-dependent exposure).
pub fn render_scene_with(spec: &SceneSpec, view: &CameraView, brightness: f64) -> Rendered {
    let (h, w) = (view.height(), view.width());
    let origin = view.center();
    let axis = view.optical_axis();
    let light = Vector3::from(spec.light).normalize();
    let mut image = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    for j in 0..h {
        for i in 0..w {
            let d = pixel_direction(view, [i as f64 + 0.5, j as f64 + 0.5]);
            let pix = j * w + i;
            let object = intersect_object(spec, &origin, &d);
            let floor_t = (d.y < -1e-12)
                .then(|| (spec.floor_y() - origin.y) / d.y)
                .filter(|t| *t > 0.0);
            let (color, t) = match (object, floor_t) {
                (Some(hit), ft) if ft.is_none_or(|ft| hit.t <= ft) => {
                    mask[pix] = true;
                    (shade(spec.color, &hit.normal, &light, brightness), hit.t)
                }
                (_, Some(ft)) => {
                    let p = origin + d * ft;
                    (shade(spec.texture.albedo(p.x, p.z), &Vector3::y(), &light, brightness), ft)
                }
                _ => (SKY.map(|c| (c * brightness).clamp(0.0, 1.0)), f64::NAN),
            };
            for c in 0..3 {
                image[c * h * w + pix] = color[c];
            }
            if t.is_finite() {
                depth[pix] = t * d.dot(&axis);
            }
        }
    }
    Rendered {
        image: Tensor::new(&[3, h, w], image),
        depth,
        mask,
    }
}

// ---------------------------------------------------------------- cameras

/// Turn-table ring parameters of one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub elevation_deg: f64,
    pub radius: f64,
    pub azimuth_offset: f64,
}

impl Ring {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            elevation_deg: rng.random_range(ELEVATION_DEG[0]..=ELEVATION_DEG[1]),
            radius: rng.random_range(RADIUS[0]..=RADIUS[1]),
            azimuth_offset: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn views(&self, count: usize, size: usize) -> Result<Vec<CameraView>> {
        (0..count)
            .map(|k| {
                let az = self.azimuth_offset + std::f64::consts::TAU * k as f64 / count as f64;
                orbit_view(az, self.elevation_deg.to_radians(), self.radius, size)
            })
            .collect()
    }
}

/// Camera on a sphere around the origin, looking at it.
pub fn orbit_view(azimuth: f64, elevation: f64, radius: f64, size: usize) -> Result<CameraView> {
    let eye = Vector3::new(
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    );
    CameraView::orbit(eye, FOCAL_FACTOR * size as f64, size)
}

/// Azimuth (radians), elevation (radians) and radius of a camera center.
pub fn spherical_of(view: &CameraView) -> (f64, f64, f64) {
    let c = view.center();
    let r = c.norm();
    ((c.x).atan2(c.z), (c.y / r).asin(), r)
}

/// A pose from the training camera distribution.
pub fn random_training_view<R: Rng>(rng: &mut R, size: usize) -> Result<CameraView> {
    let ring = Ring::random(rng);
    orbit_view(ring.azimuth_offset, ring.elevation_deg.to_radians(), ring.radius, size)
}

// ---------------------------------------------------------------- scenes

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub ring: Ring,
    pub views: Vec<CameraView>,
    pub frames: Vec<Rendered>,
    pub caption: String,
}

impl Scene {
    pub fn generate(spec: SceneSpec, ring: Ring, size: usize) -> Result<Self> {
        spec.validate()?;
        let views = ring.views(RING_POSES, size)?;
        let frames = views.iter().map(|v| render_scene(&spec, v)).collect();
        let caption = caption_text(&spec);
        Ok(Self {
            spec,
            ring,
            views,
            frames,
            caption,
        })
    }

    /// Scene `index` of the corpus seeded by `seed`.
    pub fn from_seed(seed: u64, index: u64, size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let spec = SceneSpec::random(&mut rng, seed.wrapping_mul(1_000_003).wrapping_add(index));
        let ring = Ring::random(&mut rng);
        Self::generate(spec, ring, size)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    Consecutive,
}

/// Ring indices for one training item: with probability 0.5 a uniform
/// draw without replacement, otherwise a wrapping consecutive window.
pub fn select_frames<R: Rng>(ring_len: usize, n: usize, rng: &mut R) -> Result<(Selection, Vec<usize>)> {
    if n == 0 || n > ring_len {
        return invalid(format!("cannot pick {n} frames from a ring of {ring_len}"));
    }
    if rng.random_bool(0.5) {
        Ok((Selection::Random, sample(rng, ring_len, n).into_vec()))
    } else {
        let start = rng.random_range(0..ring_len);
        Ok((Selection::Consecutive, consecutive(start, n, ring_len)))
    }
}

pub fn consecutive(start: usize, n: usize, ring_len: usize) -> Vec<usize> {
    (0..n).map(|k| (start + k) % ring_len).collect()
}

/// One training item.
#[derive(Clone, Debug)]
pub struct FrameSample<T> {
    pub selection: Selection,
    pub indices: Vec<usize>,
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub images: Tensor<T>,
    pub views: Vec<CameraView>,
    pub conditions: Vec<ConditionVector>,
    pub caption: Vec<usize>,
}

pub fn frames_tensor<T: Scalar>(scene: &Scene, indices: &[usize]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = indices.iter().map(|&i| scene.frames[i].image.cast()).collect();
    Tensor::stack(&parts)
}

pub fn sample_training_frames<T: Scalar, R: Rng>(scene: &Scene, n: usize, rng: &mut R) -> Result<FrameSample<T>> {
    let (selection, indices) = select_frames(scene.len(), n, rng)?;
    let views: Vec<CameraView> = indices.iter().map(|&i| scene.views[i].clone()).collect();
    let conditions = indices
        .iter()
        .map(|&i| ConditionVector::build(&scene.views[i], &scene.frames[i].image, IntensityMode::Train))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSample {
        selection,
        images: frames_tensor(scene, &indices),
        indices,
        views,
        conditions,
        caption: training_caption(&scene.spec, rng),
    })
}

// ---------------------------------------------------------------- prior set

/// Single images sampled from the 2D-pretrained model with captions and
/// poses from the training distribution.
#[derive(Clone, Debug)]
pub struct PriorSet<T> {
    /// `[3, H, W]` each, in `[0, 1]`.
    pub images: Vec<Tensor<T>>,
    pub captions: Vec<Vec<usize>>,
    pub views: Vec<CameraView>,
}

impl<T> PriorSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub const PRIOR_SET_SIZE: usize = 300;

/// Samples `count` prior images from the stage-0 checkpoint at `ckpt`.
pub fn make_prior_set<T: Scalar>(
    ckpt: &Path,
    count: usize,
    scenes: &[SceneSpec],
    steps: usize,
    seed: u64,
) -> Result<PriorSet<T>> {
    let loaded = crate::denoiser::load_checkpoint::<T>(ckpt)?;
    let schedule = loaded.manifest.schedule.build()?;
    let size = loaded.model.config().resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PriorSet {
        images: Vec::with_capacity(count),
        captions: Vec::with_capacity(count),
        views: Vec::with_capacity(count),
    };
    for k in 0..count {
        let view = random_training_view(&mut rng, size)?;
        let caption = if scenes.is_empty() {
            Vec::new()
        } else {
            caption_of(&scenes[rng.random_range(0..scenes.len())])
        };
        let out = crate::generation::sample_single(
            &loaded.model,
            &schedule,
            &view,
            &caption,
            steps,
            seed.wrapping_add(k as u64 + 1),
        )?;
        set.images.push(out);
        set.captions.push(caption);
        set.views.push(view);
    }
    Ok(set)
}

// ---------------------------------------------------------------- files

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneMeta {
    spec: SceneSpec,
    ring: Ring,
    depth_unit: f64,
    frames: usize,
}

fn frame_name(kind: &str, i: usize) -> String {
    format!("{kind}_{i:03}.png")
}

pub fn save_rgb(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in scene.frames.iter().enumerate() {
        let (h, w) = (f.image.dim(1), f.image.dim(2));
        save_rgb(&dir.join(frame_name("frame", i)), &f.image)?;
        let depth = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            let d = f.depth[y as usize * w + x as usize];
            Luma([(d / DEPTH_UNIT).round().clamp(0.0, u16::MAX as f64) as u16])
        });
        depth.save(dir.join(frame_name("depth", i)))?;
        let mask = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
            Luma([if f.mask[y as usize * w + x as usize] { 255 } else { 0 }])
        });
        mask.save(dir.join(frame_name("mask", i)))?;
    }
    let records: Vec<CameraRecord> = scene.views.iter().map(CameraRecord::from).collect();
    fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&records)?)?;
    fs::write(dir.join("caption.txt"), &scene.caption)?;
    let meta = SceneMeta {
        spec: scene.spec.clone(),
        ring: scene.ring,
        depth_unit: DEPTH_UNIT,
        frames: scene.len(),
    };
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(dir.join("cameras.json"))?)?;
    let views = records.iter().map(CameraView::try_from).collect::<Result<Vec<_>>>()?;
    if views.len() != meta.frames {
        return invalid(format!("{}: camera count differs from frame count", dir.display()));
    }
    let mut frames = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        let image = load_rgb(&dir.join(frame_name("frame", i)))?;
        let depth = image::open(dir.join(frame_name("depth", i)))?
            .to_luma16()
            .pixels()
            .map(|p| p[0] as f64 * meta.depth_unit)
            .collect();
        let mask = image::open(dir.join(frame_name("mask", i)))?
            .to_luma8()
            .pixels()
            .map(|p| p[0] > 127)
            .collect();
        frames.push(Rendered { image, depth, mask });
    }
    Ok(Scene {
        spec: meta.spec,
        ring: meta.ring,
        views,
        frames,
        caption: fs::read_to_string(dir.join("caption.txt"))?,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Generates and writes `count` scenes under `root`.
pub fn write_dataset(root: &Path, count: usize, seed: u64, size: usize) -> Result<Vec<Scene>> {
    fs::create_dir_all(root)?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let scene = Scene::from_seed(seed, i as u64, size)?;
        write_scene(&scene_dir(root, i), &scene)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}
