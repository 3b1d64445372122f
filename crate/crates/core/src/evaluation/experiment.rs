//! Scaled single-image reconstruction experiment: a shared 2D stage, three
//! multi-view variants (full, no cross-frame attention, no projection) and
//! an untrained baseline, all scored on held-out scenes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{masked_psnr, reprojection_consistency, ViewGeometry};
use crate::denoiser::{load_checkpoint, Model, MANIFEST_FILE};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::generation::{generate_conditional, SamplerConfig};
use crate::synthdata::{caption_of, make_prior_set, Scene, SceneSpec};
use crate::trainer::{Stage, TrainConfig, Trainer};

pub const REPORT_FILE: &str = "report.json";
/// Required masked-PSNR gain of the full model over the untrained baseline.
pub const PSNR_GAIN_DB: f64 = 5.0;
/// Required relative reprojection-error reduction against the no-projection
/// ablation.
pub const CONSISTENCY_GAIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenes: usize,
    pub held_out: usize,
    pub image_size: usize,
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub stage0_lr: f64,
    pub stage1_lr: f64,
    pub batch_size: usize,
    pub frames: usize,
    pub render_samples: usize,
    pub prior_count: usize,
    pub prior_steps: usize,
    /// Conditioning frames and generated frames per evaluation set.
    pub n_cond: usize,
    pub n_gen: usize,
    pub sample_steps: usize,
    pub lambda_cfg: f64,
    pub model: String,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 64,
            held_out: 8,
            image_size: 32,
            stage0_steps: 6000,
            stage1_steps: 3000,
            stage0_lr: 1e-3,
            stage1_lr: 3e-4,
            batch_size: 1,
            frames: 5,
            render_samples: 8,
            prior_count: 64,
            prior_steps: 20,
            n_cond: 1,
            n_gen: 4,
            sample_steps: 50,
            lambda_cfg: 1.0,
            model: "toy".into(),
            checkpoint_every: 250,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            steps: match stage {
                Stage::TwoD => self.stage0_steps,
                Stage::Mv => self.stage1_steps,
            },
            seed: self.seed,
            batch_size: self.batch_size,
            frames: self.frames,
            lr_base: match stage {
                Stage::TwoD => self.stage0_lr,
                Stage::Mv => self.stage1_lr,
            },
            prior_count: self.prior_count,
            prior_steps: self.prior_steps,
            checkpoint_every: self.checkpoint_every,
            log_every: 25,
            model: self.model.clone(),
            render_samples: Some(self.render_samples),
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoCfa,
    NoProj,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCfa, Variant::NoProj];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCfa => "no-cfa",
            Variant::NoProj => "no-proj",
        }
    }

    fn apply(self, c: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::NoCfa => c.cross_frame = false,
            Variant::NoProj => c.projection = false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub name: String,
    /// Mean masked PSNR of generated frames against ground truth.
    pub psnr: f64,
    /// Mean reprojection error over each generated set (conditioning frames
    /// included).
    pub consistency: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub baseline: Scores,
    pub variants: Vec<Scores>,
    pub psnr_gain_db: f64,
    pub consistency_gain: f64,
    pub reconstruction_passed: bool,
    pub ordering_passed: bool,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&Scores> {
        self.variants.iter().find(|s| s.name == v.name())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn has_checkpoint(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists()
}

/// Runs (or continues) a stage in `dir`; a finished run is left untouched.
fn train_stage(dir: &Path, mut trainer: Trainer<f32>, scenes: &[Scene], prior: Option<&crate::synthdata::PriorSet<f32>>) -> Result<()> {
    if has_checkpoint(dir) {
        trainer.resume(dir)?;
        if trainer.step >= trainer.config.steps {
            info!("{} already trained to step {}", dir.display(), trainer.step);
            return Ok(());
        }
        info!("resuming {} at step {}", dir.display(), trainer.step);
    }
    trainer.run(scenes, prior, Some(dir))?;
    Ok(())
}

/// Held-out evaluation sets: the first `n_cond` conditioning frames and
/// `n_gen` targets evenly spread around the rest of the ring.
pub fn evaluation_indices(ring: usize, n_cond: usize, n_gen: usize) -> Vec<usize> {
    let n = n_cond + n_gen;
    (0..n).map(|k| k * ring / n).collect()
}

pub fn score_model(
    name: &str,
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    scenes: &[Scene],
    cfg: &ExperimentConfig,
) -> Result<Scores> {
    let start = Instant::now();
    let (mut psnr, mut count, mut cons) = (0.0, 0, 0.0);
    for (s, scene) in scenes.iter().enumerate() {
        let idx = evaluation_indices(scene.len(), cfg.n_cond, cfg.n_gen);
        let (ci, gi) = idx.split_at(cfg.n_cond);
        let cond: Vec<_> = ci.iter().map(|&i| (scene.frames[i].image.cast::<f32>(), scene.views[i].clone())).collect();
        let targets: Vec<_> = gi.iter().map(|&i| scene.views[i].clone()).collect();
        let sampler = SamplerConfig {
            steps: cfg.sample_steps,
            lambda_cfg: cfg.lambda_cfg,
            deterministic: false,
            seed: cfg.seed.wrapping_add(s as u64),
            clip_x0: true,
        };
        let out = generate_conditional(model, schedule, &cond, &targets, &caption_of(&scene.spec), &sampler)?;
        let out: Vec<_> = out.iter().map(|t| t.cast::<f64>()).collect();
        for (img, &i) in out.iter().zip(gi) {
            psnr += masked_psnr(img, &scene.frames[i].image, &scene.frames[i].mask)?;
            count += 1;
        }
        let mut images: Vec<_> = ci.iter().map(|&i| scene.frames[i].image.clone()).collect();
        images.extend(out);
        let views: Vec<_> = idx.iter().map(|&i| scene.views[i].clone()).collect();
        let geometry: Vec<_> = idx
            .iter()
            .map(|&i| ViewGeometry {
                depth: scene.frames[i].depth.clone(),
                mask: scene.frames[i].mask.clone(),
            })
            .collect();
        cons += reprojection_consistency(&images, &views, &geometry)?;
    }
    let scores = Scores {
        name: name.to_string(),
        psnr: psnr / count.max(1) as f64,
        consistency: cons / scenes.len().max(1) as f64,
        seconds: start.elapsed().as_secs_f64(),
    };
    info!("{name}: psnr {:.2} dB, reprojection error {:.4}", scores.psnr, scores.consistency);
    Ok(scores)
}

pub fn run_experiment(root: &Path, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.held_out == 0 || cfg.held_out >= cfg.scenes {
        return crate::error::invalid("need at least one training and one held-out scene");
    }
    fs::create_dir_all(root)?;
    fs::write(root.join("experiment.toml"), toml::to_string(cfg).expect("config serializes"))?;
    let scenes: Vec<Scene> = (0..cfg.scenes as u64)
        .map(|i| Scene::from_seed(cfg.seed, i, cfg.image_size))
        .collect::<Result<_>>()?;
    let (train, test) = scenes.split_at(cfg.scenes - cfg.held_out);
    let specs: Vec<SceneSpec> = train.iter().map(|s| s.spec.clone()).collect();

    let stage0 = root.join("stage0");
    let base = cfg.train_config(Stage::TwoD);
    train_stage(&stage0, Trainer::fresh(Stage::TwoD, base.clone())?, train, None)?;

    let prior = if cfg.prior_count > 0 {
        info!("sampling {} prior images", cfg.prior_count);
        Some(make_prior_set::<f32>(&stage0, cfg.prior_count, &specs, cfg.prior_steps, cfg.seed)?)
    } else {
        None
    };

    let mut dirs: Vec<(Variant, PathBuf)> = Vec::new();
    for v in Variant::ALL {
        let mut tc = cfg.train_config(Stage::Mv);
        v.apply(&mut tc);
        let dir = root.join(v.name());
        info!("stage 1: {}", v.name());
        train_stage(&dir, Trainer::from_init(tc, &stage0)?, train, prior.as_ref())?;
        dirs.push((v, dir));
    }

    let schedule = base.schedule_spec().build()?;
    let untrained = Model::<f32>::new(&cfg.train_config(Stage::Mv).model_config()?, cfg.seed)?;
    let baseline = score_model("untrained", &untrained, &schedule, test, cfg)?;
    let mut variants = Vec::new();
    for (v, dir) in &dirs {
        let ck = load_checkpoint::<f32>(dir)?;
        variants.push(score_model(v.name(), &ck.model, &schedule, test, cfg)?);
    }
    let report = assemble_report(cfg.clone(), baseline, variants);
    fs::write(root.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn assemble_report(config: ExperimentConfig, baseline: Scores, variants: Vec<Scores>) -> ExperimentReport {
    let get = |n: &str| variants.iter().find(|s| s.name == n).cloned();
    let (full, nocfa, noproj) = (get("full"), get("no-cfa"), get("no-proj"));
    let psnr_gain_db = full.as_ref().map_or(f64::NAN, |f| f.psnr - baseline.psnr);
    let consistency_gain = match (&full, &noproj) {
        (Some(f), Some(p)) => (p.consistency - f.consistency) / p.consistency,
        _ => f64::NAN,
    };
    let ordering_passed = match (&full, &nocfa, &noproj) {
        (Some(f), Some(c), Some(p)) => f.psnr >= c.psnr && c.psnr >= p.psnr,
        _ => false,
    };
    ExperimentReport {
        config,
        baseline,
        variants,
        psnr_gain_db,
        consistency_gain,
        reconstruction_passed: psnr_gain_db >= PSNR_GAIN_DB && consistency_gain >= CONSISTENCY_GAIN,
        ordering_passed,
    }
}
