use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use mvdiff::denoiser::{load_checkpoint, sha256_hex, Checkpoint};
use mvdiff::evaluation::experiment::{run_experiment, ExperimentConfig, REPORT_FILE};
use mvdiff::evaluation::verify::{run_suites, Suite};
use mvdiff::generation::{
    generate_conditional, generate_trajectory, generate_unconditional, median_orbit, SamplerConfig, TrajectoryConfig, DEFAULT_LAMBDA,
};
use mvdiff::geometry::load_pose_file;
use mvdiff::synthdata::{load_dataset, load_rgb, make_prior_set, save_rgb, tokenize, write_dataset, IMAGE_SIZE};
use mvdiff::trainer::{Stage, TrainConfig, Trainer};
use mvdiff::{Error, Result, Tensor};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "MVDIFF_THREADS";
const COMMAND_FILE: &str = "command.json";

#[derive(Parser)]
#[command(name = "mvdiff", version, about = "Joint multi-view diffusion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view corpus.
    Dataset {
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = IMAGE_SIZE)]
        size: usize,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the single-image stage or the joint multi-view stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage-2d checkpoint to start the multi-view stage from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON camera file; in cond mode the first entries belong to the
        /// conditioning images.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cond_images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        lambda: Option<f64>,
        /// Disable reverse-process noise.
        #[arg(long)]
        deterministic: bool,
    },
    /// Run invariant suites and print a JSON report.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score the full model and its ablations on held-out scenes.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        /// TOML overrides of the experiment settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "2d")]
    TwoD,
    Mv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uncond,
    Cond,
    Trajectory,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Geometry,
    Render,
    Gradcheck,
    Diffusion,
    All,
}

impl SuiteArg {
    fn name(self) -> &'static str {
        match self {
            SuiteArg::Geometry => "geometry",
            SuiteArg::Render => "render",
            SuiteArg::Gradcheck => "gradcheck",
            SuiteArg::Diffusion => "diffusion",
            SuiteArg::All => "all",
        }
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn write_command(dir: &Path, record: serde_json::Value) -> Result<()> {
    fs::write(dir.join(COMMAND_FILE), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn dataset(scenes: usize, out: &Path, seed: u64, size: usize, force: bool) -> Result<ExitCode> {
    if is_nonempty_dir(out) {
        if !force {
            return Err(Error::InvalidInput(format!(
                "{} exists and is not empty; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    if scenes == 0 {
        warn!("writing an empty dataset");
    }
    write_dataset(out, scenes, seed, size)?;
    write_command(out, json!({"command": "dataset", "scenes": scenes, "seed": seed, "size": size}))?;
    info!("wrote {scenes} scenes to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(stage: StageArg, data: &Path, config: Option<&Path>, out: &Path, init: Option<&Path>, resume: bool) -> Result<ExitCode> {
    let (cfg, config_file_sha256) = match config {
        Some(p) => (TrainConfig::load(p)?, Some(file_hash(p)?)),
        None => (TrainConfig::default(), None),
    };
    let scenes = load_dataset(data)?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput(format!("no scenes under {}", data.display())));
    }
    let (mut trainer, prior, init_hash) = match stage {
        StageArg::TwoD => (Trainer::<f32>::fresh(Stage::TwoD, cfg.clone())?, None, None),
        StageArg::Mv => {
            let init = init.ok_or_else(|| Error::InvalidInput("--stage mv requires --init <stage-2d checkpoint>".into()))?;
            let hash = load_checkpoint::<f32>(init)?.manifest.params_sha256;
            let trainer = Trainer::<f32>::from_init(cfg.clone(), init)?;
            let specs: Vec<_> = scenes.iter().map(|s| s.spec.clone()).collect();
            let prior = if cfg.prior_weight > 0.0 && cfg.prior_count > 0 {
                info!("sampling {} prior images", cfg.prior_count);
                Some(make_prior_set::<f32>(init, cfg.prior_count, &specs, cfg.prior_steps, cfg.seed)?)
            } else {
                None
            };
            (trainer, prior, Some(hash))
        }
    };
    if resume {
        trainer.resume(out)?;
        info!("resuming at step {}", trainer.step);
    }
    fs::create_dir_all(out)?;
    write_command(
        out,
        json!({
            "command": "train",
            "stage": trainer.stage,
            "data": data,
            "config_file": config,
            "config_file_sha256": config_file_sha256,
            "config_sha256": cfg.hash(),
            "config": cfg,
            "seed": cfg.seed,
            "init": init,
            "init_params_sha256": init_hash,
        }),
    )?;
    trainer.run(&scenes, prior.as_ref(), Some(out))?;
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    mode: Mode,
    ckpt: &Path,
    poses: &Path,
    caption: &str,
    out: &Path,
    cond_images: &[PathBuf],
    seed: u64,
    steps: usize,
    lambda: Option<f64>,
    deterministic: bool,
) -> Result<ExitCode> {
    let Checkpoint { model, manifest } = load_checkpoint::<f32>(ckpt)?;
    let schedule = manifest.schedule.build()?;
    let views = load_pose_file(poses)?;
    let tokens = tokenize(caption)?;
    let lambda = lambda.unwrap_or(DEFAULT_LAMBDA);
    let max = model.config().max_frames;
    let check_frames = |n: usize| {
        if n > max {
            Err(Error::InvalidInput(format!("{n} frames exceed the model maximum of {max}")))
        } else {
            Ok(())
        }
    };
    let cfg = SamplerConfig {
        steps,
        lambda_cfg: lambda,
        deterministic,
        seed,
        clip_x0: true,
    };
    let mut batches = serde_json::Value::Null;
    let images: Vec<Tensor<f32>> = match mode {
        Mode::Uncond => {
            check_frames(views.len())?;
            generate_unconditional(&model, &schedule, &views, &tokens, &cfg)?
        }
        Mode::Cond => {
            check_frames(views.len())?;
            if cond_images.is_empty() || cond_images.len() >= views.len() {
                return Err(Error::InvalidInput(
                    "cond mode needs --cond-images and more poses than conditioning images".into(),
                ));
            }
            let cond = cond_images
                .iter()
                .zip(&views)
                .map(|(p, v)| Ok((load_rgb(p)?.cast::<f32>(), v.clone())))
                .collect::<Result<Vec<_>>>()?;
            generate_conditional(&model, &schedule, &cond, &views[cond.len()..], &tokens, &cfg)?
        }
        Mode::Trajectory => {
            let tc = TrajectoryConfig {
                first_lambda: lambda,
                steps,
                deterministic,
                seed,
                ..TrajectoryConfig::default()
            };
            let t = generate_trajectory(&model, &schedule, &views, &tokens, &tc)?;
            let (elevation, radius) = median_orbit(&views);
            batches = json!({"median_elevation": elevation, "median_radius": radius, "batches": t.batches});
            t.images
        }
    };
    fs::create_dir_all(out)?;
    let mut files = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let name = format!("frame_{k:03}.png");
        save_rgb(&out.join(&name), &img.cast::<f64>())?;
        files.push(name);
    }
    let cond_hashes = cond_images.iter().map(|p| file_hash(p)).collect::<Result<Vec<_>>>()?;
    write_command(
        out,
        json!({
            "command": "sample",
            "mode": match mode { Mode::Uncond => "uncond", Mode::Cond => "cond", Mode::Trajectory => "trajectory" },
            "ckpt": ckpt,
            "params_sha256": manifest.params_sha256,
            "config_sha256": manifest.extra.get("config_sha256"),
            "poses": poses,
            "poses_sha256": file_hash(poses)?,
            "caption": caption,
            "cond_images": cond_images,
            "cond_images_sha256": cond_hashes,
            "seed": seed,
            "steps": steps,
            "lambda": lambda,
            "deterministic": deterministic,
            "frames": files,
            "batches": batches,
        }),
    )?;
    info!("wrote {} images to {}", images.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn verify(suite: SuiteArg, report: Option<&Path>) -> Result<ExitCode> {
    let suites = Suite::parse(suite.name())?;
    let r = run_suites(&suites);
    let text = serde_json::to_string_pretty(&r)?;
    println!("{text}");
    if let Some(p) = report {
        fs::write(p, &text)?;
    }
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn experiment(out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let r = run_experiment(out, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    info!("report written to {}", out.join(REPORT_FILE).display());
    Ok(if r.reconstruction_passed && r.ordering_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("could not size the thread pool: {e}");
            }
        }
        _ => warn!("ignoring {THREADS_ENV}={v:?}; expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset {
            scenes,
            out,
            seed,
            size,
            force,
        } => dataset(*scenes, out, *seed, *size, *force),
        Command::Train {
            stage,
            data,
            config,
            out,
            init,
            resume,
        } => train(*stage, data, config.as_deref(), out, init.as_deref(), *resume),
        Command::Sample {
            mode,
            ckpt,
            poses,
            caption,
            out,
            cond_images,
            seed,
            steps,
            lambda,
            deterministic,
        } => sample(
            *mode,
            ckpt,
            poses,
            caption,
            out,
            cond_images,
            *seed,
            *steps,
            *lambda,
            *deterministic,
        ),
        Command::Verify { suite, report } => verify(*suite, report.as_deref()),
        Command::Experiment { out, config } => experiment(out, config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::UndefinedMetric(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
