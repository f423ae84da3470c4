//! `splat`: train, render, evaluate and verify Gaussian splatting models.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 verification failure.

mod cameras;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splat_mcmc::oracle::{run_verify, sign_flipped_factor, VerifyOptions};
use splat_mcmc::render::{render, RasterConfig};
use splat_mcmc::scene_io::{
    load_checkpoint, load_dataset, load_scene, write_png, InitMode, SceneMode, TrainConfig,
};
use splat_mcmc::trainer::{evaluate, run_to_dir, write_renders, TrainState};
use splat_mcmc::Error;

#[derive(Parser, Debug)]
#[command(name = "splat", version, about = "Gaussian splatting as MCMC sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit Gaussians to a scene and write checkpoints, metrics and renders.
    Train(TrainArgs),
    /// Render a checkpoint from a list of cameras or from a scene's views.
    Render(RenderArgs),
    /// Score a checkpoint against a scene's images.
    Eval(EvalArgs),
    /// Run the brute-force reference checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

impl From<ModeArg> for SceneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoD => SceneMode::Image2D,
            ModeArg::ThreeD => SceneMode::MultiView,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Ply,
}

/// Every flag overrides the key of the same name (dashes as underscores)
/// in the `--config` file.
#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with any subset of the training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// PNG in 2D mode, transforms manifest or its directory in 3D mode.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long)]
    max_gaussians: Option<usize>,
    #[arg(long)]
    init_count: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    extent_multiplier: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bit-reproducible outputs; wall-clock timings are logged as 0.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    lambda_noise: Option<f64>,
    #[arg(long)]
    lambda_o: Option<f64>,
    #[arg(long)]
    lambda_sigma: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a `*.state.json` checkpoint sidecar.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Checkpoint PLY.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON list of cameras.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    cameras: Option<PathBuf>,
    /// Render the views of this scene instead of a camera list.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "3d")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "3d")]
    mode: ModeArg,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the relocation sweep, one row per (o_old, N) cell.
    #[arg(long)]
    sweep_csv: Option<PathBuf>,
    /// Random scenes for the rasterizer comparison.
    #[arg(long, default_value_t = 50)]
    raster_scenes: usize,
    /// Random scenes for the finite-difference gradient comparison.
    #[arg(long, default_value_t = 20)]
    gradient_scenes: usize,
    #[arg(long, default_value_t = 100)]
    relocation_trials: usize,
    /// Check a covariance factor with flipped signs (should fail).
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verify) => ExitCode::from(3),
    }
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = &a.$field { c.$field = v.clone().into(); })*
        };
    }
    take!(scene, out, points, resume);
    take!(max_gaussians, init_count, extent_multiplier, iters, seed);
    take!(lambda_noise, lambda_o, lambda_sigma, log_every, checkpoint_every);
    if let Some(m) = a.mode {
        c.mode = m.into();
    }
    if let Some(i) = a.init {
        c.init = match i {
            InitArg::Random => InitMode::Random,
            InitArg::Ply => InitMode::Ply,
        };
    }
    c.deterministic |= a.deterministic;
    if c.scene.is_none() {
        return Err(Failure::Usage("no scene given (use --scene or `scene` in the config)".into()));
    }
    if c.out.is_none() {
        return Err(Failure::Usage("no output directory given (use --out or `out` in the config)".into()));
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let config = resolve_config(&a)?;
    let dataset = load_dataset(&config)?;
    let resume = config.resume.as_deref().map(TrainState::load).transpose()?;
    let out = config.out.clone().expect("checked in resolve_config");
    let state = run_to_dir(&dataset, &config, &out, resume)?;
    let report = evaluate(&state.set, &dataset.views, &RasterConfig::default())?;
    let live = splat_mcmc::classify_liveness(&state.set, config.live_threshold).live_count();
    println!(
        "iterations {}  live {live}/{}  mean PSNR {:.4} dB  -> {}",
        state.iteration,
        state.set.len(),
        report.mean_psnr().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), Failure> {
    let set = load_checkpoint(&a.checkpoint)?;
    if let Some(scene) = &a.scene {
        let dataset = load_scene(scene, a.mode.into())?;
        write_renders(&set, &dataset.views, &a.out)?;
        println!("rendered {} views -> {}", dataset.views.len(), a.out.display());
        return Ok(());
    }
    let path = a.cameras.as_deref().expect("clap requires cameras or scene");
    let cams = cameras::load(path)?;
    if cams.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let raster = RasterConfig::default();
    for (k, (name, cam)) in cams.iter().enumerate() {
        let img = render(&set, cam, &raster)?.to_image();
        write_png(&img, &a.out.join(render_file_name(k, name)))?;
    }
    println!("rendered {} cameras -> {}", cams.len(), a.out.display());
    Ok(())
}

fn render_file_name(k: usize, name: &Option<String>) -> String {
    match name {
        Some(n) if is_plain_file_name(n) => format!("{n}.png"),
        _ => format!("{k:04}.png"),
    }
}

fn is_plain_file_name(n: &str) -> bool {
    !n.is_empty() && Path::new(n).file_name().is_some_and(|f| f == n)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let set = load_checkpoint(&a.checkpoint)?;
    let dataset = load_scene(&a.scene, a.mode.into())?;
    let report = evaluate(&set, &dataset.views, &RasterConfig::default())?;
    println!("{:<32} {:>10} {:>8}", "view", "PSNR (dB)", "SSIM");
    for v in &report.views {
        println!("{:<32} {:>10.4} {:>8.4}", v.name, v.psnr, v.ssim);
    }
    if let (Some(p), Some(s)) = (report.mean_psnr(), report.mean_ssim()) {
        println!("{:<32} {p:>10.4} {s:>8.4}", "mean");
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let mut opts = VerifyOptions {
        seed: a.seed,
        raster_scenes: a.raster_scenes,
        gradient_scenes: a.gradient_scenes,
        relocation_trials: a.relocation_trials,
        ..VerifyOptions::default()
    };
    if a.inject_sign_flip {
        opts.factor = &sign_flipped_factor;
    }
    let report = run_verify(&opts)?;
    println!("{:<34} {:<6} {:<56} tolerance", "check", "result", "measured");
    for c in &report.checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{:<34} {verdict:<6} {:<56} {}", c.name, c.measured, c.tolerance);
    }
    if let Some(path) = &a.sweep_csv {
        report.write_sweep_csv(path)?;
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("failed: {} ({}; tolerance {})", c.name, c.measured, c.tolerance);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}
