//! The training loop: pick a view, render, take a Langevin step, and every
//! so often relocate dead Gaussians and grow toward the cap.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{classify_liveness, GaussianSet};
use crate::img::Image;
use crate::loss::{loss_total, psnr, ssim, LossBreakdown};
use crate::mcmc::{sgld_step, OptimizerState, SgldConfig};
use crate::relocate::{apply_plan, build_plan, grow_step};
use crate::render::{render, render_backward, RasterConfig};
use crate::scene_io::{initialize, save_checkpoint, write_png, SceneDataset, TrainConfig, View};

const STATE_FORMAT: u32 = 1;

/// Independent random streams, so that e.g. turning relocation off does not
/// change which views are sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub views: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub relocation: ChaCha8Rng,
}

impl RngStreams {
    /// Returns the initialization stream together with the training streams.
    pub fn from_seed(seed: u64) -> (ChaCha8Rng, RngStreams) {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        (
            stream(0),
            RngStreams {
                views: stream(1),
                noise: stream(2),
                relocation: stream(3),
            },
        )
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: u32,
    /// Completed iterations.
    pub iteration: u64,
    pub set: GaussianSet,
    pub optimizer: OptimizerState,
    pub rngs: RngStreams,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::load(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let state: TrainState =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if state.format != STATE_FORMAT {
            return Err(Error::format(
                path,
                format!("state format {} (expected {STATE_FORMAT})", state.format),
            ));
        }
        state.set.validate().map_err(|e| Error::format(path, e))?;
        if !state.optimizer.matches(&state.set) {
            return Err(Error::format(path, "optimizer buffers do not match the Gaussians"));
        }
        Ok(state)
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub wall_ms: u64,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_dssim: f64,
    pub reg_opacity: f64,
    pub reg_scale: f64,
    pub live_count: usize,
    pub psnr_train_view: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.ssim))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = values.len();
    (n > 0).then(|| values.sum::<f64>() / n as f64)
}

/// Renders every view and scores it against its image. Images too small for
/// the SSIM window get an SSIM of NaN.
pub fn evaluate(set: &GaussianSet, views: &[View], raster: &RasterConfig) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for view in views {
        let img = render(set, &view.camera, raster)?.to_image();
        report.views.push(ViewMetrics {
            name: view.name.clone(),
            psnr: psnr(&img, &view.image)?,
            ssim: ssim(&img, &view.image).unwrap_or(f64::NAN),
        });
    }
    Ok(report)
}

/// Index of the training view used for one iteration, uniform over `n` views.
pub fn sample_view<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}

/// True when relocation and growth run after iteration `it` (1-based).
pub fn relocation_due(it: u64, cadence: u64, warmup: u64) -> bool {
    it > warmup && it % cadence == 0
}

pub struct Trainer<'a> {
    dataset: &'a SceneDataset,
    config: TrainConfig,
    sgld: SgldConfig,
    raster: RasterConfig,
    state: TrainState,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh run initialized from `config.seed`.
    pub fn new(dataset: &'a SceneDataset, config: &TrainConfig) -> Result<Self> {
        let (mut init_rng, rngs) = RngStreams::from_seed(config.seed);
        let set = initialize(dataset, config, &mut init_rng)?;
        let optimizer = OptimizerState::new(&set);
        let state = TrainState {
            format: STATE_FORMAT,
            iteration: 0,
            set,
            optimizer,
            rngs,
        };
        Self::from_state(dataset, config, state)
    }

    pub fn from_state(dataset: &'a SceneDataset, config: &TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if dataset.views.is_empty() {
            return Err(Error::InvalidInput("dataset has no views".into()));
        }
        if state.set.capacity < config.max_gaussians {
            return Err(Error::Config(format!(
                "state holds capacity {} but max_gaussians is {}",
                state.set.capacity, config.max_gaussians
            )));
        }
        Ok(Trainer {
            dataset,
            sgld: config.sgld_config(dataset.extent_radius),
            config: config.clone(),
            raster: RasterConfig::default(),
            state,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn set(&self) -> &GaussianSet {
        &self.state.set
    }

    fn wall_ms(&self) -> u64 {
        if self.config.deterministic {
            0
        } else {
            self.started.elapsed().as_millis() as u64
        }
    }

    fn live_count(&self) -> usize {
        classify_liveness(&self.state.set, self.config.live_threshold).live_count()
    }

    /// Runs one iteration. Returns a log row on logging iterations. On error
    /// the state is left as it was before the iteration.
    pub fn step(&mut self) -> Result<Option<MetricRow>> {
        let it = self.state.iteration + 1;
        let mut state = self.state.clone();
        let v = sample_view(&mut state.rngs.views, self.dataset.views.len());
        let view = &self.dataset.views[v];
        let out = render(&state.set, &view.camera, &self.raster)?;
        let rendered = out.to_image();
        let (loss, d_image, mut grads) =
            loss_total(&rendered, &view.image, &state.set, &self.config.loss_weights())?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: it,
            });
        }
        grads.add_assign(&render_backward(&state.set, &view.camera, &out, &d_image)?);
        sgld_step(&mut state.set, &grads, &mut state.optimizer, &self.sgld, it - 1, &mut state.rngs.noise)
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, step: it },
                other => other,
            })?;

        let cfg = &self.config;
        let before_stop = cfg.relocate_until == 0 || it <= cfg.relocate_until;
        if before_stop && relocation_due(it, cfg.relocation_cadence, cfg.warmup) {
            if cfg.relocate {
                let mask = classify_liveness(&state.set, cfg.live_threshold);
                let plan = build_plan(&mask, &state.set.opacities(), &mut state.rngs.relocation)?;
                apply_plan(&mut state.set, &mut state.optimizer, &plan)?;
            }
            if cfg.grow {
                let live = classify_liveness(&state.set, cfg.live_threshold).live_count();
                grow_step(
                    &mut state.set,
                    &mut state.optimizer,
                    live,
                    cfg.max_gaussians,
                    cfg.growth_rate,
                    cfg.live_threshold,
                    &mut state.rngs.relocation,
                )?;
            }
        }
        state.iteration = it;
        self.state = state;

        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            return Ok(Some(self.row(it, &loss, psnr(&rendered, &view.image)?)));
        }
        Ok(None)
    }

    fn row(&self, iteration: u64, loss: &LossBreakdown, psnr: f64) -> MetricRow {
        MetricRow {
            iteration,
            wall_ms: self.wall_ms(),
            loss_total: loss.total,
            loss_l1: loss.l1,
            loss_dssim: loss.dssim,
            reg_opacity: loss.reg_opacity,
            reg_scale: loss.reg_scale,
            live_count: self.live_count(),
            psnr_train_view: psnr,
        }
    }

    /// Loss terms and PSNR of the current parameters averaged over all views.
    pub fn final_row(&self) -> Result<MetricRow> {
        let mut acc = LossBreakdown::default();
        let mut psnr_sum = 0.0;
        let n = self.dataset.views.len() as f64;
        for view in &self.dataset.views {
            let img = render(&self.state.set, &view.camera, &self.raster)?.to_image();
            let (l, _, _) = loss_total(&img, &view.image, &self.state.set, &self.config.loss_weights())?;
            acc.total += l.total / n;
            acc.l1 += l.l1 / n;
            acc.dssim += l.dssim / n;
            acc.reg_opacity = l.reg_opacity;
            acc.reg_scale = l.reg_scale;
            psnr_sum += psnr(&img, &view.image)?;
        }
        Ok(self.row(self.state.iteration, &acc, psnr_sum / n))
    }

    /// Steps until `config.iters` iterations are complete, calling `on_row`
    /// for each log row and the final evaluation row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricRow) -> Result<()>) -> Result<()> {
        while self.state.iteration < self.config.iters {
            if let Some(row) = self.step()? {
                on_row(&row)?;
            }
        }
        on_row(&self.final_row()?)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<MetricRow>,
}

/// Trains from scratch for `config.iters` iterations.
pub fn train(dataset: &SceneDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config)?;
    let mut log = Vec::new();
    trainer.run(|row| {
        log.push(row.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        state: trainer.into_state(),
        log,
    })
}

/// Paths of one checkpoint: the PLY and its exact-resume sidecar.
pub fn checkpoint_paths(dir: &Path, tag: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{tag}.ply")), dir.join(format!("{tag}.state.json")))
}

pub fn write_checkpoint(state: &TrainState, dir: &Path, tag: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (ply, sidecar) = checkpoint_paths(dir, tag);
    save_checkpoint(&state.set, &ply)?;
    state.save(&sidecar)
}

/// Renders every view of `dataset` into `dir` as `NNNN.png`.
pub fn write_renders(set: &GaussianSet, views: &[View], dir: &Path) -> Result<Vec<Image>> {
    fs::create_dir_all(dir)?;
    let raster = RasterConfig::default();
    let mut images = Vec::with_capacity(views.len());
    for (k, view) in views.iter().enumerate() {
        let img = render(set, &view.camera, &raster)?.to_image();
        write_png(&img, &dir.join(format!("{k:04}.png")))?;
        images.push(img);
    }
    Ok(images)
}

/// Runs training into `out`:
///
/// ```text
/// out/config.resolved        effective configuration
/// out/metrics.csv            one row per log step plus a final row
/// out/checkpoints/final.ply  and final.state.json
/// out/renders/NNNN.png       final renders of every view
/// ```
///
/// With `resume`, the run continues from a saved state and appends to an
/// existing `metrics.csv`. If an iteration fails, the last good state is
/// written as `checkpoints/last_good` before the error is returned.
pub fn run_to_dir(
    dataset: &SceneDataset,
    config: &TrainConfig,
    out: &Path,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    fs::create_dir_all(out)?;
    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    fs::write(out.join("config.resolved"), config.to_toml()?)?;

    let metrics_path = out.join("metrics.csv");
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(state) => Trainer::from_state(dataset, config, state)?,
        None => Trainer::new(dataset, config)?,
    };
    let append = resuming && metrics_path.is_file();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let csv_err = |e: csv::Error| Error::load(&metrics_path, e);

    let every = config.checkpoint_every;
    let result = (|| -> Result<()> {
        while trainer.state().iteration < config.iters {
            if let Some(row) = trainer.step()? {
                writer.serialize(&row).map_err(csv_err)?;
            }
            let it = trainer.state().iteration;
            if every > 0 && it % every == 0 && it < config.iters {
                write_checkpoint(trainer.state(), &checkpoints, &format!("iter_{it:06}"))?;
            }
        }
        writer.serialize(trainer.final_row()?).map_err(csv_err)?;
        writer.flush()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = writer.flush();
        write_checkpoint(trainer.state(), &checkpoints, "last_good")?;
        return Err(e);
    }
    let state = trainer.into_state();
    write_checkpoint(&state, &checkpoints, "final")?;
    write_renders(&state.set, &dataset.views, &out.join("renders"))?;
    Ok(state)
}
