use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use qbin::archive;
use qbin::checkpoint::Checkpoint;
use qbin::fieldio::{self, Catalog, FieldIoError};
use qbin::pipeline::{self, World};
use qbin::report;
use qbin_core::checks::{gradient_suite, DEFAULT_TOLERANCE};
use qbin_core::config::{GridSpec, RunConfig};
use qbin_core::tensor::ParamStore;
use qbin_core::training::{CheckpointEvent, LogRecord, TrainerState, TrainingHooks};

#[derive(Parser)]
#[command(
    name = "qbin",
    version,
    about = "Quantile-bin subseasonal precipitation forecasting on synthetic worlds"
)]
struct Cli {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Grid size as LATxLON, e.g. 8x16.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Ensemble members at inference.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Training iterations per rollout depth.
    #[arg(long, global = true)]
    iters_per_step: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    /// Phase 1 only; writes the phase-boundary checkpoint.
    #[value(name = "1")]
    One,
    /// Phase 2 from a phase-1 checkpoint (`--resume`).
    #[value(name = "2")]
    Two,
    /// Both phases.
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Region {
    Global,
    Land,
    Ocean,
}

impl Region {
    fn name(self) -> &'static str {
        match self {
            Region::Global => "global",
            Region::Land => "land",
            Region::Ocean => "ocean",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world as a field archive.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write calendar-day thresholds and means of the climatology period.
    Climatology {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum training; writes checkpoints and a JSON-lines log.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Ensemble forecasts from every test-period initialization.
    Infer {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reforecast calibration study on the biased synthetic forecaster.
    Calibrate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lead week of the study.
        #[arg(long, default_value_t = 2)]
        week: u32,
    },
    /// Verify a forecast archive; writes metrics.csv.
    Evaluate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forecasts: PathBuf,
        /// Second forecast archive scored and compared against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Keep only rows of this region.
        #[arg(long, value_enum)]
        mask: Option<Region>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render metrics.csv as JSON and SVG bar charts.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite; fails on any check over tolerance.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn parse_grid(s: &str) -> anyhow::Result<GridSpec> {
    let (a, b) = s
        .split_once('x')
        .with_context(|| format!("grid {s:?} is not LATxLON"))?;
    Ok(GridSpec {
        n_lat: a.trim().parse()?,
        n_lon: b.trim().parse()?,
    })
}

impl Cli {
    fn run_config(&self, seed: u64) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => fieldio::load_config(p)?,
            None => RunConfig::default(),
        };
        cfg.seed = seed;
        cfg.world.seed = seed;
        if let Some(g) = &self.grid {
            cfg.grid = parse_grid(g)?;
        }
        if let Some(m) = self.members {
            cfg.members = m;
        }
        if let Some(n) = self.iters_per_step {
            cfg.schedule.iters_per_step = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_world(data: &Path, cfg: &RunConfig) -> anyhow::Result<World> {
    let world = archive::read_world(&Catalog::scan(data)?)?;
    if (world.n_lat(), world.n_lon()) != (cfg.grid.n_lat, cfg.grid.n_lon) {
        bail!(FieldIoError::Catalog(format!(
            "archive grid {}x{} differs from configured {}x{}",
            world.n_lat(),
            world.n_lon(),
            cfg.grid.n_lat,
            cfg.grid.n_lon
        )));
    }
    Ok(world)
}

/// Removes a previous output directory so reruns write identical trees.
fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

struct FileHooks<'a> {
    out: &'a Path,
    log: fs::File,
    model: &'a qbin_core::model::Forecaster,
    normalizer: &'a qbin_core::model::Normalizer,
    train: qbin_core::training::TrainConfig,
    stop_after_phase1: bool,
}

impl TrainingHooks for FileHooks<'_> {
    fn on_iteration(&mut self, r: &LogRecord) -> qbin_core::Result<()> {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(self.log, "{line}")
            .map_err(|e| qbin_core::Error::Validation(format!("writing log: {e}")))
    }

    fn on_checkpoint(
        &mut self,
        event: CheckpointEvent,
        store: &ParamStore,
        state: &TrainerState,
    ) -> qbin_core::Result<()> {
        let name = match event {
            CheckpointEvent::PhaseBoundary => "phase1.qwck".to_string(),
            CheckpointEvent::Final => "final.qwck".to_string(),
            CheckpointEvent::Periodic => format!("iter{:07}.qwck", state.iteration),
        };
        let ck = Checkpoint::capture(self.model, self.normalizer, &self.train, store, state);
        ck.save(&self.out.join(name))
            .map_err(|e| qbin_core::Error::Validation(e.to_string()))?;
        if self.stop_after_phase1 && event == CheckpointEvent::PhaseBoundary {
            // Phase-1-only runs end here; the final checkpoint mirrors it.
            ck.save(&self.out.join("final.qwck"))
                .map_err(|e| qbin_core::Error::Validation(e.to_string()))?;
        }
        Ok(())
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { seed, out } => {
            let cfg = cli.run_config(*seed)?;
            let world = World::generate(&cfg)?;
            fresh_dir(out)?;
            let mut cat = Catalog::new(out);
            archive::write_world(&mut cat, &world)?;
            fieldio::save_config(&cfg, &out.join("config.json"))?;
            println!("wrote {} fields to {}", cat.len(), out.display());
        }
        Command::Climatology { seed, data, out } => {
            let cfg = cli.run_config(*seed)?;
            let world = load_world(data, &cfg)?;
            let clim = pipeline::build_climatology(&cfg, &world)?;
            fresh_dir(out)?;
            archive::write_climatology(&mut Catalog::new(out), &clim, &world.grid)?;
            println!(
                "climatology {}-{} with {} bins written to {}",
                cfg.climatology_period.first,
                cfg.climatology_period.last,
                cfg.n_bins,
                out.display()
            );
        }
        Command::Train {
            seed,
            data,
            out,
            phase,
            resume,
        } => {
            let cfg = cli.run_config(*seed)?;
            let world = load_world(data, &cfg)?;
            let clim = pipeline::build_climatology(&cfg, &world)?;
            let (model, mut store, mut state, normalizer) = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.meta.train != cfg.train_config() || ck.meta.model != cfg.model_config() {
                        bail!(qbin_core::Error::Validation(format!(
                            "{} was trained with another configuration",
                            p.display()
                        )));
                    }
                    let (m, s, st) = ck.restore()?;
                    (m, s, st, ck.meta.normalizer)
                }
                None if *phase == PhaseArg::Two => {
                    bail!(qbin_core::Error::Validation(
                        "--phase 2 needs --resume with a phase-1 checkpoint".into()
                    ))
                }
                None => {
                    let (m, s) = pipeline::init_model(&cfg, *seed)?;
                    let st = TrainerState::new(&cfg.train_config(), &s);
                    (m, s, st, pipeline::fit_normalizer(&cfg, &world)?)
                }
            };
            let data_set = pipeline::training_data(&cfg, &world, &normalizer, &clim)?;
            let boundary = cfg.schedule.phase1_iterations();
            let until = match phase {
                PhaseArg::One => Some(boundary),
                PhaseArg::Two | PhaseArg::All => None,
            };
            if *phase == PhaseArg::Two && state.iteration < boundary {
                bail!(qbin_core::Error::Validation(format!(
                    "checkpoint is at iteration {}, phase 2 starts at {boundary}",
                    state.iteration
                )));
            }
            fs::create_dir_all(out)?;
            let log_name = if resume.is_some() {
                "train_log_resumed.jsonl"
            } else {
                "train_log.jsonl"
            };
            let mut hooks = FileHooks {
                out,
                log: fs::File::create(out.join(log_name))?,
                model: &model,
                normalizer: &normalizer,
                train: cfg.train_config(),
                stop_after_phase1: *phase == PhaseArg::One,
            };
            pipeline::train(
                &cfg,
                &world.grid,
                &data_set,
                &model,
                &mut store,
                &mut state,
                until,
                &mut hooks,
            )?;
            println!(
                "trained to iteration {} of {}",
                state.iteration,
                cfg.schedule.total_iterations()
            );
        }
        Command::Infer {
            seed,
            data,
            checkpoint,
            out,
        } => {
            let cfg = cli.run_config(*seed)?;
            let world = load_world(data, &cfg)?;
            let ck = Checkpoint::load(checkpoint)?;
            let (model, store, _) = ck.restore()?;
            let inits = cfg.test_inits()?;
            let fc = pipeline::infer(
                &model,
                &store,
                &ck.meta.normalizer,
                &world,
                &inits,
                &cfg.eval.lead_weeks,
                cfg.members,
                *seed,
            )?;
            fresh_dir(out)?;
            archive::write_forecasts(&mut Catalog::new(out), &fc, &world.grid)?;
            println!(
                "{} inits x {} lead weeks x {} members written to {}",
                inits.len(),
                fc.lead_weeks.len(),
                fc.n_members,
                out.display()
            );
        }
        Command::Calibrate {
            seed,
            data,
            out,
            week,
        } => {
            let cfg = cli.run_config(*seed)?;
            let world = load_world(data, &cfg)?;
            let clim = pipeline::build_climatology(&cfg, &world)?;
            let study = pipeline::calibration_study(
                &cfg,
                &world,
                &clim,
                &cfg.test_inits()?,
                *week,
                cfg.members,
                cfg.members,
            )?;
            fs::create_dir_all(out)?;
            let mut csv = String::from("lat,lon,date,obs_q80,model_q80\n");
            for r in &study.mismatch.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.lat, r.lon, r.date, r.obs_q80, r.model_q80
                ));
            }
            fs::write(out.join("q80_mismatch.csv"), csv)?;
            let summary = serde_json::json!({
                "lead_week": week,
                "kept_cells": study.kept_cells,
                "below_fraction": study.mismatch.below_fraction,
                "ties": study.mismatch.ties,
                "n_draws": study.n_draws,
                "calibrated_frequencies": study.calibrated_frequencies,
                "raw_frequencies": study.raw_frequencies,
            });
            fs::write(
                out.join("calibration.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            println!(
                "model q80 below observed at {:.1}% of kept cell-dates; calibrated bin frequencies {:?}",
                100.0 * study.mismatch.below_fraction,
                study.calibrated_frequencies
            );
        }
        Command::Evaluate {
            seed,
            data,
            forecasts,
            baseline,
            mask,
            out,
        } => {
            let cfg = cli.run_config(*seed)?;
            let world = load_world(data, &cfg)?;
            let clim = pipeline::build_climatology(&cfg, &world)?;
            let fc = archive::read_forecasts(&Catalog::scan(forecasts)?, cfg.n_bins)?;
            let base = baseline
                .as_ref()
                .map(|b| archive::read_forecasts(&Catalog::scan(b)?, cfg.n_bins))
                .transpose()?;
            if let Some(b) = &base {
                let missing: Vec<String> = fc
                    .inits
                    .iter()
                    .filter(|d| !b.inits.contains(d))
                    .map(|d| d.to_string())
                    .collect();
                if !missing.is_empty() {
                    bail!(qbin_core::Error::Validation(format!(
                        "baseline lacks init dates {}",
                        missing.join(", ")
                    )));
                }
            }
            let mut ev = pipeline::evaluate(&cfg, &world, &clim, &fc, base.as_ref())?;
            if let Some(r) = mask {
                ev.report.rows.retain(|row| row.region == r.name());
            }
            fs::create_dir_all(out)?;
            report::write_csv(&ev.report, &out.join("metrics.csv"))?;
            print!("{}", ev.report.to_csv());
        }
        Command::Report { metrics, out } => {
            let rep = report::read_csv(metrics)?;
            fs::create_dir_all(out)?;
            report::write_json(&rep, &out.join("metrics.json"))?;
            let mut names: Vec<&str> = rep.rows.iter().map(|r| r.metric.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            for name in names {
                report::write_bar_chart(&rep, name, &out.join(format!("{name}.svg")))?;
            }
            println!("report written to {}", out.display());
        }
        Command::Gradcheck { seed, seeds } => {
            let list: Vec<u64> = (*seed..seed + seeds).collect();
            let suite = gradient_suite(&list, DEFAULT_TOLERANCE)?;
            print!("{}", suite.summary());
            if !suite.passed() {
                let worst = suite
                    .worst()
                    .map(|o| o.report.max_rel_error)
                    .unwrap_or(f64::NAN);
                bail!(qbin_core::Error::NonFiniteGradient(format!(
                    "gradient check failed, worst relative error {worst:.3e}"
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<qbin_core::Error>().is_some_and(qbin_core::Error::is_numeric)
            || matches!(e.downcast_ref::<FieldIoError>(), Some(FieldIoError::Core(c)) if c.is_numeric())
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
