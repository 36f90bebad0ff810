//! `latch`: train the toy stack, sample with or without guidance, score the
//! results and compare backend costs.
//!
//! Exit codes: 0 ok, 1 usage or other failure, 2 missing prerequisite,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use latch_core::config::Config;
use latch_core::eval::{
    evaluate_run_dir, generate, median, plan_runs, plan_runs_with_targets, profile,
    write_profile_csv, RunSpec,
};
use latch_core::guidance::Backend;
use latch_core::models::NoiseMode;
use latch_core::pipeline::{build_trajectories, heldout_clips, train_phase, Artifacts, Phase};
use latch_core::selftest::selftest;
use latch_core::world::{read_tracks_csv, ControlKind};

#[derive(Parser, Debug)]
#[command(name = "latch", version, about = "Selective guidance with latent-control heads on a toy audio stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// INI configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides the configured count.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            if jobs == 0 {
                bail!(latch_core::Error::Invalid("--jobs must be at least 1".into()));
            }
            cfg.jobs = jobs;
        }
        Ok(cfg)
    }
}

/// `none` or a guidance backend.
#[derive(Clone, Copy, Debug)]
struct BackendChoice(Option<Backend>);

impl FromStr for BackendChoice {
    type Err = latch_core::Error;

    fn from_str(s: &str) -> latch_core::Result<Self> {
        if s == "none" {
            Ok(Self(None))
        } else {
            s.parse().map(|b| Self(Some(b)))
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one phase: vae, denoiser, latch or readout.
    Train {
        phase: Phase,
        #[command(flatten)]
        common: Common,
        /// Controls for head phases (repeatable); all three by default.
        #[arg(long = "kind")]
        kinds: Vec<ControlKind>,
        /// LatCH noise mode: clean, forward or backward.
        #[arg(long)]
        mode: Option<NoiseMode>,
    },
    /// Sample trajectories with the trained denoiser for backward-mode heads.
    Trajectories {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Generate waves into a run directory.
    Generate {
        #[command(flatten)]
        common: Common,
        /// none, latch, end_to_end or readout.
        #[arg(long)]
        backend: Option<BackendChoice>,
        /// Controls to guide toward (repeatable).
        #[arg(long = "kind")]
        kinds: Vec<ControlKind>,
        /// LatCH noise mode of the heads to load.
        #[arg(long)]
        mode: Option<NoiseMode>,
        /// Control CSV shared by every run; held-out clips supply targets otherwise.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        /// Fraction of leading steps that are guided.
        #[arg(long)]
        mask_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory and write its report.csv.
    Evaluate {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Time the same runs under several backends.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Backends to compare (repeatable); none, latch and end_to_end by default.
        #[arg(long = "backend")]
        backends: Vec<BackendChoice>,
        #[arg(long = "kind")]
        kinds: Vec<ControlKind>,
        #[arg(long)]
        mode: Option<NoiseMode>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        mask_fraction: Option<f64>,
        /// Profile CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, identity, neutrality, recipe and determinism checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scratch directory; a temporary one is used and removed otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn or_configured(kinds: Vec<ControlKind>, cfg: &Config) -> Vec<ControlKind> {
    if kinds.is_empty() {
        cfg.eval.controls.clone()
    } else {
        kinds
    }
}

fn held_out_specs(cfg: &Config, kinds: &[ControlKind], runs: usize) -> Result<Vec<RunSpec>> {
    Ok(plan_runs(&heldout_clips(cfg)?, kinds, runs, cfg.seed)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            phase,
            common,
            kinds,
            mode,
        } => {
            let cfg = common.load()?;
            let kinds = if kinds.is_empty() { ControlKind::ALL.to_vec() } else { kinds };
            for t in train_phase(&cfg, phase, &kinds, mode, cfg.jobs)? {
                println!(
                    "{}  sha256 {}  final loss {:.5}  curve {}",
                    t.checkpoint.display(),
                    t.sha256,
                    t.final_loss,
                    t.curve.display()
                );
            }
        }
        Command::Trajectories { common, runs, stride } => {
            let cfg = common.load()?;
            let (path, ds) = build_trajectories(&cfg, runs, stride, cfg.seed, cfg.jobs)?;
            println!("{}  {} records", path.display(), ds.len());
        }
        Command::Generate {
            common,
            backend,
            kinds,
            mode,
            targets,
            runs,
            mask_fraction,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.guidance.latch_mode = m;
            }
            let backend = backend.map_or(Some(cfg.guidance.backend), |b| b.0);
            let runs = runs.unwrap_or(cfg.eval.runs);
            let specs = match &targets {
                Some(path) => {
                    let mut tracks = read_tracks_csv(path)?;
                    if !kinds.is_empty() {
                        tracks.retain(|t| kinds.contains(&t.kind));
                    }
                    if tracks.is_empty() {
                        bail!(latch_core::Error::Invalid(format!(
                            "{} holds no track for the requested controls",
                            path.display()
                        )));
                    }
                    plan_runs_with_targets(&tracks, runs, cfg.seed)
                }
                None => held_out_specs(&cfg, &or_configured(kinds, &cfg), runs)?,
            };
            let manifest = generate(&cfg, backend, &specs, mask_fraction, &out)?;
            println!("{} runs written to {}", manifest.runs.len(), out.display());
        }
        Command::Evaluate { run_dir, jobs } => {
            if jobs == 0 {
                bail!(latch_core::Error::Invalid("--jobs must be at least 1".into()));
            }
            let rows = evaluate_run_dir(&run_dir, jobs)?;
            for (i, kind) in ControlKind::ALL.iter().enumerate() {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.alignment[i]).collect();
                if !vals.is_empty() {
                    let unit = if *kind == ControlKind::Intensity { "MSE dB^2" } else { "BCE" };
                    println!("{kind:<9} median {unit} {:.4} over {} runs", median(&vals), vals.len());
                }
            }
            println!("spectral FD {:.4}", rows[0].spectral_fd);
            println!("report written to {}", run_dir.join(latch_core::eval::REPORT_FILE).display());
        }
        Command::Profile {
            common,
            backends,
            kinds,
            mode,
            runs,
            mask_fraction,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.guidance.latch_mode = m;
            }
            let backends: Vec<Option<Backend>> = if backends.is_empty() {
                vec![None, Some(Backend::Latch), Some(Backend::EndToEnd)]
            } else {
                backends.into_iter().map(|b| b.0).collect()
            };
            let kinds = or_configured(kinds, &cfg);
            let specs = held_out_specs(&cfg, &kinds, runs.unwrap_or(cfg.eval.runs))?;
            let art = Artifacts::new(&cfg.dir);
            let rows = profile(&art, &cfg, &backends, &specs, mask_fraction, cfg.jobs)?;
            println!("{:<11} {:>5} {:>12} {:>14} {:>7} {:>12}", "backend", "runs", "run s", "guided step s", "steps", "peak bytes");
            for r in &rows {
                println!(
                    "{:<11} {:>5} {:>12.4} {:>14.6} {:>7} {:>12}",
                    r.backend.map_or("none", Backend::name),
                    r.runs,
                    r.median_run_seconds,
                    r.median_step_seconds,
                    r.guided_steps,
                    r.peak_bytes
                );
            }
            if let Some(path) = out {
                write_profile_csv(&path, &rows)?;
                println!("profile written to {}", path.display());
            }
        }
        Command::Selftest { seed, out } => {
            let (scratch, temporary) = match out {
                Some(dir) => (dir, false),
                None => (std::env::temp_dir().join(format!("latch-selftest-{}", std::process::id())), true),
            };
            let checks = selftest(seed, &scratch);
            if temporary {
                let _ = std::fs::remove_dir_all(&scratch);
            }
            let checks = checks?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<latch_core::Error>() {
        Some(latch_core::Error::Missing(_)) => 2,
        Some(latch_core::Error::Numerical(_)) => 3,
        _ => 1,
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
