//! Generation runs, run directories and their reports, and cost profiles.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ini::Ini;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{alignment, band_features, frechet_distance, median};
use crate::config::Config;
use crate::diffusion::{sample, Conditioning};
use crate::error::{Error, Result};
use crate::guidance::{write_diagnostics_csv, Backend, ControlTarget, Guide, GuidanceConfig, StepLosses};
use crate::models::NoiseMode;
use crate::parallel::par_map;
use crate::pipeline::{heldout_clips, sha256_hex, Artifacts, Stack};
use crate::tensor::arena;
use crate::world::{
    extract, read_tracks_csv, read_wav, write_tracks_csv, write_wav, Clip, ControlKind, ControlTrack, Waveform,
    NUM_CLASSES,
};

/// Seed and targets of one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub index: usize,
    pub seed: u64,
    pub class: usize,
    pub targets: Vec<ControlTrack>,
}

fn run_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// `n` runs whose targets are the `kinds` tracks extracted from held-out
/// clips, cycling through the clips; each run takes its clip's class.
pub fn plan_runs(heldout: &[Clip], kinds: &[ControlKind], n: usize, seed: u64) -> Result<Vec<RunSpec>> {
    if heldout.is_empty() {
        return Err(Error::invalid("no held-out clips to take targets from"));
    }
    (0..n)
        .map(|i| {
            let clip = &heldout[i % heldout.len()];
            Ok(RunSpec {
                index: i,
                seed: run_seed(seed, i),
                class: clip.spec.class,
                targets: kinds.iter().map(|&k| extract(k, &clip.wave)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// `n` runs sharing explicit targets; classes follow the run seeds.
pub fn plan_runs_with_targets(targets: &[ControlTrack], n: usize, seed: u64) -> Vec<RunSpec> {
    (0..n)
        .map(|i| {
            let seed = run_seed(seed, i);
            RunSpec {
                index: i,
                seed,
                class: (seed % NUM_CLASSES as u64) as usize,
                targets: targets.to_vec(),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub wave: Waveform,
    pub diagnostics: Vec<StepLosses>,
    /// Sampling plus decoding.
    pub seconds: f64,
    pub guided_seconds: f64,
    pub guided_steps: usize,
    /// Peak live tensor bytes while sampling.
    pub peak_bytes: usize,
}

impl RunOutput {
    pub fn seconds_per_guided_step(&self) -> f64 {
        if self.guided_steps == 0 {
            0.0
        } else {
            self.guided_seconds / self.guided_steps as f64
        }
    }
}

/// Samples and decodes every run; `guidance: None` samples unguided.
pub fn execute_runs(
    stack: &Stack,
    cfg: &Config,
    guidance: Option<&GuidanceConfig>,
    specs: &[RunSpec],
    jobs: usize,
) -> Result<Vec<RunOutput>> {
    let sched = cfg.sampler.schedule()?;
    let frames = cfg.frames();
    let shape = [frames, stack.denoiser.config.latent];
    par_map(specs.len(), jobs, |i| {
        let spec = &specs[i];
        let start = Instant::now();
        let base = arena::live_bytes();
        arena::reset_peak();
        let cond = Conditioning::class(spec.class, cfg.sampler.cfg_scale);
        let (traj, diagnostics, guided_seconds) = match guidance {
            Some(g) => {
                let targets = spec
                    .targets
                    .iter()
                    .map(|t| ControlTarget::new(t.clone(), g.weight(t.kind)))
                    .collect::<Result<Vec<_>>>()?;
                let mut guide = Guide::new(stack.models(g.backend), g, &targets, &sched, frames, spec.seed)?;
                let traj = sample(&stack.denoiser, &sched, &shape, cond, Some(&mut guide), spec.seed, false)?;
                let busy = guide.busy().as_secs_f64();
                (traj, guide.into_diagnostics(), busy)
            }
            None => (
                sample(&stack.denoiser, &sched, &shape, cond, None, spec.seed, false)?,
                Vec::new(),
                0.0,
            ),
        };
        let peak_bytes = arena::peak_bytes().saturating_sub(base);
        let wave = stack.vae.decode(traj.final_state())?;
        if wave.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("run {} decoded to non-finite samples", spec.index)));
        }
        Ok(RunOutput {
            spec: spec.clone(),
            wave,
            guided_steps: diagnostics.len(),
            diagnostics,
            seconds: start.elapsed().as_secs_f64(),
            guided_seconds,
            peak_bytes,
        })
    })
}

/// What a run directory was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub backend: Option<Backend>,
    pub seed: u64,
    pub mask_fraction: f64,
    pub controls: Vec<ControlKind>,
    pub config_sha256: String,
    /// `(path, sha256)` of every checkpoint used.
    pub checkpoints: Vec<(PathBuf, String)>,
    pub runs: Vec<ManifestRun>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRun {
    pub seed: u64,
    pub class: usize,
    pub wave: String,
    pub targets: String,
    pub guidance: Option<String>,
    pub seconds: f64,
    pub guided_steps: usize,
    pub peak_bytes: usize,
}

const CONFIG_FILE: &str = "config.ini";
const MANIFEST_FILE: &str = "manifest.ini";
pub const REPORT_FILE: &str = "report.csv";

fn backend_name(b: Option<Backend>) -> &'static str {
    b.map_or("none", Backend::name)
}

/// Checkpoints a generation with `backend` reads.
pub fn checkpoints_used(art: &Artifacts, backend: Option<Backend>, kinds: &[ControlKind], mode: NoiseMode) -> Vec<PathBuf> {
    let mut out = vec![art.vae_path(), art.denoiser_path()];
    match backend {
        Some(Backend::Latch) => out.extend(kinds.iter().map(|&k| art.latch_path(k, mode))),
        Some(Backend::Readout) => out.extend(kinds.iter().map(|&k| art.readout_path(k))),
        _ => {}
    }
    out
}

/// Writes waves, target and guidance CSVs, the config echo and the
/// manifest into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn write_run_dir(
    dir: &Path,
    cfg: &Config,
    backend: Option<Backend>,
    seed: u64,
    mask_fraction: f64,
    controls: &[ControlKind],
    checkpoints: &[PathBuf],
    outputs: &[RunOutput],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = cfg.to_ini_string();
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, &echo).map_err(|e| Error::io(&config_path, e))?;
    let mut runs = Vec::new();
    for out in outputs {
        let stem = format!("run_{:03}", out.spec.index);
        let wave = format!("{stem}.wav");
        write_wav(&dir.join(&wave), &out.wave)?;
        let targets = format!("{stem}_targets.csv");
        write_tracks_csv(&dir.join(&targets), &out.spec.targets.iter().collect::<Vec<_>>())?;
        let guidance = if backend.is_some() {
            let name = format!("{stem}_guidance.csv");
            let kinds: Vec<ControlKind> = out.spec.targets.iter().map(|t| t.kind).collect();
            write_diagnostics_csv(&dir.join(&name), &kinds, &out.diagnostics)?;
            Some(name)
        } else {
            None
        };
        runs.push(ManifestRun {
            seed: out.spec.seed,
            class: out.spec.class,
            wave,
            targets,
            guidance,
            seconds: out.seconds,
            guided_steps: out.guided_steps,
            peak_bytes: out.peak_bytes,
        });
    }
    let checkpoints = checkpoints
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok((p.clone(), sha256_hex(&bytes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        backend,
        seed,
        mask_fraction,
        controls: controls.to_vec(),
        config_sha256: sha256_hex(echo.as_bytes()),
        checkpoints,
        runs,
    };
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Samples `specs` with `backend` (`None` is unguided) and writes the run
/// directory `out`. The latch backend loads heads of the configured mode.
pub fn generate(
    cfg: &Config,
    backend: Option<Backend>,
    specs: &[RunSpec],
    mask_fraction: Option<f64>,
    out: &Path,
) -> Result<Manifest> {
    let first = specs.first().ok_or_else(|| Error::invalid("nothing to generate: zero runs"))?;
    let controls: Vec<ControlKind> = first.targets.iter().map(|t| t.kind).collect();
    let art = Artifacts::new(&cfg.dir);
    let mode = cfg.guidance.latch_mode;
    let stack = Stack::load(&art, backend, &controls, mode)?;
    let g = backend.map(|b| cfg.guidance(b, mask_fraction)).transpose()?;
    let outputs = execute_runs(&stack, cfg, g.as_ref(), specs, cfg.jobs)?;
    let fraction = mask_fraction.unwrap_or(cfg.guidance.mask_fraction);
    let used = checkpoints_used(&art, backend, &controls, mode);
    write_run_dir(out, cfg, backend, cfg.seed, fraction, &controls, &used, &outputs)
}

fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut ini = Ini::new();
    let controls: Vec<&str> = m.controls.iter().map(|k| k.name()).collect();
    ini.with_section(Some("run"))
        .set("backend", backend_name(m.backend))
        .set("seed", m.seed.to_string())
        .set("runs", m.runs.len().to_string())
        .set("mask_fraction", m.mask_fraction.to_string())
        .set("controls", controls.join(","))
        .set("config", CONFIG_FILE)
        .set("config_sha256", &m.config_sha256);
    for (i, (path, digest)) in m.checkpoints.iter().enumerate() {
        ini.with_section(Some(format!("checkpoint_{i}")))
            .set("path", path.display().to_string())
            .set("sha256", digest);
    }
    for (i, r) in m.runs.iter().enumerate() {
        let mut sec = ini.with_section(Some(format!("run_{i:03}")));
        sec.set("seed", r.seed.to_string())
            .set("class", r.class.to_string())
            .set("wave", &r.wave)
            .set("targets", &r.targets)
            .set("seconds", r.seconds.to_string())
            .set("guided_steps", r.guided_steps.to_string())
            .set("peak_bytes", r.peak_bytes.to_string());
        if let Some(g) = &r.guidance {
            sec.set("guidance", g);
        }
    }
    ini.write_to_file(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Missing(format!(
            "{} has no {MANIFEST_FILE}; run `generate --out {}` first",
            dir.display(),
            dir.display()
        )));
    }
    let ini = Ini::load_from_file(&path).map_err(|e| Error::format("run manifest", e.to_string()))?;
    let bad = |what: &str| Error::format("run manifest", format!("missing or malformed {what}"));
    let get = |sec: &str, key: &str| ini.get_from(Some(sec), key).ok_or_else(|| bad(&format!("[{sec}] {key}")));
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
        s.trim()
            .parse()
            .map_err(|_| Error::format("run manifest", format!("bad {what}: {s:?}")))
    }
    let backend = match get("run", "backend")? {
        "none" => None,
        b => Some(b.parse()?),
    };
    let controls = get("run", "controls")?
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<ControlKind>>>()?;
    let n: usize = num(get("run", "runs")?, "run count")?;
    let mut checkpoints = Vec::new();
    for i in 0.. {
        let sec = format!("checkpoint_{i}");
        if ini.section(Some(sec.as_str())).is_none() {
            break;
        }
        checkpoints.push((PathBuf::from(get(&sec, "path")?), get(&sec, "sha256")?.to_string()));
    }
    let mut runs = Vec::with_capacity(n);
    for i in 0..n {
        let sec = format!("run_{i:03}");
        runs.push(ManifestRun {
            seed: num(get(&sec, "seed")?, "seed")?,
            class: num(get(&sec, "class")?, "class")?,
            wave: get(&sec, "wave")?.to_string(),
            targets: get(&sec, "targets")?.to_string(),
            guidance: ini.get_from(Some(sec.as_str()), "guidance").map(str::to_string),
            seconds: num(get(&sec, "seconds")?, "seconds")?,
            guided_steps: num(get(&sec, "guided_steps")?, "guided steps")?,
            peak_bytes: num(get(&sec, "peak_bytes")?, "peak bytes")?,
        });
    }
    Ok(Manifest {
        backend,
        seed: num(get("run", "seed")?, "seed")?,
        mask_fraction: num(get("run", "mask_fraction")?, "mask fraction")?,
        controls,
        config_sha256: get("run", "config_sha256")?.to_string(),
        checkpoints,
        runs,
    })
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: usize,
    pub backend: Option<Backend>,
    pub seed: u64,
    pub class: usize,
    /// Alignment per control in [`ControlKind::ALL`] order; `None` when the
    /// run had no target for it.
    pub alignment: [Option<f64>; 3],
    /// Set-level spectral Fréchet distance, repeated on every row.
    pub spectral_fd: f64,
    pub seconds: f64,
    pub peak_bytes: usize,
    pub config_sha256: String,
}

/// Re-extracts controls from the stored waves, scores them against the
/// stored targets and writes `report.csv` into the run directory.
pub fn evaluate_run_dir(dir: &Path, jobs: usize) -> Result<Vec<ReportRow>> {
    let manifest = read_manifest(dir)?;
    if manifest.runs.is_empty() {
        return Err(Error::invalid(format!("{} holds no runs", dir.display())));
    }
    let cfg = Config::load(&dir.join(CONFIG_FILE))?;
    let heldout = heldout_clips(&cfg)?;
    let reference = par_map(heldout.len(), jobs, |i| band_features(&heldout[i].wave))?;
    let scored = par_map(manifest.runs.len(), jobs, |i| {
        let r = &manifest.runs[i];
        let wave = read_wav(&dir.join(&r.wave))?;
        let mut align = [None; 3];
        for target in read_tracks_csv(&dir.join(&r.targets))? {
            let slot = ControlKind::ALL.iter().position(|&k| k == target.kind).expect("listed kind");
            align[slot] = Some(alignment(&extract(target.kind, &wave)?, &target)?);
        }
        Ok((align, band_features(&wave)?))
    })?;
    let generated: Vec<Vec<f64>> = scored.iter().map(|s| s.1.clone()).collect();
    let fd = frechet_distance(&generated, &reference)?;
    let rows: Vec<ReportRow> = manifest
        .runs
        .iter()
        .zip(scored)
        .enumerate()
        .map(|(i, (r, (align, _)))| ReportRow {
            run: i,
            backend: manifest.backend,
            seed: r.seed,
            class: r.class,
            alignment: align,
            spectral_fd: fd,
            seconds: r.seconds,
            peak_bytes: r.peak_bytes,
            config_sha256: manifest.config_sha256.clone(),
        })
        .collect();
    write_report_csv(&dir.join(REPORT_FILE), &rows)?;
    Ok(rows)
}

fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let to_err = |e: csv::Error| Error::format("report CSV", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "run",
        "backend",
        "seed",
        "class",
        "intensity_mse_db2",
        "pitch_bce",
        "beats_bce",
        "spectral_fd",
        "seconds",
        "peak_bytes",
        "config_sha256",
    ])
    .map_err(to_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.run.to_string(),
            backend_name(r.backend).to_string(),
            r.seed.to_string(),
            r.class.to_string(),
            opt(r.alignment[0]),
            opt(r.alignment[1]),
            opt(r.alignment[2]),
            r.spectral_fd.to_string(),
            r.seconds.to_string(),
            r.peak_bytes.to_string(),
            r.config_sha256.clone(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cost summary of one backend (`None` is unguided sampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub backend: Option<Backend>,
    pub runs: usize,
    pub median_run_seconds: f64,
    pub median_step_seconds: f64,
    pub guided_steps: usize,
    pub peak_bytes: usize,
}

/// Times the same runs under each backend.
pub fn profile(
    art: &Artifacts,
    cfg: &Config,
    backends: &[Option<Backend>],
    specs: &[RunSpec],
    mask_fraction: Option<f64>,
    jobs: usize,
) -> Result<Vec<ProfileRow>> {
    let kinds: Vec<ControlKind> = specs
        .first()
        .map(|s| s.targets.iter().map(|t| t.kind).collect())
        .unwrap_or_default();
    backends
        .iter()
        .map(|&backend| {
            let stack = Stack::load(art, backend, &kinds, cfg.guidance.latch_mode)?;
            let g = backend.map(|b| cfg.guidance(b, mask_fraction)).transpose()?;
            let outs = execute_runs(&stack, cfg, g.as_ref(), specs, jobs)?;
            let secs: Vec<f64> = outs.iter().map(|o| o.seconds).collect();
            let steps: Vec<f64> = outs.iter().map(RunOutput::seconds_per_guided_step).collect();
            Ok(ProfileRow {
                backend,
                runs: outs.len(),
                median_run_seconds: median(&secs),
                median_step_seconds: median(&steps),
                guided_steps: outs.first().map_or(0, |o| o.guided_steps),
                peak_bytes: outs.iter().map(|o| o.peak_bytes).max().unwrap_or(0),
            })
        })
        .collect()
}

pub fn write_profile_csv(path: &Path, rows: &[ProfileRow]) -> Result<()> {
    let to_err = |e: csv::Error| Error::format("profile CSV", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "backend",
        "runs",
        "median_run_seconds",
        "median_guided_step_seconds",
        "guided_steps",
        "peak_bytes",
    ])
    .map_err(to_err)?;
    for r in rows {
        w.write_record([
            backend_name(r.backend).to_string(),
            r.runs.to_string(),
            r.median_run_seconds.to_string(),
            r.median_step_seconds.to_string(),
            r.guided_steps.to_string(),
            r.peak_bytes.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
