//! Artifact layout and the phases behind the command-line verbs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::guidance::{Backend, GuidanceModels, Heads};
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, Denoiser, Latch, NoiseMode, Readout, Vae};
use crate::training::{
    build_trajectory_dataset, decoded_targets, encode_clips, read_trajectory_dataset, train_denoiser, train_latch, train_readout,
    train_vae, write_trajectory_dataset, Curve, HeadData, LatentSet, TrainConfig, TrajectoryDataset,
};
use crate::world::{random_clips, Clip, ControlKind};

/// Offset between the training and held-out world seeds.
const HELDOUT_SEED_OFFSET: u64 = 0x5eed_0001;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Vae,
    Denoiser,
    Latch,
    Readout,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Vae => "vae",
            Phase::Denoiser => "denoiser",
            Phase::Latch => "latch",
            Phase::Readout => "readout",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Phase::Vae),
            "denoiser" => Ok(Phase::Denoiser),
            "latch" => Ok(Phase::Latch),
            "readout" => Ok(Phase::Readout),
            _ => Err(Error::invalid(format!(
                "unknown phase {s:?}; expected vae, denoiser, latch or readout"
            ))),
        }
    }
}

/// File names inside the artifact directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn vae_path(&self) -> PathBuf {
        self.dir.join("vae.lch1")
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.dir.join("denoiser.lch1")
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.dir.join("trajectories.ltj")
    }

    pub fn latch_path(&self, kind: ControlKind, mode: NoiseMode) -> PathBuf {
        self.dir.join(format!("latch_{kind}_{mode}.lch1"))
    }

    pub fn readout_path(&self, kind: ControlKind) -> PathBuf {
        self.dir.join(format!("readout_{kind}.lch1"))
    }

    /// Training curve next to a checkpoint: `x.lch1` -> `x_curve.csv`.
    pub fn curve_path(checkpoint: &Path) -> PathBuf {
        let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        checkpoint.with_file_name(format!("{stem}_curve.csv"))
    }

    fn checkpoint(path: &Path, command: &str) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::Missing(format!(
                "{} not found; run `{command}` first",
                path.display()
            )));
        }
        load_checkpoint(path)
    }

    pub fn vae(&self) -> Result<Vae> {
        Vae::from_checkpoint(&Self::checkpoint(&self.vae_path(), "train vae")?)
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_checkpoint(&Self::checkpoint(&self.denoiser_path(), "train denoiser")?)
    }

    pub fn latch(&self, kind: ControlKind, mode: NoiseMode) -> Result<Latch> {
        let cmd = format!("train latch --kind {kind} --mode {mode}");
        Latch::from_checkpoint(&Self::checkpoint(&self.latch_path(kind, mode), &cmd)?)
    }

    pub fn readout(&self, kind: ControlKind) -> Result<Readout> {
        let cmd = format!("train readout --kind {kind}");
        Readout::from_checkpoint(&Self::checkpoint(&self.readout_path(kind), &cmd)?)
    }

    pub fn trajectories(&self) -> Result<TrajectoryDataset> {
        let path = self.trajectories_path();
        if !path.exists() {
            return Err(Error::Missing(format!(
                "{} not found; backward-mode heads need it, run the `trajectories` command first",
                path.display()
            )));
        }
        read_trajectory_dataset(&path)
    }
}

pub fn train_config(cfg: &Config) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    }
}

pub fn training_clips(cfg: &Config) -> Result<Vec<Clip>> {
    random_clips(cfg.train.clips, cfg.train.samples, cfg.seed)
}

pub fn heldout_clips(cfg: &Config) -> Result<Vec<Clip>> {
    random_clips(
        cfg.train.heldout,
        cfg.train.samples,
        cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET),
    )
}

/// Training latents paired with the controls of their reconstructions, so
/// heads learn `z0 -> C(D(z0))`.
pub fn head_latents(cfg: &Config, vae: &Vae, jobs: usize) -> Result<LatentSet> {
    decoded_targets(vae, &encode_clips(vae, &training_clips(cfg)?, jobs)?, jobs)
}

/// A checkpoint written by [`train_phase`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub sha256: String,
    pub final_loss: f64,
}

fn store(path: PathBuf, ckpt: &Checkpoint, curve: &Curve) -> Result<Trained> {
    save_checkpoint(&path, ckpt)?;
    let curve_path = Artifacts::curve_path(&path);
    curve.write_csv(&curve_path)?;
    Ok(Trained {
        sha256: sha256_hex(&ckpt.to_bytes()),
        checkpoint: path,
        curve: curve_path,
        final_loss: curve.tail_mean(1),
    })
}

/// Runs one training phase. Head phases train every kind in `kinds`; the
/// LatCH noise mode defaults to the configured one.
pub fn train_phase(
    cfg: &Config,
    phase: Phase,
    kinds: &[ControlKind],
    mode: Option<NoiseMode>,
    jobs: usize,
) -> Result<Vec<Trained>> {
    let art = Artifacts::new(&cfg.dir);
    std::fs::create_dir_all(&art.dir).map_err(|e| Error::io(&art.dir, e))?;
    let tc = train_config(cfg);
    match phase {
        Phase::Vae => {
            let (vae, curve) = train_vae(&training_clips(cfg)?, &tc, cfg.vae.clone())?;
            Ok(vec![store(art.vae_path(), &vae.to_checkpoint(), &curve)?])
        }
        Phase::Denoiser => {
            let vae = art.vae()?;
            let data = encode_clips(&vae, &training_clips(cfg)?, jobs)?;
            let (den, curve) = train_denoiser(&data, &tc, cfg.denoiser.clone())?;
            Ok(vec![store(art.denoiser_path(), &den.to_checkpoint(), &curve)?])
        }
        Phase::Latch => {
            let mode = mode.unwrap_or(cfg.guidance.latch_mode);
            let vae = art.vae()?;
            let traj;
            let latents;
            let data = if mode == NoiseMode::Backward {
                traj = art.trajectories()?;
                HeadData::Trajectories(&traj)
            } else {
                latents = head_latents(cfg, &vae, jobs)?;
                HeadData::Latents(&latents)
            };
            let mut out = Vec::new();
            for &kind in kinds {
                let arch = cfg.latch.config(kind, mode, cfg.vae.latent);
                let (head, curve) = train_latch(arch, data, &tc)?;
                out.push(store(art.latch_path(kind, mode), &head.to_checkpoint(), &curve)?);
            }
            Ok(out)
        }
        Phase::Readout => {
            let vae = art.vae()?;
            let den = art.denoiser()?;
            let data = head_latents(cfg, &vae, jobs)?;
            let mut out = Vec::new();
            for &kind in kinds {
                let (head, curve) = train_readout(cfg.readout_config(kind), &den, &data, &tc)?;
                out.push(store(art.readout_path(kind), &head.to_checkpoint(), &curve)?);
            }
            Ok(out)
        }
    }
}

/// Builds and writes the trajectory dataset. `runs` and `stride` default to
/// the configured values.
pub fn build_trajectories(
    cfg: &Config,
    runs: Option<usize>,
    stride: Option<usize>,
    seed: u64,
    jobs: usize,
) -> Result<(PathBuf, TrajectoryDataset)> {
    let art = Artifacts::new(&cfg.dir);
    let vae = art.vae()?;
    let den = art.denoiser()?;
    let ds = build_trajectory_dataset(
        &den,
        &vae,
        &cfg.sampler.schedule()?,
        cfg.frames(),
        cfg.sampler.cfg_scale,
        runs.unwrap_or(cfg.trajectories.runs),
        stride.unwrap_or(cfg.trajectories.stride),
        seed,
        jobs,
    )?;
    let path = art.trajectories_path();
    write_trajectory_dataset(&path, &ds)?;
    Ok((path, ds))
}

/// Trained models needed to sample, decode and guide.
#[derive(Clone, Debug)]
pub struct Stack {
    pub vae: Vae,
    pub denoiser: Denoiser,
    pub latches: Vec<Latch>,
    pub readouts: Vec<Readout>,
}

impl Stack {
    /// Loads the autoencoder, the denoiser and the heads `backend` needs for
    /// `kinds`.
    pub fn load(art: &Artifacts, backend: Option<Backend>, kinds: &[ControlKind], mode: NoiseMode) -> Result<Self> {
        let vae = art.vae()?;
        let denoiser = art.denoiser()?;
        let mut latches = Vec::new();
        let mut readouts = Vec::new();
        match backend {
            Some(Backend::Latch) => {
                for &k in kinds {
                    latches.push(art.latch(k, mode)?);
                }
            }
            Some(Backend::Readout) => {
                for &k in kinds {
                    readouts.push(art.readout(k)?);
                }
            }
            Some(Backend::EndToEnd) | None => {}
        }
        Ok(Self {
            vae,
            denoiser,
            latches,
            readouts,
        })
    }

    pub fn models(&self, backend: Backend) -> GuidanceModels<'_> {
        let heads = match backend {
            Backend::Latch => Heads::Latch(&self.latches),
            Backend::EndToEnd => Heads::EndToEnd(&self.vae),
            Backend::Readout => Heads::Readout(&self.readouts),
        };
        GuidanceModels {
            denoiser: &self.denoiser,
            heads,
        }
    }
}
