//! Control-head training for the three noise modes and for readouts.

use rand::{Rng, SeedableRng};

use super::{head_loss, pick, stack, Adam, Curve, LatentSet, TrainConfig, TrajectoryDataset};
use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::models::{Denoiser, Latch, LatchConfig, NoiseMode, Readout, ReadoutConfig};
use crate::tensor::{Graph, Tensor};
use crate::world::ControlKind;

/// Training data for a control head.
#[derive(Clone, Copy, Debug)]
pub enum HeadData<'a> {
    /// Encoded clips with extractor targets (clean and forward modes).
    Latents(&'a LatentSet),
    /// Recorded sampling states (backward mode).
    Trajectories(&'a TrajectoryDataset),
}

struct HeadBatch {
    z: Tensor,
    t: Vec<f64>,
    target: Tensor,
}

fn track_tensor(values: &[f32], frames: usize, dims: usize) -> Result<Tensor> {
    Tensor::new([frames, dims], values.to_vec())
}

fn latent_batch(
    data: &LatentSet,
    kind: ControlKind,
    forward: bool,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<HeadBatch> {
    let idx = pick(rng, data.len(), batch);
    let mut zs = Vec::new();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for &i in &idx {
        let z0 = &data.latents[i];
        if forward {
            let t: f64 = rng.random_range(0.0..1.0);
            let noise = Tensor::randn(z0.shape().to_vec(), rng);
            zs.push(forward_diffuse(z0, t, &noise)?);
            ts.push(t);
        } else {
            zs.push(z0.clone());
            ts.push(0.0);
        }
        let tr = data.track(i, kind);
        ys.push(track_tensor(&tr.values, tr.frames, kind.dims())?);
    }
    Ok(HeadBatch {
        z: stack(&zs.iter().collect::<Vec<_>>())?,
        t: ts,
        target: stack(&ys.iter().collect::<Vec<_>>())?,
    })
}

fn trajectory_batch(
    ds: &TrajectoryDataset,
    kind: ControlKind,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<HeadBatch> {
    let mut zs = Vec::new();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..batch {
        let r = rng.random_range(0..ds.runs.len());
        let run = &ds.runs[r];
        let (t, z) = &run.records[rng.random_range(0..run.records.len())];
        zs.push(z);
        ts.push(*t);
        let tr = ds.target(r, kind);
        ys.push(track_tensor(&tr.values, tr.frames, kind.dims())?);
    }
    Ok(HeadBatch {
        z: stack(&zs)?,
        t: ts,
        target: stack(&ys.iter().collect::<Vec<_>>())?,
    })
}

/// Trains a LatCH for `arch.kind` in `arch.noise_mode`.
pub fn train_latch(arch: LatchConfig, data: HeadData<'_>, cfg: &TrainConfig) -> Result<(Latch, Curve)> {
    cfg.validate()?;
    let kind = arch.kind;
    let mode = arch.noise_mode;
    match (mode, data) {
        (NoiseMode::Backward, HeadData::Latents(_)) => {
            return Err(Error::Missing(
                "backward-mode heads need a trajectory dataset; run the `trajectories` command first".into(),
            ))
        }
        (NoiseMode::Clean | NoiseMode::Forward, HeadData::Trajectories(_)) => {
            return Err(Error::invalid(format!("{mode} heads train on encoded clips, not trajectories")))
        }
        (_, HeadData::Latents(d)) if d.is_empty() => return Err(Error::invalid("no training latents")),
        (_, HeadData::Trajectories(d)) if d.is_empty() => return Err(Error::invalid("empty trajectory dataset")),
        _ => {}
    }
    let phase = 16 + 4 * super::kind_index(kind) as u64 + mode as u64;
    let mut rng = cfg.rng(phase);
    let mut head = Latch::new(arch, rng.random())?;
    let mut opt = Adam::new(&head.params, cfg);
    let mut curve = Curve::default();
    for step in 0..cfg.head_steps {
        let b = match data {
            HeadData::Latents(d) => latent_batch(d, kind, mode == NoiseMode::Forward, cfg.batch, &mut rng)?,
            HeadData::Trajectories(d) => trajectory_batch(d, kind, cfg.batch, &mut rng)?,
        };
        let mut g = Graph::<f32>::new();
        let p = head.params.bind(&mut g, true);
        let z = g.constant(b.z);
        let raw = head.forward_graph(&mut g, &p, z, &b.t)?;
        let loss = head_loss(&mut g, kind, raw, &b.target)?;
        curve.push("latch", step, f64::from(g.scalar(loss)))?;
        g.backward(loss)?;
        opt.update(&mut head.params, &p.grads(&g));
    }
    Ok((head, curve))
}

/// Trains a readout on frozen denoiser activations of forward-diffused latents.
pub fn train_readout(
    arch: ReadoutConfig,
    den: &Denoiser,
    data: &LatentSet,
    cfg: &TrainConfig,
) -> Result<(Readout, Curve)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training latents"));
    }
    if arch.input != den.config.dim {
        return Err(Error::invalid(format!(
            "readout input {} differs from denoiser width {}",
            arch.input, den.config.dim
        )));
    }
    let kind = arch.kind;
    let mut rng = cfg.rng(64 + super::kind_index(kind) as u64);
    let mut head = Readout::new(arch, rng.random());
    let mut opt = Adam::new(&head.params, cfg);
    let mut curve = Curve::default();
    let mut shuffle = rand_chacha::ChaCha8Rng::seed_from_u64(rng.random());
    for step in 0..cfg.head_steps {
        let idx = pick(&mut shuffle, data.len(), cfg.batch);
        let mut zs = Vec::new();
        let mut ts = Vec::new();
        let mut ys = Vec::new();
        let mut classes = Vec::new();
        for &i in &idx {
            let z0 = &data.latents[i];
            let t: f64 = rng.random_range(0.0..1.0);
            let noise = Tensor::randn(z0.shape().to_vec(), &mut rng);
            zs.push(forward_diffuse(z0, t, &noise)?);
            ts.push(t);
            classes.push(data.classes[i]);
            let tr = data.track(i, kind);
            ys.push(track_tensor(&tr.values, tr.frames, kind.dims())?);
        }
        let mut g = Graph::<f32>::new();
        let dp = den.params.bind(&mut g, false);
        let p = head.params.bind(&mut g, true);
        let z = g.constant(stack(&zs.iter().collect::<Vec<_>>())?);
        let tap = den.forward_graph(&mut g, &dp, z, &ts, &classes)?.tap;
        let raw = head.forward_graph(&mut g, &p, tap, &ts)?;
        let target = stack(&ys.iter().collect::<Vec<_>>())?;
        let loss = head_loss(&mut g, kind, raw, &target)?;
        curve.push("readout", step, f64::from(g.scalar(loss)))?;
        g.backward(loss)?;
        opt.update(&mut head.params, &p.grads(&g));
    }
    Ok((head, curve))
}
