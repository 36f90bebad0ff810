//! Finite-difference checks of whole losses through the models and the
//! feature extractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tiny::{tiny_models, TINY_FRAMES};
use crate::error::Result;
use crate::tensor::{finite_diff_check, FdReport, Graph, NodeId, Tensor};
use crate::training::{head_loss, reconstruction_loss};
use crate::world::{feature_graph, ControlKind, HOP};

/// Elements checked per leaf; the rest of each leaf is skipped for speed.
const PROBES: usize = 24;

fn probe_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= PROBES {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..PROBES).map(|_| rng.random_range(0..n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f32>::randn(shape.to_vec(), rng).cast()
}

fn check(g: &mut Graph<f64>, loss: NodeId, leaf: NodeId, eps: f64, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let idx = probe_indices(g.shape(leaf).iter().product(), rng);
    finite_diff_check(g, loss, leaf, eps, Some(&idx))
}

fn track_target(kind: ControlKind, frames: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = frames * kind.dims();
    let data = if kind == ControlKind::Intensity {
        (0..n).map(|_| rng.random_range(-40.0..-5.0)).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    Tensor::new(vec![1, frames, kind.dims()], data).expect("target shape")
}

/// Names of the composites covered by [`composite_sweep`].
pub const COMPOSITES: [&str; 7] = [
    "vae_decode_reconstruction",
    "denoiser_v_loss",
    "latch_head_loss",
    "readout_head_loss",
    "extract_intensity",
    "extract_pitch",
    "extract_beats",
];

/// Checks the gradient of each composite loss with respect to its input.
pub fn composite_sweep(seed: u64, eps: f64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = tiny_models();
    let frames = TINY_FRAMES;
    let latent = m.vae.config.latent;
    let mut out = Vec::new();

    // The spectral term's longest window is 1024 samples.
    let recon_frames = 1024usize.div_ceil(HOP).max(frames);
    let mut g = Graph::<f64>::new();
    let p = m.vae.params.bind(&mut g, false);
    let z = g.param(randn(&[1, recon_frames, latent], &mut rng));
    let recon = m.vae.decode_graph(&mut g, &p, z)?;
    let target = g.constant(randn(&[1, recon_frames * HOP], &mut rng).map(|v| 0.3 * v));
    let loss = reconstruction_loss(&mut g, recon, target)?;
    out.push((COMPOSITES[0], check(&mut g, loss, z, eps, &mut rng)?));

    let mut g = Graph::<f64>::new();
    let p = m.denoiser.params.bind(&mut g, false);
    let z = g.param(randn(&[2, frames, latent], &mut rng));
    let v = m.denoiser.forward_graph(&mut g, &p, z, &[0.3, 0.8], &[0, 2])?.v;
    let y = g.constant(randn(&[2, frames, latent], &mut rng));
    let loss = crate::training::losses::mse(&mut g, v, y)?;
    out.push((COMPOSITES[1], check(&mut g, loss, z, eps, &mut rng)?));

    let mut worst = FdReport::default();
    for head in &m.latches {
        let kind = head.kind();
        let mut g = Graph::<f64>::new();
        let p = head.params.bind(&mut g, false);
        let z = g.param(randn(&[1, frames, latent], &mut rng));
        let raw = head.forward_graph(&mut g, &p, z, &[0.4])?;
        let loss = head_loss(&mut g, kind, raw, &track_target(kind, frames, &mut rng))?;
        worst = merge(worst, check(&mut g, loss, z, eps, &mut rng)?);
    }
    out.push((COMPOSITES[2], worst));

    let mut worst = FdReport::default();
    for head in &m.readouts {
        let kind = head.kind();
        let mut g = Graph::<f64>::new();
        let dp = m.denoiser.params.bind(&mut g, false);
        let hp = head.params.bind(&mut g, false);
        let z = g.param(randn(&[1, frames, latent], &mut rng));
        let tap = m.denoiser.forward_graph(&mut g, &dp, z, &[0.6], &[1])?.tap;
        let raw = head.forward_graph(&mut g, &hp, tap, &[0.6])?;
        let loss = head_loss(&mut g, kind, raw, &track_target(kind, frames, &mut rng))?;
        worst = merge(worst, check(&mut g, loss, z, eps, &mut rng)?);
    }
    out.push((COMPOSITES[3], worst));

    for (name, kind) in COMPOSITES[4..].iter().zip(ControlKind::ALL) {
        let mut g = Graph::<f64>::new();
        let x = g.param(randn(&[1, frames * HOP], &mut rng).map(|v| 0.3 * v));
        let feat = feature_graph(&mut g, kind, x)?;
        let r = g.constant(Tensor::<f64>::uniform(g.shape(feat).to_vec(), -1.0, 1.0, &mut rng));
        let fr = g.mul(feat, r)?;
        let loss = g.sum(fr)?;
        out.push((*name, check(&mut g, loss, x, eps, &mut rng)?));
    }
    Ok(out)
}

fn merge(a: FdReport, b: FdReport) -> FdReport {
    FdReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        max_abs_error: a.max_abs_error.max(b.max_abs_error),
        checked: a.checked + b.checked,
    }
}
