//! Training loops for the autoencoder, the denoiser and the control heads.

mod heads;
pub mod losses;
mod trajectories;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use heads::{train_latch, train_readout, HeadData};
pub use losses::{bce_prob, head_loss, sparse_bce, sparse_mean, sparse_weights, SPARSE_THRESHOLD};
pub use trajectories::{
    build_trajectory_dataset, read_trajectory_dataset, write_trajectory_dataset, TrajectoryDataset, TrajectoryRun,
};

use crate::diffusion::schedule_at;
use crate::error::{Error, Result};
use crate::models::{Denoiser, DenoiserConfig, ParamStore, Vae, VaeConfig, NULL_CLASS};
use crate::parallel::par_map;
use crate::tensor::{Graph, Tensor};
use crate::world::{extract, Clip, ControlKind, ControlTrack, HOP};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Synthetic training clips.
    pub clips: usize,
    /// Held-out clips for evaluation.
    pub heldout: usize,
    /// Samples per clip.
    pub samples: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub vae_steps: usize,
    pub denoiser_steps: usize,
    pub head_steps: usize,
    /// Autoencoder training crop length in samples.
    pub vae_crop: usize,
    pub class_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clips: 4096,
            heldout: 256,
            samples: crate::world::DEFAULT_SAMPLES,
            batch: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            vae_steps: 5000,
            denoiser_steps: 20_000,
            head_steps: 3000,
            vae_crop: 4096,
            class_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clips", self.clips),
            ("heldout", self.heldout),
            ("samples", self.samples),
            ("batch", self.batch),
            ("vae_steps", self.vae_steps),
            ("denoiser_steps", self.denoiser_steps),
            ("head_steps", self.head_steps),
            ("vae_crop", self.vae_crop),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("train.{name} must be positive")));
        }
        if self.samples % HOP != 0 || self.vae_crop % HOP != 0 {
            return Err(Error::invalid(format!("clip and crop lengths must be multiples of {HOP}")));
        }
        if self.vae_crop > self.samples || self.vae_crop < 1024 {
            return Err(Error::invalid("train.vae_crop must lie in [1024, samples]"));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("optimizer settings out of range"));
        }
        if !(0.0..1.0).contains(&self.class_dropout) || self.clip_norm < 0.0 {
            return Err(Error::invalid("class_dropout must be in [0, 1) and clip_norm non-negative"));
        }
        Ok(())
    }

    fn rng(&self, phase: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ phase.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Loss per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curve {
    pub losses: Vec<f64>,
}

impl Curve {
    fn push(&mut self, phase: &str, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            let last = self.losses.last().copied().unwrap_or(f64::NAN);
            return Err(Error::Numerical(format!(
                "{phase} loss became {loss} at step {step} (previous {last})"
            )));
        }
        self.losses.push(loss);
        Ok(())
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    /// Writes `step,loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::format("curve CSV", e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["step", "loss"]).map_err(to_err)?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()]).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Adam with fixed learning rate.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = store.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_norm: cfg.clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from gradients in store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let (inv_bc2, eps, scale) = (1.0 / bc2 as f32, self.eps as f32, scale as f32);
        for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Autoencoder reconstruction loss: time-domain MSE plus magnitude MSE of
/// STFTs with 256, 512 and 1024 point windows.
pub fn reconstruction_loss<T: crate::Real>(
    g: &mut Graph<T>,
    recon: crate::NodeId,
    target: crate::NodeId,
) -> Result<crate::NodeId> {
    let mut total = losses::mse(g, recon, target)?;
    for n_fft in [256, 512, 1024] {
        let a = g.stft_mag(recon, n_fft, n_fft / 4)?;
        let b = g.stft_mag(target, n_fft, n_fft / 4)?;
        let scale = 1.0 / (n_fft as f64).sqrt();
        let a = g.scale(a, scale)?;
        let b = g.scale(b, scale)?;
        let l = losses::mse(g, a, b)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

pub fn train_vae(clips: &[Clip], cfg: &TrainConfig, arch: VaeConfig) -> Result<(Vae, Curve)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    let mut rng = cfg.rng(1);
    let mut vae = Vae::new(arch, rng.random());
    let mut opt = Adam::new(&vae.params, cfg);
    let mut curve = Curve::default();
    let crop = cfg.vae_crop;
    for step in 0..cfg.vae_steps {
        let mut batch = Vec::with_capacity(cfg.batch * crop);
        for _ in 0..cfg.batch {
            let clip = &clips[rng.random_range(0..clips.len())];
            let hops = (clip.wave.len() - crop) / HOP;
            let start = rng.random_range(0..=hops) * HOP;
            batch.extend_from_slice(&clip.wave.samples[start..start + crop]);
        }
        let mut g = Graph::<f32>::new();
        let p = vae.params.bind(&mut g, true);
        let x = g.constant(Tensor::new([cfg.batch, crop], batch)?);
        let z = vae.encode_graph(&mut g, &p, x)?;
        let y = vae.decode_graph(&mut g, &p, z)?;
        let loss = reconstruction_loss(&mut g, y, x)?;
        curve.push("autoencoder", step, f64::from(g.scalar(loss)))?;
        g.backward(loss)?;
        opt.update(&mut vae.params, &p.grads(&g));
    }
    vae.latent_scale = latent_rms(&vae, &clips[..clips.len().min(256)])? as f32;
    vae.trained = true;
    Ok((vae, curve))
}

fn latent_rms(vae: &Vae, clips: &[Clip]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for clip in clips {
        let mut g = Graph::<f32>::new();
        let p = vae.params.bind(&mut g, false);
        let x = g.constant(Tensor::new([1, clip.wave.len()], clip.wave.samples.clone())?);
        let z = vae.encode_graph(&mut g, &p, x)?;
        sum += g.value(z).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        n += g.value(z).len();
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if !(rms.is_finite() && rms > 0.0) {
        return Err(Error::Numerical(format!("latent scale {rms}")));
    }
    Ok(rms)
}

/// Reconstruction SNR in dB pooled over clips.
pub fn reconstruction_snr(vae: &Vae, waves: &[&crate::world::Waveform]) -> Result<f64> {
    let mut signal = 0.0;
    let mut error = 0.0;
    for w in waves {
        let back = vae.decode(&vae.encode(w)?)?;
        for (a, b) in w.samples.iter().zip(&back.samples) {
            signal += f64::from(*a) * f64::from(*a);
            error += f64::from(a - b) * f64::from(a - b);
        }
    }
    Ok(10.0 * (signal / error.max(1e-30)).log10())
}

/// Encoded clips with their classes and extracted control tracks.
#[derive(Clone, Debug)]
pub struct LatentSet {
    /// `[F, latent]` per clip.
    pub latents: Vec<Tensor>,
    pub classes: Vec<usize>,
    /// Extractor outputs on the source clip, in [`ControlKind::ALL`] order.
    pub tracks: Vec<[ControlTrack; 3]>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn track(&self, i: usize, kind: ControlKind) -> &ControlTrack {
        &self.tracks[i][kind_index(kind)]
    }

    pub fn frames(&self) -> usize {
        self.latents.first().map_or(0, |z| z.shape()[0])
    }
}

pub(crate) fn kind_index(kind: ControlKind) -> usize {
    ControlKind::ALL.iter().position(|&k| k == kind).expect("listed kind")
}

/// Extractor tracks for all three controls.
pub fn extract_all(w: &crate::world::Waveform) -> Result<[ControlTrack; 3]> {
    Ok([
        extract(ControlKind::Intensity, w)?,
        extract(ControlKind::Pitch, w)?,
        extract(ControlKind::Beats, w)?,
    ])
}

pub fn encode_clips(vae: &Vae, clips: &[Clip], jobs: usize) -> Result<LatentSet> {
    let rows = par_map(clips.len(), jobs, |i| {
        let clip = &clips[i];
        Ok((vae.encode(&clip.wave)?, extract_all(&clip.wave)?))
    })?;
    let classes = clips.iter().map(|c| c.spec.class).collect();
    let (latents, tracks) = rows.into_iter().unzip();
    Ok(LatentSet {
        latents,
        classes,
        tracks,
    })
}

/// Replaces each clip's tracks by the controls of its reconstruction,
/// `C(D(z0))`, the quantity a LatCH approximates.
pub fn decoded_targets(vae: &Vae, data: &LatentSet, jobs: usize) -> Result<LatentSet> {
    let tracks = par_map(data.len(), jobs, |i| extract_all(&vae.decode(&data.latents[i])?))?;
    Ok(LatentSet {
        tracks,
        ..data.clone()
    })
}

/// Stacks rows of a set of `[F, C]` tensors into `[B, F, C]`.
pub(crate) fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let shape = items
        .first()
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        t.same_shape(items[0])?;
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// `(z_t, v_target)` for clean `z0`, noise and time.
pub fn v_pair(z0: &Tensor, eps: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    z0.same_shape(eps)?;
    let (a, s) = schedule_at(t)?;
    let (a32, s32) = (a as f32, s as f32);
    let zt = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a32 * z + s32 * e).collect();
    let v = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a32 * e - s32 * z).collect();
    Ok((Tensor::new(z0.shape().to_vec(), zt)?, Tensor::new(z0.shape().to_vec(), v)?))
}

struct VBatch {
    zt: Tensor,
    v: Tensor,
    t: Vec<f64>,
    class: Vec<usize>,
}

fn v_batch(data: &LatentSet, idx: &[usize], rng: &mut ChaCha8Rng, dropout: f64) -> Result<VBatch> {
    let mut zts = Vec::new();
    let mut vs = Vec::new();
    let mut t = Vec::new();
    let mut class = Vec::new();
    for &i in idx {
        let z0 = &data.latents[i];
        let ti: f64 = rng.random_range(0.0..1.0);
        let eps = Tensor::randn(z0.shape().to_vec(), rng);
        let (zt, v) = v_pair(z0, &eps, ti)?;
        zts.push(zt);
        vs.push(v);
        t.push(ti);
        let drop = rng.random_bool(dropout);
        class.push(if drop { NULL_CLASS } else { data.classes[i] });
    }
    Ok(VBatch {
        zt: stack(&zts.iter().collect::<Vec<_>>())?,
        v: stack(&vs.iter().collect::<Vec<_>>())?,
        t,
        class,
    })
}

pub fn train_denoiser(data: &LatentSet, cfg: &TrainConfig, arch: DenoiserConfig) -> Result<(Denoiser, Curve)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training latents"));
    }
    let mut rng = cfg.rng(2);
    let mut den = Denoiser::new(arch, rng.random())?;
    let mut opt = Adam::new(&den.params, cfg);
    let mut curve = Curve::default();
    for step in 0..cfg.denoiser_steps {
        let idx = pick(&mut rng, data.len(), cfg.batch);
        let b = v_batch(data, &idx, &mut rng, cfg.class_dropout)?;
        let mut g = Graph::<f32>::new();
        let p = den.params.bind(&mut g, true);
        let zt = g.constant(b.zt);
        let target = g.constant(b.v);
        let out = den.forward_graph(&mut g, &p, zt, &b.t, &b.class)?;
        let loss = losses::mse(&mut g, out.v, target)?;
        curve.push("denoiser", step, f64::from(g.scalar(loss)))?;
        g.backward(loss)?;
        opt.update(&mut den.params, &p.grads(&g));
    }
    Ok((den, curve))
}

/// Held-out v-prediction MSE and the variance of the v targets, over `draws`
/// random `(clip, t, noise)` triples.
pub fn v_loss_eval(den: &Denoiser, data: &LatentSet, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0;
    let mut targets = Vec::new();
    for _ in 0..draws {
        let idx = pick(&mut rng, data.len(), 1);
        let b = v_batch(data, &idx, &mut rng, 0.0)?;
        let mut g = Graph::<f32>::new();
        let p = den.params.bind(&mut g, false);
        let zt = g.constant(b.zt);
        let out = den.forward_graph(&mut g, &p, zt, &b.t, &b.class)?;
        for (&a, &y) in g.value(out.v).iter().zip(b.v.data()) {
            err += f64::from(a - y).powi(2);
        }
        targets.extend(b.v.data().iter().map(|&y| f64::from(y)));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    Ok((err / n, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::random_clips;

    #[test]
    fn v_target_boundaries() {
        let z0 = Tensor::new([3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let eps = Tensor::new([3], vec![0.1f32, 0.2, -0.3]).unwrap();
        let (zt, v) = v_pair(&z0, &eps, 0.0).unwrap();
        assert_eq!(v, eps);
        assert_eq!(zt, z0);
        let (zt, v) = v_pair(&z0, &eps, 1.0).unwrap();
        assert_eq!(v.data(), &[-0.5, 1.0, -2.0]);
        assert_eq!(zt, eps);
    }

    #[test]
    fn v_split_inverts_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::randn([4, 8], &mut rng);
        let eps = Tensor::randn([4, 8], &mut rng);
        let (zt, v) = v_pair(&z0, &eps, 0.37).unwrap();
        let (z0b, epsb) = crate::diffusion::v_split(&zt, &v, 0.37).unwrap();
        assert!(z0b.max_abs_diff(&z0).unwrap() < 1e-5);
        assert!(epsb.max_abs_diff(&eps).unwrap() < 1e-5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let cfg = TrainConfig {
            lr: 0.1,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(&store, &cfg);
        for _ in 0..500 {
            let grads: Vec<Tensor> = store.tensors().map(|t| t.map(|w| 2.0 * w)).collect();
            opt.update(&mut store, &grads);
        }
        assert!(store.get("w").unwrap().data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn autoencoder_loss_falls_on_fixed_batch() {
        let clips = random_clips(2, 2048, 1).unwrap();
        let cfg = TrainConfig {
            batch: 2,
            vae_crop: 1024,
            samples: 2048,
            lr: 1e-3,
            ..Default::default()
        };
        let mut vae = Vae::new(
            VaeConfig {
                res_units: 1,
                ..Default::default()
            },
            0,
        );
        let mut opt = Adam::new(&vae.params, &cfg);
        let data: Vec<f32> = clips.iter().flat_map(|c| c.wave.samples[..1024].to_vec()).collect();
        let mut losses = Vec::new();
        for _ in 0..30 {
            let mut g = Graph::<f32>::new();
            let p = vae.params.bind(&mut g, true);
            let x = g.constant(Tensor::new([2, 1024], data.clone()).unwrap());
            let z = vae.encode_graph(&mut g, &p, x).unwrap();
            let y = vae.decode_graph(&mut g, &p, z).unwrap();
            let loss = reconstruction_loss(&mut g, y, x).unwrap();
            losses.push(g.scalar(loss));
            g.backward(loss).unwrap();
            opt.update(&mut vae.params, &p.grads(&g));
        }
        assert!(losses[29] < 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn nan_loss_aborts() {
        let mut c = Curve::default();
        c.push("x", 0, 1.0).unwrap();
        let err = c.push("x", 1, f64::NAN).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
