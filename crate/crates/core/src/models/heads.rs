//! Control heads: LatCH on latents and readout on denoiser activations.
//!
//! Both emit raw outputs; [`activate`] maps them to control space: dB for
//! intensity, per-bin and per-frame probabilities for pitch and beats.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{add_block, add_linear, block, fourier_features, linear, time_token, LN_EPS, TIME_FEATURES};
use super::{expect_model, meta_parse, Bound, Checkpoint, NoiseMode, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::world::{ControlKind, ControlTrack};

/// Intensity heads predict `(dB - OFFSET) / SCALE`.
const DB_SCALE: f64 = 20.0;
const DB_OFFSET: f64 = -30.0;

/// Maps raw head outputs `[B, F, dims]` to control values.
pub fn activate<T: Real>(g: &mut Graph<T>, kind: ControlKind, raw: NodeId) -> Result<NodeId> {
    match kind {
        ControlKind::Intensity => {
            let y = g.scale(raw, DB_SCALE)?;
            g.offset(y, DB_OFFSET)
        }
        ControlKind::Pitch | ControlKind::Beats => g.sigmoid(raw),
    }
}

/// Unbatched control track from a `[1, F, dims]` activated node.
fn to_track<T: Real>(g: &Graph<T>, kind: ControlKind, node: NodeId) -> Result<ControlTrack> {
    let values = g.value(node).iter().map(|v| v.f64() as f32).collect();
    ControlTrack::new(kind, values)
}

fn with_batch(z: &Tensor) -> Result<Tensor> {
    match *z.shape() {
        [f, c] => z.clone().reshape([1, f, c]),
        [1, _, _] => Ok(z.clone()),
        ref s => Err(Error::invalid(format!("expected [F, C], got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatchConfig {
    pub kind: ControlKind,
    pub noise_mode: NoiseMode,
    pub latent: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_mult: usize,
}

impl LatchConfig {
    pub fn new(kind: ControlKind, noise_mode: NoiseMode) -> Self {
        Self {
            kind,
            noise_mode,
            latent: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_mult: 2,
        }
    }
}

/// Latent-control head: a small transformer from latents to one control.
#[derive(Clone, Debug)]
pub struct Latch {
    pub config: LatchConfig,
    pub params: ParamStore,
}

impl Latch {
    pub fn new(config: LatchConfig, seed: u64) -> Result<Self> {
        if config.dim % config.heads != 0 || (config.dim / config.heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "dim {} must split into {} heads of even width",
                config.dim, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        if config.noise_mode.uses_time() {
            add_linear(&mut p, "time", TIME_FEATURES, d, &mut rng);
        }
        add_linear(&mut p, "in", config.latent, d, &mut rng);
        for l in 0..config.layers {
            add_block(&mut p, &format!("layer{l}"), d, d * config.mlp_mult, &mut rng);
        }
        add_linear(&mut p, "out", d, config.kind.dims(), &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn kind(&self) -> ControlKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Raw outputs `[B, F, dims]` for latents `z [B, F, latent]`. Times are
    /// ignored by heads trained on clean latents.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: NodeId, t: &[f64]) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.config.latent {
            return Err(Error::invalid(format!(
                "head input must be [B, F, {}], got {shape:?}",
                self.config.latent
            )));
        }
        let (b, f) = (shape[0], shape[1]);
        let mut h = linear(g, p, "in", z)?;
        let prefix = if self.config.noise_mode.uses_time() {
            if t.len() != b {
                return Err(Error::invalid(format!("batch of {b} needs {b} times, got {}", t.len())));
            }
            let tok = time_token(g, p, "time", t)?;
            h = g.concat(&[tok, h], 1)?;
            1
        } else {
            0
        };
        for l in 0..self.config.layers {
            h = block(g, p, &format!("layer{l}"), h, self.config.heads)?;
        }
        let h = g.layer_norm(h, LN_EPS)?;
        let h = if prefix > 0 { g.slice(h, 1, prefix, f)? } else { h };
        linear(g, p, "out", h)
    }

    /// Control track predicted for one latent `[F, latent]`.
    pub fn predict(&self, z: &Tensor, t: f64) -> Result<ControlTrack> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let zn = g.constant(with_batch(z)?);
        let raw = self.forward_graph(&mut g, &p, zn, &[t])?;
        let y = activate(&mut g, self.kind(), raw)?;
        to_track(&g, self.kind(), y)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            ("model".into(), "latch".into()),
            ("kind".into(), c.kind.name().into()),
            ("noise_mode".into(), c.noise_mode.name().into()),
            ("latent".into(), c.latent.to_string()),
            ("dim".into(), c.dim.to_string()),
            ("layers".into(), c.layers.to_string()),
            ("heads".into(), c.heads.to_string()),
            ("mlp_mult".into(), c.mlp_mult.to_string()),
        ];
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        expect_model(m, "latch")?;
        let config = LatchConfig {
            kind: meta_parse(m, "kind")?,
            noise_mode: meta_parse(m, "noise_mode")?,
            latent: meta_parse(m, "latent")?,
            dim: meta_parse(m, "dim")?,
            layers: meta_parse(m, "layers")?,
            heads: meta_parse(m, "heads")?,
            mlp_mult: meta_parse(m, "mlp_mult")?,
        };
        let mut head = Latch::new(config, 0)?;
        head.params.load_from(&ckpt.params)?;
        Ok(head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub kind: ControlKind,
    /// Width of the tapped denoiser activations.
    pub input: usize,
    pub hidden: usize,
}

impl ReadoutConfig {
    pub fn new(kind: ControlKind, input: usize) -> Self {
        Self {
            kind,
            input,
            hidden: 64,
        }
    }
}

/// Per-frame MLP over tapped denoiser activations and time features.
#[derive(Clone, Debug)]
pub struct Readout {
    pub config: ReadoutConfig,
    pub params: ParamStore,
}

impl Readout {
    pub fn new(config: ReadoutConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        add_linear(&mut p, "proj", config.input + TIME_FEATURES, config.hidden, &mut rng);
        add_linear(&mut p, "mlp0", config.hidden, config.hidden, &mut rng);
        add_linear(&mut p, "mlp1", config.hidden, config.kind.dims(), &mut rng);
        Self { config, params: p }
    }

    pub fn kind(&self) -> ControlKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Raw outputs `[B, F, dims]` from a tap `[B, F, input]`.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tap: NodeId, t: &[f64]) -> Result<NodeId> {
        let shape = g.shape(tap).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input {
            return Err(Error::invalid(format!(
                "readout input must be [B, F, {}], got {shape:?}",
                self.config.input
            )));
        }
        let (b, f) = (shape[0], shape[1]);
        if t.len() != b {
            return Err(Error::invalid(format!("batch of {b} needs {b} times, got {}", t.len())));
        }
        let mut feats = Vec::with_capacity(b * f * TIME_FEATURES);
        for &ti in t {
            let row = fourier_features(ti);
            for _ in 0..f {
                feats.extend(row.iter().map(|&v| T::lit(v)));
            }
        }
        let time = g.constant(Tensor::new([b, f, TIME_FEATURES], feats)?);
        let h = g.concat(&[tap, time], 2)?;
        let h = linear(g, p, "proj", h)?;
        let h = g.gelu(h)?;
        let h = linear(g, p, "mlp0", h)?;
        let h = g.gelu(h)?;
        linear(g, p, "mlp1", h)
    }

    /// Control track predicted from one tap `[F, input]`.
    pub fn predict(&self, tap: &Tensor, t: f64) -> Result<ControlTrack> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let h = g.constant(with_batch(tap)?);
        let raw = self.forward_graph(&mut g, &p, h, &[t])?;
        let y = activate(&mut g, self.kind(), raw)?;
        to_track(&g, self.kind(), y)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            ("model".into(), "readout".into()),
            ("kind".into(), c.kind.name().into()),
            ("input".into(), c.input.to_string()),
            ("hidden".into(), c.hidden.to_string()),
        ];
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        expect_model(m, "readout")?;
        let config = ReadoutConfig {
            kind: meta_parse(m, "kind")?,
            input: meta_parse(m, "input")?,
            hidden: meta_parse(m, "hidden")?,
        };
        let mut head = Readout::new(config, 0);
        head.params.load_from(&ckpt.params)?;
        Ok(head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Denoiser, DenoiserConfig};

    #[test]
    fn latch_is_small_next_to_denoiser() {
        let den = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        for kind in ControlKind::ALL {
            let head = Latch::new(LatchConfig::new(kind, NoiseMode::Backward), 0).unwrap();
            assert!(head.param_count() <= 200_000);
            assert!((head.param_count() as f64) < 0.25 * den.param_count() as f64);
        }
    }

    #[test]
    fn clean_mode_has_no_time_token() {
        let clean = Latch::new(LatchConfig::new(ControlKind::Beats, NoiseMode::Clean), 0).unwrap();
        let fwd = Latch::new(LatchConfig::new(ControlKind::Beats, NoiseMode::Forward), 0).unwrap();
        assert!(clean.params.get("time.w").is_err());
        assert_eq!(fwd.param_count() - clean.param_count(), TIME_FEATURES * 64 + 64);
        let z = Tensor::full([10, 8], 0.2f32);
        assert_eq!(clean.predict(&z, 0.3).unwrap(), clean.predict(&z, 0.9).unwrap());
        assert_ne!(fwd.predict(&z, 0.3).unwrap(), fwd.predict(&z, 0.9).unwrap());
    }

    #[test]
    fn outputs_live_in_control_space() {
        let z = Tensor::full([10, 8], 0.2f32);
        let pitch = Latch::new(LatchConfig::new(ControlKind::Pitch, NoiseMode::Forward), 1).unwrap();
        let track = pitch.predict(&z, 0.5).unwrap();
        assert_eq!(track.values.len(), 10 * 16);
        assert!(track.values.iter().all(|&v| v > 0.0 && v < 1.0));
        let readout = Readout::new(ReadoutConfig::new(ControlKind::Beats, 32), 2);
        let track = readout.predict(&Tensor::full([10, 32], 0.1f32), 0.5).unwrap();
        assert!(track.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn checkpoints_restore_heads() {
        let head = Latch::new(LatchConfig::new(ControlKind::Intensity, NoiseMode::Forward), 4).unwrap();
        let back = Latch::from_checkpoint(&head.to_checkpoint()).unwrap();
        assert_eq!(back.params, head.params);
        assert_eq!(back.config, head.config);
        let ro = Readout::new(ReadoutConfig::new(ControlKind::Pitch, 48), 4);
        assert_eq!(Readout::from_checkpoint(&ro.to_checkpoint()).unwrap().params, ro.params);
        assert!(Readout::from_checkpoint(&head.to_checkpoint()).is_err());
    }
}
