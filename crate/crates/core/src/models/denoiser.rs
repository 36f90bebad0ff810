//! Latent v-prediction transformer with class and time tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{add_block, add_linear, block, linear, time_token, TIME_FEATURES};
use super::{expect_model, meta_parse, Bound, Checkpoint, ParamStore};
use crate::diffusion::{cfg_combine, Conditioning, VModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::world::NUM_CLASSES;

/// Embedding row used for the unconditional branch.
pub const NULL_CLASS: usize = NUM_CLASSES;
/// Class and time tokens precede the frames.
const PREFIX: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    /// Number of layers whose output forms the tap read by readout heads.
    pub tap_layer: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_mult: 4,
            tap_layer: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

/// Outputs of one denoiser pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserOut {
    /// `[B, F, latent]`
    pub v: NodeId,
    /// `[B, F, dim]` activations after `tap_layer` layers.
    pub tap: NodeId,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.dim % config.heads != 0 || (config.dim / config.heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "dim {} must split into {} heads of even width",
                config.dim, config.heads
            )));
        }
        if config.tap_layer == 0 || config.tap_layer > config.layers {
            return Err(Error::invalid(format!(
                "tap layer {} outside 1..={}",
                config.tap_layer, config.layers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        p.add("class_emb", Tensor::randn([NUM_CLASSES + 1, d], &mut rng).map(|v| v * 0.5));
        add_linear(&mut p, "time", TIME_FEATURES, d, &mut rng);
        add_linear(&mut p, "in", config.latent, d, &mut rng);
        for l in 0..config.layers {
            add_block(&mut p, &format!("layer{l}"), d, d * config.mlp_mult, &mut rng);
        }
        add_linear(&mut p, "out", d, config.latent, &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Runs the network on `z [B, F, latent]` with per-item times and classes.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: NodeId,
        t: &[f64],
        class: &[usize],
    ) -> Result<DenoiserOut> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.config.latent {
            return Err(Error::invalid(format!(
                "denoiser input must be [B, F, {}], got {shape:?}",
                self.config.latent
            )));
        }
        let (b, f) = (shape[0], shape[1]);
        if t.len() != b || class.len() != b {
            return Err(Error::invalid(format!(
                "batch of {b} needs {b} times and classes, got {} and {}",
                t.len(),
                class.len()
            )));
        }
        if let Some(c) = class.iter().find(|&&c| c > NULL_CLASS) {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let d = self.config.dim;
        let cls = g.gather(p.get("class_emb")?, 0, class)?;
        let cls = g.reshape(cls, &[b, 1, d])?;
        let time = time_token(g, p, "time", t)?;
        let h = linear(g, p, "in", z)?;
        let mut h = g.concat(&[cls, time, h], 1)?;
        let mut tap = None;
        for l in 0..self.config.layers {
            h = block(g, p, &format!("layer{l}"), h, self.config.heads)?;
            if l + 1 == self.config.tap_layer {
                tap = Some(g.slice(h, 1, PREFIX, f)?);
            }
        }
        let h = g.layer_norm(h, super::layers::LN_EPS)?;
        let h = g.slice(h, 1, PREFIX, f)?;
        let v = linear(g, p, "out", h)?;
        Ok(DenoiserOut {
            v,
            tap: tap.expect("tap layer within depth"),
        })
    }

    /// Frozen forward returning `(v, tap)` as tensors of shape `[F, ·]`.
    pub fn predict_with_tap(&self, z_t: &Tensor, t: f64, class: Option<usize>) -> Result<(Tensor, Tensor)> {
        let (z, squeeze) = batch_of_one(z_t)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let zn = g.constant(z);
        let out = self.forward_graph(&mut g, &p, zn, &[t], &[class.unwrap_or(NULL_CLASS)])?;
        let v = g.tensor(out.v);
        let tap = g.tensor(out.tap);
        if squeeze {
            let (f, d) = (tap.shape()[1], tap.shape()[2]);
            Ok((v.reshape(z_t.shape().to_vec())?, tap.reshape([f, d])?))
        } else {
            Ok((v, tap))
        }
    }

    /// One pass over `z [1, F, latent]` carrying the conditional branch and,
    /// when CFG is active, the unconditional branch as batch item 1.
    pub fn cfg_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: NodeId,
        t: f64,
        cond: Conditioning,
    ) -> Result<DenoiserOut> {
        let class = cond.class.unwrap_or(NULL_CLASS);
        if cond.uses_cfg() {
            let zz = g.concat(&[z, z], 0)?;
            self.forward_graph(g, p, zz, &[t, t], &[class, NULL_CLASS])
        } else {
            self.forward_graph(g, p, z, &[t], &[class])
        }
    }

    /// CFG-combined velocity `[F, latent]` from a [`Denoiser::cfg_forward`] pass.
    pub fn cfg_value<T: Real>(&self, g: &Graph<T>, v: NodeId, cond: Conditioning) -> Result<Tensor> {
        let shape = g.shape(v);
        let (f, c) = (shape[1], shape[2]);
        let all: Vec<f32> = g.value(v).iter().map(|x| x.f64() as f32).collect();
        let cond_v = Tensor::new([f, c], all[..f * c].to_vec())?;
        if !cond.uses_cfg() {
            return Ok(cond_v);
        }
        let uncond_v = Tensor::new([f, c], all[f * c..].to_vec())?;
        cfg_combine(&cond_v, &uncond_v, cond.cfg_scale)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            ("model".into(), "denoiser".into()),
            ("latent".into(), c.latent.to_string()),
            ("dim".into(), c.dim.to_string()),
            ("layers".into(), c.layers.to_string()),
            ("heads".into(), c.heads.to_string()),
            ("mlp_mult".into(), c.mlp_mult.to_string()),
            ("tap_layer".into(), c.tap_layer.to_string()),
        ];
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        expect_model(m, "denoiser")?;
        let config = DenoiserConfig {
            latent: meta_parse(m, "latent")?,
            dim: meta_parse(m, "dim")?,
            layers: meta_parse(m, "layers")?,
            heads: meta_parse(m, "heads")?,
            mlp_mult: meta_parse(m, "mlp_mult")?,
            tap_layer: meta_parse(m, "tap_layer")?,
        };
        let mut den = Denoiser::new(config, 0)?;
        den.params.load_from(&ckpt.params)?;
        Ok(den)
    }
}

/// Accepts `[F, C]` or `[1, F, C]`; reports whether a batch axis was added.
fn batch_of_one(z: &Tensor) -> Result<(Tensor, bool)> {
    match *z.shape() {
        [f, c] => Ok((z.clone().reshape([1, f, c])?, true)),
        [1, _, _] => Ok((z.clone(), false)),
        ref s => Err(Error::invalid(format!("expected a single latent [F, C], got {s:?}"))),
    }
}

impl VModel for Denoiser {
    fn predict_v(&self, z_t: &Tensor, t: f64, class: Option<usize>) -> Result<Tensor> {
        Ok(self.predict_with_tap(z_t, t, class)?.0)
    }

    fn predict_cfg(&self, z_t: &Tensor, t: f64, cond: Conditioning) -> Result<Tensor> {
        let (z, squeeze) = batch_of_one(z_t)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let zn = g.constant(z);
        let out = self.cfg_forward(&mut g, &p, zn, t, cond)?;
        let v = self.cfg_value(&g, out.v, cond)?;
        if squeeze {
            Ok(v)
        } else {
            v.reshape(z_t.shape().to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                dim: 32,
                layers: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn output_and_tap_shapes() {
        let den = small();
        let z = Tensor::full([12, 8], 0.1f32);
        let (v, tap) = den.predict_with_tap(&z, 0.5, Some(1)).unwrap();
        assert_eq!(v.shape(), &[12, 8]);
        assert_eq!(tap.shape(), &[12, 32]);
        assert!(v.all_finite());
    }

    #[test]
    fn class_and_time_change_output() {
        let den = small();
        let z = Tensor::full([6, 8], 0.3f32);
        let a = den.predict_v(&z, 0.5, Some(0)).unwrap();
        let b = den.predict_v(&z, 0.5, Some(2)).unwrap();
        let c = den.predict_v(&z, 0.2, Some(0)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-4);
        assert!(a.max_abs_diff(&c).unwrap() > 1e-4);
    }

    #[test]
    fn batched_cfg_matches_separate_branches() {
        let den = small();
        let z = Tensor::randn([6, 8], &mut ChaCha8Rng::seed_from_u64(2));
        let cond = Conditioning::class(1, 7.0);
        let batched = den.predict_cfg(&z, 0.4, cond).unwrap();
        let c = den.predict_v(&z, 0.4, Some(1)).unwrap();
        let u = den.predict_v(&z, 0.4, None).unwrap();
        let separate = cfg_combine(&c, &u, 7.0).unwrap();
        assert!(batched.max_abs_diff(&separate).unwrap() < 1e-4);
    }

    #[test]
    fn rejects_bad_config_and_class() {
        assert!(Denoiser::new(DenoiserConfig { dim: 30, ..Default::default() }, 0).is_err());
        assert!(Denoiser::new(DenoiserConfig { tap_layer: 9, ..Default::default() }, 0).is_err());
        assert!(small().predict_v(&Tensor::zeros([4, 8]), 0.5, Some(7)).is_err());
    }
}
