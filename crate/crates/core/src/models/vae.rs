//! Convolutional waveform autoencoder, 64 samples per latent frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_model, meta_parse, Bound, Checkpoint, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::world::{Waveform, HOP};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent: usize,
    /// Encoder widths after the first three convolutions; the decoder mirrors them.
    pub channels: [usize; 3],
    /// Dilated residual units per decoder stage (dilations 1, 3, 9, ...).
    pub res_units: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            channels: [16, 32, 64],
            res_units: 4,
        }
    }
}

const RES_KERNEL: usize = 7;

/// (kernel, stride, pad) per encoder conv; the decoder runs them in reverse.
const STAGES: [(usize, usize, usize); 4] = [(8, 4, 2), (8, 4, 2), (4, 2, 1), (4, 2, 1)];

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
    /// Latents are divided by this after encoding so the prior sees unit scale.
    pub latent_scale: f32,
    pub trained: bool,
}

fn add_conv(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) {
    let bound = gain / ((k * cin) as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::uniform([k, cin, cout], -bound, bound, rng));
    store.add(&format!("{name}.b"), Tensor::zeros([cout]));
}

fn add_convt(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) {
    let bound = 1.0 / ((k * cin) as f64 / 2.0).sqrt();
    store.add(&format!("{name}.w"), Tensor::uniform([cin, k, cout], -bound, bound, rng));
    store.add(&format!("{name}.b"), Tensor::zeros([cout]));
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [c0, c1, c2] = config.channels;
        let widths = [1, c0, c1, c2, config.latent];
        for (i, &(k, _, _)) in STAGES.iter().enumerate() {
            add_conv(&mut p, &format!("enc{i}"), k, widths[i], widths[i + 1], 1.0, &mut rng);
        }
        for (j, &(k, _, _)) in STAGES.iter().rev().enumerate() {
            let (cin, cout) = (widths[4 - j], widths[3 - j]);
            add_convt(&mut p, &format!("dec{j}"), k, cin, cout, &mut rng);
            if j < 3 {
                for u in 0..config.res_units {
                    add_conv(&mut p, &format!("dec{j}.res{u}.a"), RES_KERNEL, cout, cout, 1.0, &mut rng);
                    add_conv(&mut p, &format!("dec{j}.res{u}.b"), 1, cout, cout, 0.3, &mut rng);
                }
            }
        }
        Self {
            config,
            params: p,
            latent_scale: 1.0,
            trained: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// `x [B, L]` to normalized latents `[B, L/64, latent]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (b, l) = match *g.shape(x) {
            [b, l] => (b, l),
            ref s => return Err(Error::invalid(format!("encoder input must be [B, L], got {s:?}"))),
        };
        if l == 0 || l % HOP != 0 {
            return Err(Error::invalid(format!("clip length {l} is not a multiple of {HOP}")));
        }
        let mut h = g.reshape(x, &[b, l, 1])?;
        for (i, &(_, stride, pad)) in STAGES.iter().enumerate() {
            h = g.conv1d(h, p.get(&format!("enc{i}.w"))?, stride, pad, 1)?;
            h = g.add(h, p.get(&format!("enc{i}.b"))?)?;
            if i < 3 {
                h = g.gelu(h)?;
            }
        }
        g.scale(h, 1.0 / f64::from(self.latent_scale))
    }

    /// Normalized latents `[B, F, latent]` to waveforms `[B, 64 F]`.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: NodeId) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.config.latent {
            return Err(Error::invalid(format!(
                "decoder input must be [B, F, {}], got {shape:?}",
                self.config.latent
            )));
        }
        let mut h = g.scale(z, f64::from(self.latent_scale))?;
        for (j, &(_, stride, pad)) in STAGES.iter().rev().enumerate() {
            h = g.conv_transpose1d(h, p.get(&format!("dec{j}.w"))?, stride, pad)?;
            h = g.add(h, p.get(&format!("dec{j}.b"))?)?;
            if j == 3 {
                break;
            }
            h = g.gelu(h)?;
            let mut dil = 1;
            for u in 0..self.config.res_units {
                let name = format!("dec{j}.res{u}");
                let r = g.gelu(h)?;
                let r = g.conv1d(r, p.get(&format!("{name}.a.w"))?, 1, dil * (RES_KERNEL / 2), dil)?;
                let r = g.add(r, p.get(&format!("{name}.a.b"))?)?;
                let r = g.gelu(r)?;
                let r = g.conv1d(r, p.get(&format!("{name}.b.w"))?, 1, 0, 1)?;
                let r = g.add(r, p.get(&format!("{name}.b.b"))?)?;
                h = g.add(h, r)?;
                dil *= 3;
            }
        }
        let h = g.tanh(h)?;
        g.reshape(h, &[shape[0], shape[1] * HOP])
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Missing("autoencoder parameters are untrained".into()))
        }
    }

    /// Encodes one clip to `[F, latent]`.
    pub fn encode(&self, wave: &Waveform) -> Result<Tensor> {
        self.require_trained()?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new([1, wave.len()], wave.samples.clone())?);
        let z = self.encode_graph(&mut g, &p, x)?;
        let [_, f, c] = g.shape(z) else { unreachable!() };
        let shape = [*f, *c];
        g.tensor(z).reshape(shape)
    }

    /// Decodes `[F, latent]` to a waveform of `64 F` samples.
    pub fn decode(&self, z: &Tensor) -> Result<Waveform> {
        self.require_trained()?;
        let [f, c] = *z.shape() else {
            return Err(Error::invalid(format!("latent must be [F, C], got {:?}", z.shape())));
        };
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let zn = g.constant(z.clone().reshape([1, f, c])?);
        let x = self.decode_graph(&mut g, &p, zn)?;
        Ok(Waveform::new(g.tensor(x).into_data()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            ("model".into(), "vae".into()),
            ("latent".into(), c.latent.to_string()),
            ("channels".into(), c.channels.map(|v| v.to_string()).join(",")),
            ("res_units".into(), c.res_units.to_string()),
            ("latent_scale".into(), self.latent_scale.to_string()),
            ("trained".into(), self.trained.to_string()),
        ];
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        expect_model(m, "vae")?;
        let channels: String = meta_parse(m, "channels")?;
        let ch = channels
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .ok()
            .and_then(|v| <[usize; 3]>::try_from(v).ok())
            .ok_or_else(|| Error::format("checkpoint", format!("bad channels {channels:?}")))?;
        let config = VaeConfig {
            latent: meta_parse(m, "latent")?,
            channels: ch,
            res_units: meta_parse(m, "res_units")?,
        };
        let mut vae = Vae::new(config, 0);
        vae.params.load_from(&ckpt.params)?;
        vae.latent_scale = meta_parse(m, "latent_scale")?;
        vae.trained = meta_parse(m, "trained")?;
        Ok(vae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_hop() {
        let mut vae = Vae::new(VaeConfig::default(), 1);
        vae.trained = true;
        let w = Waveform::new((0..1024).map(|i| (i as f32 * 0.05).sin() * 0.5).collect());
        let z = vae.encode(&w).unwrap();
        assert_eq!(z.shape(), &[16, 8]);
        let back = vae.decode(&z).unwrap();
        assert_eq!(back.len(), 1024);
        assert!(back.samples.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn untrained_and_bad_length_error() {
        let mut vae = Vae::new(VaeConfig::default(), 1);
        let w = Waveform::new(vec![0.0; 1000]);
        assert!(matches!(vae.encode(&w), Err(Error::Missing(_))));
        vae.trained = true;
        assert!(vae.encode(&w).is_err());
    }

    #[test]
    fn checkpoint_restores_model() {
        let mut vae = Vae::new(VaeConfig::default(), 3);
        vae.latent_scale = 0.3721;
        vae.trained = true;
        let back = Vae::from_checkpoint(&Checkpoint::from_bytes(&vae.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, vae.params);
        assert_eq!(back.latent_scale, vae.latent_scale);
        assert_eq!(back.config, vae.config);
    }
}
