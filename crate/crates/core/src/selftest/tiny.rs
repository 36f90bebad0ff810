//! A small randomly initialised stack for checks that need models but not
//! trained ones.

use crate::config::Config;
use crate::models::{
    Denoiser, DenoiserConfig, Latch, LatchConfig, NoiseMode, Readout, ReadoutConfig, Vae, VaeConfig,
};
use crate::pipeline::Stack;
use crate::world::{ControlKind, HOP};

pub const TINY_FRAMES: usize = 8;
pub const TINY_STEPS: usize = 20;

pub fn tiny_models() -> Stack {
    let denoiser = Denoiser::new(
        DenoiserConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            mlp_mult: 1,
            tap_layer: 1,
            ..Default::default()
        },
        3,
    )
    .expect("valid tiny denoiser");
    let latches = ControlKind::ALL
        .iter()
        .map(|&k| {
            let cfg = LatchConfig {
                dim: 16,
                heads: 2,
                layers: 1,
                mlp_mult: 1,
                ..LatchConfig::new(k, NoiseMode::Backward)
            };
            Latch::new(cfg, 11).expect("valid tiny head")
        })
        .collect();
    let mut vae = Vae::new(
        VaeConfig {
            res_units: 1,
            ..Default::default()
        },
        5,
    );
    vae.trained = true;
    let readouts = ControlKind::ALL
        .iter()
        .map(|&k| {
            Readout::new(
                ReadoutConfig {
                    hidden: 16,
                    ..ReadoutConfig::new(k, 16)
                },
                13,
            )
        })
        .collect();
    Stack {
        vae,
        denoiser,
        latches,
        readouts,
    }
}

/// Configuration matching [`tiny_models`].
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.train.samples = TINY_FRAMES * HOP;
    cfg.train.vae_crop = TINY_FRAMES * HOP;
    cfg.train.heldout = 4;
    cfg.sampler.steps = TINY_STEPS;
    cfg.vae.res_units = 1;
    cfg.denoiser = DenoiserConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        mlp_mult: 1,
        tap_layer: 1,
        ..Default::default()
    };
    cfg.readout_hidden = 16;
    cfg
}
