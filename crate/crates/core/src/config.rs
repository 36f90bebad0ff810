//! INI run configuration: `[section]` headers with `key = value` lines.
//!
//! Every key is optional. Guidance strengths left unset take the defaults
//! of the selected backend. Unknown sections or keys are rejected so typos
//! do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::guidance::{make_mask, Backend, GammaTarget, GuidanceConfig, MaskMode, DEFAULT_CFG_SCALE, DEFAULT_MASK_FRACTION};
use crate::models::{DenoiserConfig, LatchConfig, NoiseMode, ReadoutConfig, VaeConfig};
use crate::training::TrainConfig;
use crate::world::ControlKind;

/// LatCH architecture shared by all kinds and modes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatchArch {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_mult: usize,
}

impl LatchArch {
    pub fn config(&self, kind: ControlKind, mode: NoiseMode, latent: usize) -> LatchConfig {
        LatchConfig {
            kind,
            noise_mode: mode,
            latent,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            mlp_mult: self.mlp_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    /// Multiplier on the DDIM stochasticity; 0 gives deterministic DDIM.
    pub eta_scale: f64,
    pub cfg_scale: f64,
}

impl SamplerSettings {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.eta_scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySettings {
    pub runs: usize,
    pub stride: usize,
}

/// Guidance settings as written; unset strengths resolve per backend.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSettings {
    pub backend: Backend,
    pub rho: Option<f64>,
    pub mu: Option<f64>,
    pub gamma: Option<f64>,
    pub n_iter: usize,
    pub n_recur: usize,
    pub mask_fraction: f64,
    /// Weights in [`ControlKind::ALL`] order.
    pub weights: [Option<f64>; 3],
    pub gamma_target: GammaTarget,
    /// Which LatCH noise mode the latch backend loads.
    pub latch_mode: NoiseMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Runs per `generate` or `profile` invocation.
    pub runs: usize,
    /// Controls to guide toward.
    pub controls: Vec<ControlKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Artifact directory for checkpoints and datasets.
    pub dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
    pub latch: LatchArch,
    pub readout_hidden: usize,
    pub sampler: SamplerSettings,
    pub trajectories: TrajectorySettings,
    pub guidance: GuidanceSettings,
    pub eval: EvalSettings,
}

impl Default for Config {
    fn default() -> Self {
        let l = LatchConfig::new(ControlKind::Beats, NoiseMode::Backward);
        Self {
            dir: PathBuf::from("artifacts"),
            seed: 0,
            jobs: 1,
            train: TrainConfig::default(),
            vae: VaeConfig::default(),
            denoiser: DenoiserConfig::default(),
            latch: LatchArch {
                dim: l.dim,
                layers: l.layers,
                heads: l.heads,
                mlp_mult: l.mlp_mult,
            },
            readout_hidden: ReadoutConfig::new(ControlKind::Beats, 1).hidden,
            sampler: SamplerSettings {
                steps: 100,
                eta_scale: 1.0,
                cfg_scale: DEFAULT_CFG_SCALE,
            },
            trajectories: TrajectorySettings { runs: 256, stride: 5 },
            guidance: GuidanceSettings {
                backend: Backend::Latch,
                rho: None,
                mu: None,
                gamma: None,
                n_iter: 4,
                n_recur: 1,
                mask_fraction: DEFAULT_MASK_FRACTION,
                weights: [None; 3],
                gamma_target: GammaTarget::Feature,
                latch_mode: NoiseMode::Backward,
            },
            eval: EvalSettings {
                runs: 32,
                controls: vec![ControlKind::Beats],
            },
        }
    }
}

/// Keys of one section, consumed as they are read.
struct Section {
    name: String,
    keys: BTreeMap<String, String>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.keys.remove(key) {
            *into = raw
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("[{}] {key} = {raw:?}: {e}", self.name)))?;
        }
        Ok(())
    }

    fn take_opt<T: FromStr>(&mut self, key: &str, into: &mut Option<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.keys.remove(key) {
            let v = raw
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("[{}] {key} = {raw:?}: {e}", self.name)))?;
            *into = Some(v);
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.keys.keys().next() {
            Some(k) => Err(Error::invalid(format!("unknown key {k:?} in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::invalid(format!("{what}: {s:?}: {e}"))))
        .collect()
}

const SECTIONS: [&str; 10] = [
    "run",
    "train",
    "vae",
    "denoiser",
    "latch",
    "readout",
    "sampler",
    "trajectories",
    "guidance",
    "eval",
];

impl Config {
    /// Parses INI text. A relative `[run] dir` is resolved against `base`.
    pub fn from_ini_str(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(Error::invalid("config keys must sit inside a [section]"));
                }
                continue;
            };
            if !SECTIONS.contains(&name) {
                return Err(Error::invalid(format!("unknown config section [{name}]")));
            }
            let sec = sections.entry(name.to_string()).or_insert_with(|| Section {
                name: name.to_string(),
                keys: BTreeMap::new(),
            });
            for (k, v) in props.iter() {
                sec.keys.insert(k.to_string(), v.to_string());
            }
        }
        let mut get = |name: &str| {
            sections.remove(name).unwrap_or_else(|| Section {
                name: name.to_string(),
                keys: BTreeMap::new(),
            })
        };
        let mut c = Config::default();

        let mut s = get("run");
        let mut dir = String::new();
        s.take("dir", &mut dir)?;
        if !dir.is_empty() {
            c.dir = PathBuf::from(dir);
        }
        s.take("seed", &mut c.seed)?;
        s.take("jobs", &mut c.jobs)?;
        s.finish()?;
        if c.dir.is_relative() {
            c.dir = base.join(&c.dir);
        }

        let mut s = get("train");
        let t = &mut c.train;
        s.take("clips", &mut t.clips)?;
        s.take("heldout", &mut t.heldout)?;
        s.take("samples", &mut t.samples)?;
        s.take("batch", &mut t.batch)?;
        s.take("lr", &mut t.lr)?;
        s.take("beta1", &mut t.beta1)?;
        s.take("beta2", &mut t.beta2)?;
        s.take("eps", &mut t.eps)?;
        s.take("clip_norm", &mut t.clip_norm)?;
        s.take("vae_steps", &mut t.vae_steps)?;
        s.take("denoiser_steps", &mut t.denoiser_steps)?;
        s.take("head_steps", &mut t.head_steps)?;
        s.take("vae_crop", &mut t.vae_crop)?;
        s.take("class_dropout", &mut t.class_dropout)?;
        s.finish()?;

        let mut s = get("vae");
        s.take("latent", &mut c.vae.latent)?;
        if let Some(raw) = s.keys.remove("channels") {
            let ch: Vec<usize> = parse_list(&raw, "[vae] channels")?;
            c.vae.channels = ch
                .try_into()
                .map_err(|_| Error::invalid("[vae] channels needs exactly three widths"))?;
        }
        s.take("res_units", &mut c.vae.res_units)?;
        s.finish()?;

        let mut s = get("denoiser");
        let d = &mut c.denoiser;
        s.take("dim", &mut d.dim)?;
        s.take("layers", &mut d.layers)?;
        s.take("heads", &mut d.heads)?;
        s.take("mlp_mult", &mut d.mlp_mult)?;
        s.take("tap_layer", &mut d.tap_layer)?;
        s.finish()?;
        c.denoiser.latent = c.vae.latent;

        let mut s = get("latch");
        s.take("dim", &mut c.latch.dim)?;
        s.take("layers", &mut c.latch.layers)?;
        s.take("heads", &mut c.latch.heads)?;
        s.take("mlp_mult", &mut c.latch.mlp_mult)?;
        s.finish()?;

        let mut s = get("readout");
        s.take("hidden", &mut c.readout_hidden)?;
        s.finish()?;

        let mut s = get("sampler");
        s.take("steps", &mut c.sampler.steps)?;
        s.take("eta_scale", &mut c.sampler.eta_scale)?;
        s.take("cfg_scale", &mut c.sampler.cfg_scale)?;
        s.finish()?;

        let mut s = get("trajectories");
        s.take("runs", &mut c.trajectories.runs)?;
        s.take("stride", &mut c.trajectories.stride)?;
        s.finish()?;

        let mut s = get("guidance");
        let g = &mut c.guidance;
        s.take("backend", &mut g.backend)?;
        s.take_opt("rho", &mut g.rho)?;
        s.take_opt("mu", &mut g.mu)?;
        s.take_opt("gamma", &mut g.gamma)?;
        s.take("n_iter", &mut g.n_iter)?;
        s.take("n_recur", &mut g.n_recur)?;
        s.take("mask_fraction", &mut g.mask_fraction)?;
        for (i, kind) in ControlKind::ALL.iter().enumerate() {
            s.take_opt(&format!("{}_weight", kind.name()), &mut g.weights[i])?;
        }
        s.take("gamma_target", &mut g.gamma_target)?;
        s.take("latch_mode", &mut g.latch_mode)?;
        s.finish()?;

        let mut s = get("eval");
        s.take("runs", &mut c.eval.runs)?;
        if let Some(raw) = s.keys.remove("controls") {
            c.eval.controls = parse_list(&raw, "[eval] controls")?;
        }
        s.finish()?;

        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.jobs == 0 {
            return Err(Error::invalid("[run] jobs must be at least 1"));
        }
        self.sampler.schedule()?;
        if self.trajectories.runs == 0 || self.trajectories.stride == 0 {
            return Err(Error::invalid("[trajectories] runs and stride must be positive"));
        }
        if self.eval.runs == 0 || self.eval.controls.is_empty() {
            return Err(Error::invalid("[eval] needs at least one run and one control"));
        }
        let mut seen = self.eval.controls.clone();
        seen.sort_by_key(|k| k.name());
        seen.dedup();
        if seen.len() != self.eval.controls.len() {
            return Err(Error::invalid("[eval] controls lists a control twice"));
        }
        if self.denoiser.latent != self.vae.latent {
            return Err(Error::invalid("denoiser and autoencoder latent widths differ"));
        }
        self.guidance(self.guidance.backend, None)?.validate(self.sampler.steps)
    }

    /// Clip length in latent frames.
    pub fn frames(&self) -> usize {
        self.train.samples / crate::world::HOP
    }

    /// Resolved guidance for `backend`, optionally overriding the mask
    /// fraction.
    pub fn guidance(&self, backend: Backend, mask_fraction: Option<f64>) -> Result<GuidanceConfig> {
        let g = &self.guidance;
        let mut out = GuidanceConfig::defaults(backend, self.sampler.steps);
        if let Some(v) = g.rho {
            out.rho = v;
        }
        if let Some(v) = g.mu {
            out.mu = v;
        }
        if let Some(v) = g.gamma {
            out.gamma = v;
        }
        for (w, set) in out.weights.iter_mut().zip(g.weights) {
            if let Some(v) = set {
                *w = v;
            }
        }
        out.n_iter = g.n_iter;
        out.n_recur = g.n_recur;
        out.cfg_scale = self.sampler.cfg_scale;
        out.gamma_target = g.gamma_target;
        out.mask = make_mask(
            self.sampler.steps,
            MaskMode::FractionFront(mask_fraction.unwrap_or(g.mask_fraction)),
        )?;
        Ok(out)
    }

    pub fn readout_config(&self, kind: ControlKind) -> ReadoutConfig {
        ReadoutConfig {
            hidden: self.readout_hidden,
            ..ReadoutConfig::new(kind, self.denoiser.dim)
        }
    }

    /// The configuration as INI text with every value spelled out.
    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        ini.with_section(Some("run"))
            .set("dir", self.dir.display().to_string())
            .set("seed", self.seed.to_string())
            .set("jobs", self.jobs.to_string());
        let t = &self.train;
        ini.with_section(Some("train"))
            .set("clips", t.clips.to_string())
            .set("heldout", t.heldout.to_string())
            .set("samples", t.samples.to_string())
            .set("batch", t.batch.to_string())
            .set("lr", t.lr.to_string())
            .set("beta1", t.beta1.to_string())
            .set("beta2", t.beta2.to_string())
            .set("eps", t.eps.to_string())
            .set("clip_norm", t.clip_norm.to_string())
            .set("vae_steps", t.vae_steps.to_string())
            .set("denoiser_steps", t.denoiser_steps.to_string())
            .set("head_steps", t.head_steps.to_string())
            .set("vae_crop", t.vae_crop.to_string())
            .set("class_dropout", t.class_dropout.to_string());
        let ch: Vec<String> = self.vae.channels.iter().map(|c| c.to_string()).collect();
        ini.with_section(Some("vae"))
            .set("latent", self.vae.latent.to_string())
            .set("channels", ch.join(","))
            .set("res_units", self.vae.res_units.to_string());
        let d = &self.denoiser;
        ini.with_section(Some("denoiser"))
            .set("dim", d.dim.to_string())
            .set("layers", d.layers.to_string())
            .set("heads", d.heads.to_string())
            .set("mlp_mult", d.mlp_mult.to_string())
            .set("tap_layer", d.tap_layer.to_string());
        let l = &self.latch;
        ini.with_section(Some("latch"))
            .set("dim", l.dim.to_string())
            .set("layers", l.layers.to_string())
            .set("heads", l.heads.to_string())
            .set("mlp_mult", l.mlp_mult.to_string());
        ini.with_section(Some("readout")).set("hidden", self.readout_hidden.to_string());
        ini.with_section(Some("sampler"))
            .set("steps", self.sampler.steps.to_string())
            .set("eta_scale", self.sampler.eta_scale.to_string())
            .set("cfg_scale", self.sampler.cfg_scale.to_string());
        ini.with_section(Some("trajectories"))
            .set("runs", self.trajectories.runs.to_string())
            .set("stride", self.trajectories.stride.to_string());
        let g = &self.guidance;
        let mut sec = ini.with_section(Some("guidance"));
        sec.set("backend", g.backend.to_string())
            .set("n_iter", g.n_iter.to_string())
            .set("n_recur", g.n_recur.to_string())
            .set("mask_fraction", g.mask_fraction.to_string())
            .set("gamma_target", g.gamma_target.to_string())
            .set("latch_mode", g.latch_mode.to_string());
        for (name, v) in [("rho", g.rho), ("mu", g.mu), ("gamma", g.gamma)] {
            if let Some(v) = v {
                sec.set(name, v.to_string());
            }
        }
        for (kind, w) in ControlKind::ALL.iter().zip(g.weights) {
            if let Some(w) = w {
                sec.set(format!("{}_weight", kind.name()), w.to_string());
            }
        }
        let controls: Vec<&str> = self.eval.controls.iter().map(|k| k.name()).collect();
        ini.with_section(Some("eval"))
            .set("runs", self.eval.runs.to_string())
            .set("controls", controls.join(","));
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("INI output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = Config::from_ini_str("", Path::new("/base")).unwrap();
        assert_eq!(c.dir, Path::new("/base/artifacts"));
        let g = c.guidance(Backend::Latch, None).unwrap();
        assert_eq!(g, GuidanceConfig::defaults(Backend::Latch, 100));
        let e = c.guidance(Backend::EndToEnd, None).unwrap();
        assert_eq!(e.gamma, 1.5);
    }

    #[test]
    fn values_override_and_echo_round_trips() {
        let text = "[run]\nseed = 9\ndir = /tmp/x\n[train]\nsamples = 8192\nvae_crop = 2048\n\
                    [guidance]\nbackend = readout\nrho = 0.2\nbeats_weight = 2\n[eval]\ncontrols = beats, intensity\n";
        let c = Config::from_ini_str(text, Path::new(".")).unwrap();
        assert_eq!((c.seed, c.train.samples, c.frames()), (9, 8192, 128));
        let g = c.guidance(c.guidance.backend, Some(0.5)).unwrap();
        assert_eq!((g.rho, g.weight(ControlKind::Beats)), (0.2, 2.0));
        assert_eq!(g.mask.iter().filter(|&&m| m).count(), 50);
        assert_eq!(c.eval.controls, vec![ControlKind::Beats, ControlKind::Intensity]);
        let again = Config::from_ini_str(&c.to_ini_string(), Path::new(".")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn typos_and_bad_values_are_reported() {
        let e = Config::from_ini_str("[guidance]\nrhoo = 1\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("rhoo"));
        assert!(Config::from_ini_str("[guidanc]\n", Path::new(".")).is_err());
        assert!(Config::from_ini_str("[guidance]\nrho = -1\n", Path::new(".")).is_err());
        assert!(Config::from_ini_str("[guidance]\nbackend = gpu\n", Path::new(".")).is_err());
        assert!(Config::from_ini_str("[train]\nbatch = many\n", Path::new(".")).is_err());
        assert!(Config::from_ini_str("[vae]\nchannels = 1,2\n", Path::new(".")).is_err());
    }
}
