//! Selective training-free guidance: mean guidance on the clean estimate and
//! variance guidance through the denoiser, applied on a masked subset of
//! sampling steps. Control predictions come from LatCHs, from the decoder
//! followed by the extractors, or from readouts on denoiser activations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    ddim_update, renoise, sample, schedule_at, step_weights, v_split, Conditioning, NoiseSchedule, StepCtx, StepHook,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::models::{activate, Denoiser, DenoiserOut, Latch, Readout, Vae};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::training::losses::PROB_EPS;
use crate::world::{feature_graph, ControlKind, ControlTrack};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_CFG_SCALE: f64 = 7.0;
pub const DEFAULT_MASK_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    Latch,
    EndToEnd,
    Readout,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Latch, Backend::EndToEnd, Backend::Readout];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Latch => "latch",
            Backend::EndToEnd => "end_to_end",
            Backend::Readout => "readout",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latch" => Ok(Backend::Latch),
            "end_to_end" | "end-to-end" | "e2e" => Ok(Backend::EndToEnd),
            "readout" => Ok(Backend::Readout),
            _ => Err(Error::invalid(format!(
                "unknown backend {s:?} (expected latch, end_to_end or readout)"
            ))),
        }
    }
}

/// Where the smoothing noise of variance `gamma_t` is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GammaTarget {
    /// To the predicted control feature.
    #[default]
    Feature,
    /// To the clean-latent estimate before the control is predicted.
    Latent,
}

impl FromStr for GammaTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(GammaTarget::Feature),
            "latent" => Ok(GammaTarget::Latent),
            _ => Err(Error::invalid(format!("unknown gamma target {s:?} (expected feature or latent)"))),
        }
    }
}

impl fmt::Display for GammaTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaTarget::Feature => "feature",
            GammaTarget::Latent => "latent",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskMode {
    /// The first `ceil(f * T)` steps.
    FractionFront(f64),
    Explicit(Vec<bool>),
}

pub fn make_mask(steps: usize, mode: MaskMode) -> Result<Vec<bool>> {
    if steps == 0 {
        return Err(Error::invalid("mask needs at least one step"));
    }
    match mode {
        MaskMode::FractionFront(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("mask fraction {f} outside [0, 1]")));
            }
            // Tolerance keeps products like 0.2 * 100 from rounding up a step.
            let n = ((f * steps as f64) - 1e-9).ceil().max(0.0) as usize;
            Ok((0..steps).map(|i| i < n).collect())
        }
        MaskMode::Explicit(m) => {
            if m.len() != steps {
                return Err(Error::invalid(format!("mask has {} entries for {steps} steps", m.len())));
            }
            Ok(m)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub backend: Backend,
    pub rho: f64,
    pub mu: f64,
    pub gamma: f64,
    pub n_iter: usize,
    pub n_recur: usize,
    pub mask: Vec<bool>,
    pub cfg_scale: f64,
    /// Control weights in [`ControlKind::ALL`] order.
    pub weights: [f64; 3],
    pub gamma_target: GammaTarget,
}

impl GuidanceConfig {
    pub fn defaults(backend: Backend, steps: usize) -> Self {
        let (rho, gamma, intensity) = match backend {
            Backend::Latch => (0.03, 0.3, 0.0005),
            Backend::EndToEnd => (0.03, 1.5, 0.001),
            Backend::Readout => (0.1, 0.0, 0.005),
        };
        Self {
            backend,
            rho,
            mu: if backend == Backend::Readout { 0.0 } else { 0.03 },
            gamma,
            n_iter: 4,
            n_recur: 1,
            mask: make_mask(steps.max(1), MaskMode::FractionFront(DEFAULT_MASK_FRACTION)).expect("valid default mask"),
            cfg_scale: DEFAULT_CFG_SCALE,
            weights: [intensity, 1.0, 1.0],
            gamma_target: GammaTarget::Feature,
        }
    }

    pub fn weight(&self, kind: ControlKind) -> f64 {
        self.weights[crate::training::kind_index(kind)]
    }

    /// Mean-guidance strength actually applied; readouts have none.
    pub fn effective_mu(&self) -> f64 {
        if self.backend == Backend::Readout {
            0.0
        } else {
            self.mu
        }
    }

    /// Smoothing variance actually applied; readouts skip it.
    pub fn effective_gamma(&self) -> f64 {
        if self.backend == Backend::Readout {
            0.0
        } else {
            self.gamma
        }
    }

    /// Zero strength everywhere.
    pub fn is_neutral(&self) -> bool {
        self.rho == 0.0 && self.effective_mu() == 0.0 && self.effective_gamma() == 0.0
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("guidance.{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.n_iter == 0 || self.n_recur == 0 {
            return Err(Error::invalid("guidance.n_iter and guidance.n_recur must be at least 1"));
        }
        if self.mask.len() != steps {
            return Err(Error::invalid(format!(
                "guidance mask has {} entries for {steps} steps",
                self.mask.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("control weights must be positive"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::invalid("cfg_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// A target control track and its loss weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTarget {
    pub track: ControlTrack,
    pub weight: f64,
}

impl ControlTarget {
    pub fn new(track: ControlTrack, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("control weight must be positive, got {weight}")));
        }
        Ok(Self { track, weight })
    }

    pub fn kind(&self) -> ControlKind {
        self.track.kind
    }
}

/// Control predictors of one backend.
#[derive(Clone, Copy, Debug)]
pub enum Heads<'a> {
    Latch(&'a [Latch]),
    EndToEnd(&'a Vae),
    Readout(&'a [Readout]),
}

/// The frozen models a guided run differentiates through.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceModels<'a> {
    pub denoiser: &'a Denoiser,
    pub heads: Heads<'a>,
}

fn find<'h, H>(heads: &'h [H], kind: ControlKind, of: impl Fn(&H) -> ControlKind, what: &str) -> Result<&'h H> {
    heads
        .iter()
        .find(|h| of(h) == kind)
        .ok_or_else(|| Error::Missing(format!("no {what} trained for {kind}; run `train` for it first")))
}

impl GuidanceModels<'_> {
    pub fn backend(&self) -> Backend {
        match self.heads {
            Heads::Latch(_) => Backend::Latch,
            Heads::EndToEnd(_) => Backend::EndToEnd,
            Heads::Readout(_) => Backend::Readout,
        }
    }

    /// Checks that every target has a predictor and matches `frames`.
    pub fn check(&self, targets: &[ControlTarget], frames: usize) -> Result<()> {
        for tgt in targets {
            if tgt.track.frames != frames {
                return Err(Error::invalid(format!(
                    "{} target has {} frames but latents have {frames}",
                    tgt.kind(),
                    tgt.track.frames
                )));
            }
            match self.heads {
                Heads::Latch(hs) => drop(find(hs, tgt.kind(), Latch::kind, "LatCH")?),
                Heads::Readout(hs) => drop(find(hs, tgt.kind(), Readout::kind, "readout")?),
                Heads::EndToEnd(vae) => {
                    if !vae.trained {
                        return Err(Error::Missing("autoencoder is untrained; run `train vae` first".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Predicted controls, flattened to `[F * dims]`, from a clean-latent
    /// estimate `z0 [1, F, C]`.
    pub fn clean_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        z0: NodeId,
        t: f64,
        targets: &[ControlTarget],
    ) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(targets.len());
        match self.heads {
            Heads::Latch(hs) => {
                for tgt in targets {
                    let head = find(hs, tgt.kind(), Latch::kind, "LatCH")?;
                    let p = head.params.bind(g, false);
                    let raw = head.forward_graph(g, &p, z0, &[t])?;
                    let y = activate(g, tgt.kind(), raw)?;
                    out.push(flatten(g, y)?);
                }
            }
            Heads::EndToEnd(vae) => {
                let p = vae.params.bind(g, false);
                let x = vae.decode_graph(g, &p, z0)?;
                for tgt in targets {
                    let y = feature_graph(g, tgt.kind(), x)?;
                    out.push(flatten(g, y)?);
                }
            }
            Heads::Readout(_) => {
                return Err(Error::invalid("readouts predict from denoiser activations, not latents"));
            }
        }
        Ok(out)
    }

    /// Readout predictions, flattened, from the conditional branch of a
    /// denoiser pass.
    fn readout_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        out: &DenoiserOut,
        t: f64,
        targets: &[ControlTarget],
    ) -> Result<Vec<NodeId>> {
        let Heads::Readout(hs) = self.heads else {
            return Err(Error::invalid("not a readout backend"));
        };
        let tap = g.slice(out.tap, 0, 0, 1)?;
        let mut feats = Vec::with_capacity(targets.len());
        for tgt in targets {
            let head = find(hs, tgt.kind(), Readout::kind, "readout")?;
            let p = head.params.bind(g, false);
            let raw = head.forward_graph(g, &p, tap, &[t])?;
            let y = activate(g, tgt.kind(), raw)?;
            feats.push(flatten(g, y)?);
        }
        Ok(feats)
    }
}

fn flatten<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let n = g.shape(x).iter().product::<usize>();
    g.reshape(x, &[n])
}

/// Loss graph nodes: the weighted total and each control's distance.
#[derive(Clone, Debug)]
pub struct ControlLoss {
    pub total: NodeId,
    pub per_control: Vec<NodeId>,
}

/// Distance between a predicted feature and its target, summed over frames
/// and dimensions: squared error for intensity, cross-entropy for
/// probabilities.
pub fn distance<T: Real>(g: &mut Graph<T>, kind: ControlKind, pred: NodeId, target: &ControlTrack) -> Result<NodeId> {
    let y = g.constant(Tensor::new([target.values.len()], target.values.clone())?.cast());
    if g.shape(pred) != g.shape(y) {
        return Err(Error::invalid(format!(
            "{kind} prediction has shape {:?}, target {:?}",
            g.shape(pred),
            g.shape(y)
        )));
    }
    if kind.is_probability() {
        let p = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
        let lp = g.log(p)?;
        let q = g.scale(p, -1.0)?;
        let q = g.offset(q, 1.0)?;
        let lq = g.log(q)?;
        let ny = g.scale(y, -1.0)?;
        let ny = g.offset(ny, 1.0)?;
        let a = g.mul(y, lp)?;
        let b = g.mul(ny, lq)?;
        let s = g.add(a, b)?;
        let s = g.sum(s)?;
        g.neg(s)
    } else {
        let d = g.sub(pred, y)?;
        let d = g.square(d)?;
        g.sum(d)
    }
}

/// `sum_k w_k delta_k(e_k + xi_k, target_k) / sum_k w_k` with one draw
/// `xi_k ~ N(0, gamma_t I)` per control.
pub fn control_loss<T: Real>(
    g: &mut Graph<T>,
    feats: &[NodeId],
    targets: &[ControlTarget],
    gamma_t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ControlLoss> {
    if feats.len() != targets.len() || targets.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            feats.len(),
            targets.len()
        )));
    }
    let mut per_control = Vec::with_capacity(targets.len());
    let mut total = None;
    let norm: f64 = targets.iter().map(|t| t.weight).sum();
    for (&f, tgt) in feats.iter().zip(targets) {
        let f = if gamma_t > 0.0 {
            let xi = Tensor::<f32>::randn(g.shape(f).to_vec(), rng).map(|v| v * gamma_t.sqrt() as f32);
            let xi = g.constant(xi.cast());
            g.add(f, xi)?
        } else {
            f
        };
        let d = distance(g, tgt.kind(), f, &tgt.track)?;
        per_control.push(d);
        let wd = g.scale(d, tgt.weight / norm)?;
        total = Some(match total {
            Some(acc) => g.add(acc, wd)?,
            None => wd,
        });
    }
    Ok(ControlLoss {
        total: total.expect("at least one target"),
        per_control,
    })
}

fn add_latent_noise<T: Real>(g: &mut Graph<T>, z: NodeId, gamma_t: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let xi = Tensor::<f32>::randn(g.shape(z).to_vec(), rng).map(|v| v * gamma_t.sqrt() as f32);
    let xi = g.constant(xi.cast());
    g.add(z, xi)
}

/// Splits smoothing variance between latent and feature according to the
/// configured target.
fn gamma_split(cfg: &GuidanceConfig, gamma_t: f64) -> (f64, f64) {
    match cfg.gamma_target {
        GammaTarget::Feature => (0.0, gamma_t),
        GammaTarget::Latent => (gamma_t, 0.0),
    }
}

fn batched(z: &Tensor) -> Result<Tensor> {
    match *z.shape() {
        [f, c] => z.clone().reshape([1, f, c]),
        [1, _, _] => Ok(z.clone()),
        ref s => Err(Error::invalid(format!("guidance expects one latent [F, C], got {s:?}"))),
    }
}

/// `z0 <- z0 - mu_t * grad_z0 loss`, repeated `cfg.n_iter` times. The
/// gradient stops at `z0` and never reaches the denoiser.
pub fn mean_guidance(
    models: &GuidanceModels<'_>,
    z0_hat: &Tensor,
    t: f64,
    targets: &[ControlTarget],
    cfg: &GuidanceConfig,
    mu_t: f64,
    gamma_t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if models.backend() == Backend::Readout || cfg.backend == Backend::Readout {
        return Err(Error::invalid("readouts cannot drive mean guidance"));
    }
    let mut z = z0_hat.clone();
    if mu_t == 0.0 {
        return Ok(z);
    }
    let (latent_gamma, feature_gamma) = gamma_split(cfg, gamma_t);
    for _ in 0..cfg.n_iter {
        let mut g = Graph::<f32>::new();
        let zn = g.leaf(batched(&z)?, true);
        let zin = if latent_gamma > 0.0 {
            add_latent_noise(&mut g, zn, latent_gamma, rng)?
        } else {
            zn
        };
        let feats = models.clean_features(&mut g, zin, t, targets)?;
        let loss = control_loss(&mut g, &feats, targets, feature_gamma, rng)?;
        g.backward(loss.total)?;
        let grad = g.grad(zn).ok_or_else(|| Error::Backward("no gradient at clean estimate".into()))?;
        z = z.axpy(-mu_t as f32, &grad.reshape(z.shape().to_vec())?)?;
    }
    Ok(z)
}

/// Builds the variance-guidance loss from `z_t` through the CFG-combined
/// denoiser: `z0|t = alpha z_t - sigma v` feeds LatCHs or the decoder, and
/// readouts take the conditional branch's activations.
#[allow(clippy::too_many_arguments)]
pub fn variance_graph<T: Real>(
    g: &mut Graph<T>,
    models: &GuidanceModels<'_>,
    z_t: NodeId,
    t: f64,
    cond: Conditioning,
    targets: &[ControlTarget],
    cfg: &GuidanceConfig,
    gamma_t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DenoiserOut, ControlLoss)> {
    let den = models.denoiser;
    let dp = den.params.bind(g, false);
    let out = den.cfg_forward(g, &dp, z_t, t, cond)?;
    let feats = match models.heads {
        Heads::Readout(_) => {
            // Readouts are only usable with variance guidance and skip smoothing.
            let feats = models.readout_features(g, &out, t, targets)?;
            let loss = control_loss(g, &feats, targets, 0.0, rng)?;
            return Ok((out, loss));
        }
        _ => {
            let v = if cond.uses_cfg() {
                let vc = g.slice(out.v, 0, 0, 1)?;
                let vu = g.slice(out.v, 0, 1, 1)?;
                let d = g.sub(vc, vu)?;
                let d = g.scale(d, cond.cfg_scale)?;
                g.add(vu, d)?
            } else {
                out.v
            };
            let (a, s) = schedule_at(t)?;
            let az = g.scale(z_t, a)?;
            let sv = g.scale(v, s)?;
            let z0 = g.sub(az, sv)?;
            let (latent_gamma, _) = gamma_split(cfg, gamma_t);
            let z0 = if latent_gamma > 0.0 {
                add_latent_noise(g, z0, latent_gamma, rng)?
            } else {
                z0
            };
            models.clean_features(g, z0, t, targets)?
        }
    };
    let (_, feature_gamma) = gamma_split(cfg, gamma_t);
    let loss = control_loss(g, &feats, targets, feature_gamma, rng)?;
    Ok((out, loss))
}

/// Result of one variance pass from `z_t`.
struct VariancePass {
    /// CFG-combined velocity, computed exactly as the plain sampler does.
    v: Tensor,
    grad: Option<Tensor>,
    losses: Vec<f64>,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn variance_pass(
    models: &GuidanceModels<'_>,
    z_t: &Tensor,
    t: f64,
    cond: Conditioning,
    targets: &[ControlTarget],
    cfg: &GuidanceConfig,
    gamma_t: f64,
    need_grad: bool,
    rng: &mut ChaCha8Rng,
) -> Result<VariancePass> {
    let mut g = Graph::<f32>::new();
    let zn = g.leaf(batched(z_t)?, need_grad);
    let (out, loss) = variance_graph(&mut g, models, zn, t, cond, targets, cfg, gamma_t, rng)?;
    let v = models.denoiser.cfg_value(&g, out.v, cond)?;
    let v = v.reshape(z_t.shape().to_vec())?;
    let losses = loss.per_control.iter().map(|&n| f64::from(g.scalar(n))).collect();
    let total = f64::from(g.scalar(loss.total));
    let grad = if need_grad {
        g.backward(loss.total)?;
        let gz = g.grad(zn).ok_or_else(|| Error::Backward("no gradient at z_t".into()))?;
        Some(gz.reshape(z_t.shape().to_vec())?)
    } else {
        None
    };
    Ok(VariancePass { v, grad, losses, total })
}

/// `z_prev <- z_prev - rho_t * grad_{z_t} loss` with the gradient taken
/// through the denoiser.
#[allow(clippy::too_many_arguments)]
pub fn variance_guidance(
    models: &GuidanceModels<'_>,
    z_prev: &Tensor,
    z_t: &Tensor,
    t: f64,
    cond: Conditioning,
    targets: &[ControlTarget],
    cfg: &GuidanceConfig,
    rho_t: f64,
    gamma_t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if rho_t == 0.0 {
        return Ok(z_prev.clone());
    }
    let pass = variance_pass(models, z_t, t, cond, targets, cfg, gamma_t, true, rng)?;
    z_prev.axpy(-rho_t as f32, &pass.grad.expect("gradient requested"))
}

/// Control losses seen by one guided step, measured from the state that
/// entered it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub t: f64,
    pub losses: Vec<f64>,
    pub total: f64,
}

/// Sampler hook applying guidance on masked steps.
pub struct Guide<'a> {
    models: GuidanceModels<'a>,
    cfg: &'a GuidanceConfig,
    targets: &'a [ControlTarget],
    weights: Vec<f64>,
    rng: ChaCha8Rng,
    diagnostics: Vec<StepLosses>,
    busy: Duration,
}

/// Stream of the guidance RNG, kept apart from the sampler's noise.
const GUIDANCE_STREAM: u64 = 7;

impl<'a> Guide<'a> {
    pub fn new(
        models: GuidanceModels<'a>,
        cfg: &'a GuidanceConfig,
        targets: &'a [ControlTarget],
        sched: &NoiseSchedule,
        frames: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(sched.steps())?;
        if models.backend() != cfg.backend {
            return Err(Error::invalid(format!(
                "config selects the {} backend but {} models were given",
                cfg.backend,
                models.backend()
            )));
        }
        if targets.is_empty() {
            return Err(Error::invalid("guidance needs at least one target"));
        }
        models.check(targets, frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(GUIDANCE_STREAM);
        Ok(Self {
            models,
            cfg,
            targets,
            weights: step_weights(sched),
            rng,
            diagnostics: Vec::new(),
            busy: Duration::ZERO,
        })
    }

    pub fn diagnostics(&self) -> &[StepLosses] {
        &self.diagnostics
    }

    pub fn into_diagnostics(self) -> Vec<StepLosses> {
        self.diagnostics
    }

    /// Wall time spent inside guided steps so far.
    pub fn busy(&self) -> Duration {
        self.busy
    }

    fn guided(&mut self, ctx: &StepCtx<'_>, z_t: &Tensor) -> Result<Tensor> {
        let cfg = self.cfg;
        let s = self.weights[ctx.index];
        let rho_t = cfg.rho * s;
        let mu_t = cfg.effective_mu() * s;
        let gamma_t = cfg.effective_gamma() * s;
        let mut z = z_t.clone();
        for r in 0..cfg.n_recur {
            let pass = variance_pass(
                &self.models,
                &z,
                ctx.t,
                ctx.cond,
                self.targets,
                cfg,
                gamma_t,
                rho_t > 0.0,
                &mut self.rng,
            )?;
            if r == 0 {
                self.diagnostics.push(StepLosses {
                    step: ctx.index,
                    t: ctx.t,
                    losses: pass.losses.clone(),
                    total: pass.total,
                });
            }
            let (mut z0, eps) = v_split(&z, &pass.v, ctx.t)?;
            if mu_t > 0.0 {
                z0 = mean_guidance(&self.models, &z0, ctx.t, self.targets, cfg, mu_t, gamma_t, &mut self.rng)?;
            }
            let fresh;
            let noise = if r == 0 {
                ctx.noise
            } else {
                fresh = Tensor::randn(z.shape().to_vec(), &mut self.rng);
                &fresh
            };
            let mut z_prev = ddim_update(&z0, &eps, ctx.t_prev, ctx.eta, noise)?;
            if let Some(grad) = pass.grad {
                z_prev = z_prev.axpy(-rho_t as f32, &grad)?;
            }
            if r + 1 == cfg.n_recur {
                return Ok(z_prev);
            }
            let back = Tensor::randn(z.shape().to_vec(), &mut self.rng);
            z = renoise(&z_prev, ctx.t_prev, ctx.t, &back)?;
        }
        unreachable!("n_recur is at least 1")
    }
}

impl StepHook for Guide<'_> {
    fn step(&mut self, ctx: &StepCtx<'_>, z_t: &Tensor) -> Result<Option<Tensor>> {
        if !self.cfg.mask[ctx.index] {
            return Ok(None);
        }
        let start = Instant::now();
        let out = self.guided(ctx, z_t);
        self.busy += start.elapsed();
        out.map(Some)
    }
}

/// One guided sampling run of shape `[frames, latent]`.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    models: GuidanceModels<'_>,
    sched: &NoiseSchedule,
    frames: usize,
    class: usize,
    cfg: &GuidanceConfig,
    targets: &[ControlTarget],
    seed: u64,
    record: bool,
) -> Result<(Trajectory, Vec<StepLosses>)> {
    let mut guide = Guide::new(models, cfg, targets, sched, frames, seed)?;
    let cond = Conditioning::class(class, cfg.cfg_scale);
    let shape = [frames, models.denoiser.config.latent];
    let traj = sample(models.denoiser, sched, &shape, cond, Some(&mut guide), seed, record)?;
    Ok((traj, guide.into_diagnostics()))
}

/// Writes per-step control losses: `step,t,<kind>...,total`.
pub fn write_diagnostics_csv(path: &Path, kinds: &[ControlKind], rows: &[StepLosses]) -> Result<()> {
    let to_err = |e: csv::Error| Error::format("guidance CSV", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend(kinds.iter().map(|k| k.name().to_string()));
    header.push("total".into());
    w.write_record(&header).map_err(to_err)?;
    for row in rows {
        let mut rec = vec![row.step.to_string(), row.t.to_string()];
        rec.extend(row.losses.iter().map(|l| l.to_string()));
        rec.push(row.total.to_string());
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
