//! Variance-preserving schedule, v-parameterization algebra and the
//! stochastic DDIM sampler.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// VP schedule `alpha = sqrt(1 - t)`, `sigma = sqrt(t)` on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    /// Multiplier in `[0, 1]` on the DDIM posterior noise; 1 is fully
    /// stochastic, 0 deterministic.
    pub eta_scale: f64,
}

impl NoiseSchedule {
    pub fn new(steps: usize, eta_scale: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta_scale) {
            return Err(Error::invalid(format!("eta scale {eta_scale} outside [0, 1]")));
        }
        Ok(Self { steps, eta_scale })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time of grid point `i`, descending from 1 at `i = 0` to 0 at `i = T`.
    pub fn time(&self, i: usize) -> f64 {
        1.0 - i as f64 / self.steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Posterior noise level for the step `time(i) -> time(i + 1)`.
    pub fn eta(&self, i: usize) -> f64 {
        ddim_eta(self.time(i), self.time(i + 1)) * self.eta_scale
    }
}

/// `(alpha_t, sigma_t)` of the VP schedule.
pub fn schedule_at(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(((1.0 - t).sqrt(), t.sqrt()))
}

fn alpha_sigma(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    ((1.0 - t).sqrt(), t.sqrt())
}

/// Fully stochastic DDIM noise `sigma_prev * sqrt(1 - a_t^2 s_prev^2 / (a_prev^2 s_t^2))`,
/// clipped to `[0, sigma_prev]`.
pub fn ddim_eta(t: f64, t_prev: f64) -> f64 {
    let (a, s) = alpha_sigma(t);
    let (ap, sp) = alpha_sigma(t_prev);
    if sp == 0.0 {
        return 0.0;
    }
    let ratio = (a * a * sp * sp) / (ap * ap * s * s);
    (sp * (1.0 - ratio).max(0.0).sqrt()).clamp(0.0, sp)
}

/// Step weights `s(t_i) = alpha(t_i) / sum_j alpha(t_j)` over the `T`
/// sampling-step times `t_i = 1 - i/T`.
pub fn step_weights(sched: &NoiseSchedule) -> Vec<f64> {
    let alphas: Vec<f64> = (0..sched.steps()).map(|i| alpha_sigma(sched.time(i)).0).collect();
    let total: f64 = alphas.iter().sum();
    alphas.iter().map(|a| a / total).collect()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(f64::from(x), f64::from(y)) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Recovers `(z0_hat, eps_hat)` from a v-prediction.
pub fn v_split(z_t: &Tensor, v: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    let (a, s) = schedule_at(t)?;
    let z0 = zip_map(z_t, v, |z, v| a * z - s * v)?;
    let eps = zip_map(z_t, v, |z, v| s * z + a * v)?;
    Ok((z0, eps))
}

/// `z_prev = a_prev * z0 + sqrt(s_prev^2 - eta^2) * eps + eta * noise`.
pub fn ddim_update(
    z0: &Tensor,
    eps: &Tensor,
    t_prev: f64,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    let (ap, sp) = schedule_at(t_prev)?;
    let radical = sp * sp - eta * eta;
    if radical < -1e-12 {
        return Err(Error::Numerical(format!(
            "eta_t = {eta} exceeds sigma(t_prev) = {sp}"
        )));
    }
    let c = radical.max(0.0).sqrt();
    let partial = zip_map(z0, eps, |z, e| ap * z + c * e)?;
    zip_map(&partial, noise, |p, n| p + eta * n)
}

/// One DDIM step from a v-prediction.
pub fn ddim_step(
    z_t: &Tensor,
    v: &Tensor,
    t: f64,
    t_prev: f64,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::invalid(format!("DDIM step needs t = {t} > t_prev = {t_prev}")));
    }
    let (z0, eps) = v_split(z_t, v, t)?;
    ddim_update(&z0, &eps, t_prev, eta, noise)
}

/// `z_t = alpha_t * z0 + sigma_t * noise`.
pub fn forward_diffuse(z0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
    let (a, s) = schedule_at(t)?;
    zip_map(z0, noise, |z, n| a * z + s * n)
}

/// Samples `p(z_t | z_prev)` for `t >= t_prev`.
pub fn renoise(z_prev: &Tensor, t_prev: f64, t: f64, noise: &Tensor) -> Result<Tensor> {
    if t < t_prev {
        return Err(Error::invalid(format!("renoise needs t = {t} >= t_prev = {t_prev}")));
    }
    let (a, s) = schedule_at(t)?;
    let (ap, sp) = schedule_at(t_prev)?;
    if ap == 0.0 {
        return Err(Error::invalid("cannot renoise from t = 1"));
    }
    let k = a / ap;
    let c = (s * s - k * k * sp * sp).max(0.0).sqrt();
    zip_map(z_prev, noise, |z, n| k * z + c * n)
}

/// `v_uncond + w * (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    zip_map(v_cond, v_uncond, |c, u| u + w * (c - u))
}

/// A v-prediction model. `class = None` selects the unconditional branch.
pub trait VModel {
    fn predict_v(&self, z_t: &Tensor, t: f64, class: Option<usize>) -> Result<Tensor>;

    /// CFG-combined velocity. Models may override this to batch both branches.
    fn predict_cfg(&self, z_t: &Tensor, t: f64, cond: Conditioning) -> Result<Tensor> {
        let v_cond = self.predict_v(z_t, t, cond.class)?;
        if !cond.uses_cfg() {
            return Ok(v_cond);
        }
        let v_uncond = self.predict_v(z_t, t, None)?;
        cfg_combine(&v_cond, &v_uncond, cond.cfg_scale)
    }
}

/// Conditioning of one sampling run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub class: Option<usize>,
    pub cfg_scale: f64,
}

impl Conditioning {
    pub fn unconditional() -> Self {
        Self {
            class: None,
            cfg_scale: 1.0,
        }
    }

    pub fn class(class: usize, cfg_scale: f64) -> Self {
        Self {
            class: Some(class),
            cfg_scale,
        }
    }

    /// Whether both branches are needed.
    pub fn uses_cfg(&self) -> bool {
        self.class.is_some() && self.cfg_scale != 1.0
    }
}

/// CFG-combined velocity.
pub fn guided_v(model: &dyn VModel, z_t: &Tensor, t: f64, cond: Conditioning) -> Result<Tensor> {
    model.predict_cfg(z_t, t, cond)
}

/// Everything a step hook needs to reproduce or replace the plain update.
pub struct StepCtx<'a> {
    pub index: usize,
    pub t: f64,
    pub t_prev: f64,
    pub eta: f64,
    pub noise: &'a Tensor,
    pub model: &'a dyn VModel,
    pub cond: Conditioning,
}

impl StepCtx<'_> {
    /// The unguided update from `z_t`.
    pub fn plain(&self, z_t: &Tensor) -> Result<Tensor> {
        let v = guided_v(self.model, z_t, self.t, self.cond)?;
        ddim_step(z_t, &v, self.t, self.t_prev, self.eta, self.noise)
    }
}

/// Per-step intervention in the sampler. Returning `None` takes the plain
/// update; the sampler noise for the step has been drawn either way.
pub trait StepHook {
    fn step(&mut self, ctx: &StepCtx<'_>, z_t: &Tensor) -> Result<Option<Tensor>>;
}

/// Output of [`sample`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `T + 1` states from `z_1` to `z_0` when recorded, else just `z_0`.
    pub states: Vec<Tensor>,
    /// Per-step clean estimates of plain (unhooked) steps, when recorded.
    pub z0_hats: Vec<Option<Tensor>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory holds at least one state")
    }
}

/// Runs the sampler from `z_1 ~ N(0, I)` of the given `shape`.
pub fn sample(
    model: &dyn VModel,
    sched: &NoiseSchedule,
    shape: &[usize],
    cond: Conditioning,
    mut hook: Option<&mut dyn StepHook>,
    seed: u64,
    record: bool,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape.to_vec(), &mut rng);
    let mut states = Vec::new();
    let mut z0_hats = Vec::new();
    for i in 0..sched.steps() {
        let noise = Tensor::randn(shape.to_vec(), &mut rng);
        let ctx = StepCtx {
            index: i,
            t: sched.time(i),
            t_prev: sched.time(i + 1),
            eta: sched.eta(i),
            noise: &noise,
            model,
            cond,
        };
        let hooked = match hook.as_deref_mut() {
            Some(h) => h.step(&ctx, &z)?,
            None => None,
        };
        let next = match hooked {
            Some(next) => {
                if record {
                    z0_hats.push(None);
                }
                next
            }
            None => {
                let v = guided_v(model, &z, ctx.t, cond)?;
                let (z0, eps) = v_split(&z, &v, ctx.t)?;
                let next = ddim_update(&z0, &eps, ctx.t_prev, ctx.eta, &noise)?;
                if record {
                    z0_hats.push(Some(z0));
                }
                next
            }
        };
        if !next.all_finite() {
            return Err(Error::Numerical(format!("non-finite latent at step {i}")));
        }
        if record {
            states.push(std::mem::replace(&mut z, next));
        } else {
            z = next;
        }
    }
    states.push(z);
    Ok(Trajectory { states, z0_hats })
}

/// Writes `T + 1` recorded `[frames, channels]` states: a little-endian
/// `u32` header `(T, frames, channels)` followed by row-major `f32` data.
pub fn write_trajectory_dump(path: &Path, traj: &Trajectory) -> Result<()> {
    let first = &traj.states[0];
    let [frames, channels] = first.shape() else {
        return Err(Error::invalid(format!(
            "trajectory dump needs [frames, channels] states, got {:?}",
            first.shape()
        )));
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let steps = traj.states.len() - 1;
    let mut bytes = Vec::with_capacity(12 + traj.states.len() * first.len() * 4);
    for v in [steps, *frames, *channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &traj.states {
        first.same_shape(s)?;
        for x in s.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_dump(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format("trajectory dump", "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (steps, frames, channels) = (word(0), word(1), word(2));
    let per = frames * channels;
    if bytes.len() != 12 + (steps + 1) * per * 4 {
        return Err(Error::format(
            "trajectory dump",
            format!("payload of {} bytes does not match header", bytes.len() - 12),
        ));
    }
    bytes[12..]
        .chunks_exact(per * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::new(vec![frames, channels], data)
        })
        .collect()
}

/// Exact denoiser for 1-D Gaussian data `z0 ~ N(mean, std^2)`, applied
/// elementwise.
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
}

impl GaussianOracle {
    /// Posterior mean `E[z0 | z_t]`.
    pub fn posterior_mean(&self, z_t: f64, t: f64) -> f64 {
        let (a, s) = alpha_sigma(t);
        let var = self.std * self.std;
        self.mean + a * var / (a * a * var + s * s) * (z_t - a * self.mean)
    }

    /// Variance of the deterministic sampler's output on `sched`'s grid.
    /// Every step is affine in the starting noise, so the gain is tracked
    /// in closed form; the result differs from `std^2` by the
    /// discretization error of the grid.
    pub fn deterministic_variance(&self, sched: &NoiseSchedule) -> f64 {
        let var = self.std * self.std;
        let mut gain = 1.0;
        for i in 0..sched.steps() {
            let (a, s) = alpha_sigma(sched.time(i));
            let (ap, sp) = alpha_sigma(sched.time(i + 1));
            let z0 = a * var / (a * a * var + s * s) * gain;
            let eps = (gain - a * z0) / s;
            gain = ap * z0 + sp * eps;
        }
        gain * gain
    }
}

impl VModel for GaussianOracle {
    fn predict_v(&self, z_t: &Tensor, t: f64, _class: Option<usize>) -> Result<Tensor> {
        let (a, s) = schedule_at(t)?;
        if s == 0.0 {
            return Err(Error::invalid("oracle velocity undefined at t = 0"));
        }
        Ok(z_t.map(|z| {
            let z = f64::from(z);
            ((a * z - self.posterior_mean(z, t)) / s) as f32
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(x: f32) -> Tensor {
        Tensor::from_vec(vec![x])
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(schedule_at(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(schedule_at(1.0).unwrap(), (0.0, 1.0));
        let (a, s) = schedule_at(0.5).unwrap();
        assert_abs_diff_eq!(a, 0.70710678, epsilon = 1e-8);
        assert_abs_diff_eq!(s, 0.70710678, epsilon = 1e-8);
        assert!(schedule_at(1.5).is_err());
        assert!(schedule_at(-0.1).is_err());
    }

    #[test]
    fn v_split_examples() {
        let (z0, eps) = v_split(&s(1.0), &s(0.0), 0.5).unwrap();
        assert_abs_diff_eq!(z0.data()[0], 0.70710678, epsilon = 1e-6);
        assert_abs_diff_eq!(eps.data()[0], 0.70710678, epsilon = 1e-6);
        let (z0, eps) = v_split(&s(0.0), &s(1.0), 0.0).unwrap();
        assert_eq!((z0.data()[0], eps.data()[0]), (0.0, 1.0));
        assert!(v_split(&s(0.0), &Tensor::zeros([2]), 0.5).is_err());
    }

    #[test]
    fn ddim_hand_case() {
        let out = ddim_step(&s(1.0), &s(0.0), 0.5, 0.25, 0.0, &s(0.0)).unwrap();
        let want = 0.75f64.sqrt() * 0.5f64.sqrt() + 0.5 * 0.5f64.sqrt();
        assert_abs_diff_eq!(out.data()[0] as f64, want, epsilon = 1e-6);
        assert_abs_diff_eq!(want, 0.96593, epsilon = 1e-5);
    }

    #[test]
    fn ddim_boundaries() {
        let z = s(0.8);
        let v = s(-0.3);
        let (z0, _) = v_split(&z, &v, 0.4).unwrap();
        let out = ddim_step(&z, &v, 0.4, 0.0, 0.0, &s(0.0)).unwrap();
        assert_eq!(out, z0);
        // Radical vanishes when eta equals sigma(t_prev).
        let sp = 0.25f64.sqrt();
        let out = ddim_step(&s(1.0), &s(0.0), 0.5, 0.25, sp, &s(0.0)).unwrap();
        assert_abs_diff_eq!(out.data()[0] as f64, 0.75f64.sqrt() * 0.5f64.sqrt(), epsilon = 1e-6);
        let err = ddim_step(&s(1.0), &s(0.0), 0.5, 0.25, 0.6, &s(0.0)).unwrap_err();
        assert!(err.to_string().contains("0.6") && err.to_string().contains("0.5"));
    }

    #[test]
    fn forward_and_renoise_boundaries() {
        let z0 = Tensor::from_vec(vec![0.3, -1.0]);
        let n = Tensor::from_vec(vec![0.9, 0.2]);
        assert_eq!(forward_diffuse(&z0, 0.0, &n).unwrap(), z0);
        assert_eq!(forward_diffuse(&z0, 1.0, &n).unwrap(), n);
        assert_eq!(renoise(&z0, 0.4, 0.4, &n).unwrap(), z0);
        assert_eq!(renoise(&z0, 0.0, 0.6, &n).unwrap(), forward_diffuse(&z0, 0.6, &n).unwrap());
        assert!(renoise(&z0, 1.0, 1.0, &n).is_err());
    }

    #[test]
    fn cfg_endpoints() {
        let c = Tensor::from_vec(vec![1.0, 2.0]);
        let u = Tensor::from_vec(vec![-1.0, 0.5]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn eta_is_feasible_and_stochastic() {
        let sched = NoiseSchedule::new(100, 1.0).unwrap();
        for i in 0..100 {
            let sp = sched.time(i + 1).sqrt();
            let eta = sched.eta(i);
            assert!((0.0..=sp + 1e-15).contains(&eta));
            if i + 1 < 100 {
                assert!(eta > 0.0);
            }
        }
        assert_abs_diff_eq!(sched.eta(0), sched.time(1).sqrt(), epsilon = 1e-12);
        let det = NoiseSchedule::new(100, 0.0).unwrap();
        assert!((0..100).all(|i| det.eta(i) == 0.0));
    }

    #[test]
    fn identity_hook_is_bit_identical() {
        struct Replay;
        impl StepHook for Replay {
            fn step(&mut self, ctx: &StepCtx<'_>, z_t: &Tensor) -> Result<Option<Tensor>> {
                ctx.plain(z_t).map(Some)
            }
        }
        let model = GaussianOracle { mean: 0.4, std: 0.7 };
        let sched = NoiseSchedule::new(20, 1.0).unwrap();
        let cond = Conditioning::unconditional();
        let a = sample(&model, &sched, &[4, 2], cond, None, 11, false).unwrap();
        let b = sample(&model, &sched, &[4, 2], cond, Some(&mut Replay), 11, false).unwrap();
        assert_eq!(a.final_state(), b.final_state());
    }

    #[test]
    fn trajectory_dump_round_trip() {
        let model = GaussianOracle { mean: 0.0, std: 1.0 };
        let sched = NoiseSchedule::new(5, 1.0).unwrap();
        let traj = sample(&model, &sched, &[3, 2], Conditioning::unconditional(), None, 3, true)
            .unwrap();
        assert_eq!(traj.states.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        write_trajectory_dump(&path, &traj).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 6 * 6 * 4);
        assert_eq!(read_trajectory_dump(&path).unwrap(), traj.states);
    }
}
