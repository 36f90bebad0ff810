use super::*;
use crate::diffusion::VModel;
use crate::models::{DenoiserConfig, LatchConfig, NoiseMode, ReadoutConfig, VaeConfig};
use crate::tensor::finite_diff_check;
use crate::world::PITCH_BINS;

const FRAMES: usize = 8;

struct Stack {
    den: Denoiser,
    latches: Vec<Latch>,
    vae: Vae,
    readouts: Vec<Readout>,
}

impl Stack {
    fn new() -> Self {
        let den = Denoiser::new(
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
        .unwrap();
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
                Latch::new(cfg, 11).unwrap()
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
        Self {
            den,
            latches,
            vae,
            readouts,
        }
    }

    fn models(&self, backend: Backend) -> GuidanceModels<'_> {
        let heads = match backend {
            Backend::Latch => Heads::Latch(&self.latches),
            Backend::EndToEnd => Heads::EndToEnd(&self.vae),
            Backend::Readout => Heads::Readout(&self.readouts),
        };
        GuidanceModels {
            denoiser: &self.den,
            heads,
        }
    }
}

fn targets(kinds: &[ControlKind]) -> Vec<ControlTarget> {
    kinds
        .iter()
        .map(|&k| {
            let values = match k {
                ControlKind::Intensity => (0..FRAMES).map(|f| -30.0 + f as f32).collect(),
                ControlKind::Pitch => (0..FRAMES * PITCH_BINS)
                    .map(|i| if i % PITCH_BINS == (i / PITCH_BINS) % 4 { 0.8 } else { 0.05 })
                    .collect(),
                ControlKind::Beats => (0..FRAMES).map(|f| if f % 4 == 0 { 0.9 } else { 0.1 }).collect(),
            };
            ControlTarget::new(ControlTrack::new(k, values).unwrap(), 1.0).unwrap()
        })
        .collect()
}

#[test]
fn mask_counting() {
    let m = make_mask(100, MaskMode::FractionFront(0.2)).unwrap();
    assert_eq!(m.iter().filter(|&&b| b).count(), 20);
    assert!(m[..20].iter().all(|&b| b));
    assert!(make_mask(10, MaskMode::FractionFront(0.0)).unwrap().iter().all(|&b| !b));
    assert!(make_mask(10, MaskMode::FractionFront(1.0)).unwrap().iter().all(|&b| b));
    assert_eq!(make_mask(10, MaskMode::FractionFront(0.25)).unwrap().iter().filter(|&&b| b).count(), 3);
    assert!(make_mask(10, MaskMode::FractionFront(1.5)).is_err());
    assert!(make_mask(3, MaskMode::Explicit(vec![true])).is_err());
    assert!(make_mask(0, MaskMode::FractionFront(0.5)).is_err());
}

#[test]
fn defaults_follow_backend() {
    let l = GuidanceConfig::defaults(Backend::Latch, 100);
    assert_eq!((l.rho, l.mu, l.gamma, l.n_iter, l.n_recur), (0.03, 0.03, 0.3, 4, 1));
    assert_eq!(l.weight(ControlKind::Intensity), 0.0005);
    let e = GuidanceConfig::defaults(Backend::EndToEnd, 100);
    assert_eq!((e.gamma, e.weight(ControlKind::Intensity)), (1.5, 0.001));
    let r = GuidanceConfig::defaults(Backend::Readout, 100);
    assert_eq!((r.rho, r.effective_mu(), r.weight(ControlKind::Intensity)), (0.1, 0.0, 0.005));
    let r = GuidanceConfig { mu: 0.5, gamma: 2.0, ..r };
    assert_eq!((r.effective_mu(), r.effective_gamma()), (0.0, 0.0));
    assert_eq!(l.mask.iter().filter(|&&b| b).count(), 20);
    l.validate(100).unwrap();
    assert!(l.validate(50).is_err());
    assert!(GuidanceConfig { n_iter: 0, ..l.clone() }.validate(100).is_err());
    assert!(GuidanceConfig { rho: -1.0, ..l }.validate(100).is_err());
}

#[test]
fn control_loss_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f64>::new();
    let zero = ControlTrack::new(ControlKind::Intensity, vec![0.0; 2]).unwrap();
    let tgt = vec![
        ControlTarget::new(zero.clone(), 1.0).unwrap(),
        ControlTarget::new(zero.clone(), 1.0).unwrap(),
    ];
    let a = g.constant(Tensor::from_vec(vec![0.1f64.sqrt(); 2]));
    let b = g.constant(Tensor::from_vec(vec![0.2f64.sqrt(); 2]));
    let l = control_loss(&mut g, &[a, b], &tgt, 0.0, &mut rng).unwrap();
    assert!((g.scalar(l.total) - 0.3).abs() < 1e-12);
    let exact = g.constant(Tensor::from_vec(vec![0.0f64; 2]));
    let l = control_loss(&mut g, &[exact], &tgt[..1], 0.0, &mut rng).unwrap();
    assert_eq!(g.scalar(l.total), 0.0);
    assert!(control_loss(&mut g, &[exact, exact], &tgt[..1], 0.0, &mut rng).is_err());
}

#[test]
fn quadratic_mean_step() {
    // One descent step on (z - e)^2 from z = 1, e = 0 with step 0.1.
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::from_vec(vec![1.0]), true);
    let e = ControlTrack::new(ControlKind::Intensity, vec![0.0]).unwrap();
    let l = distance(&mut g, ControlKind::Intensity, z, &e).unwrap();
    g.backward(l).unwrap();
    let z1 = 1.0 - 0.1 * g.grad(z).unwrap().data()[0];
    assert!((z1 - 0.8).abs() < 1e-15);
}

#[test]
fn bce_distance_matches_reference() {
    let mut g = Graph::<f64>::new();
    let p = [0.2, 0.7, 0.95];
    let y = [0.0f32, 1.0, 0.5];
    let pn = g.constant(Tensor::from_vec(p.to_vec()));
    let tr = ControlTrack::new(ControlKind::Beats, y.to_vec()).unwrap();
    let d = distance(&mut g, ControlKind::Beats, pn, &tr).unwrap();
    let want: f64 = p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| crate::training::bce_prob(p, f64::from(y)))
        .sum();
    assert!((g.scalar(d) - want).abs() < 1e-12);
}

#[test]
fn mean_guidance_rejects_readouts_and_zero_is_identity() {
    let s = Stack::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tg = targets(&[ControlKind::Beats]);
    let z = Tensor::randn([FRAMES, 8], &mut rng);
    let cfg = GuidanceConfig::defaults(Backend::Readout, 10);
    let err = mean_guidance(&s.models(Backend::Readout), &z, 0.5, &tg, &cfg, 0.1, 0.0, &mut rng);
    assert!(err.is_err());
    let cfg = GuidanceConfig::defaults(Backend::Latch, 10);
    let same = mean_guidance(&s.models(Backend::Latch), &z, 0.5, &tg, &cfg, 0.0, 0.0, &mut rng).unwrap();
    assert_eq!(same, z);
    let moved = mean_guidance(&s.models(Backend::Latch), &z, 0.5, &tg, &cfg, 0.5, 0.0, &mut rng).unwrap();
    assert_ne!(moved, z);
}

fn plain_final(s: &Stack, sched: &NoiseSchedule, seed: u64) -> Tensor {
    let cond = Conditioning::class(1, DEFAULT_CFG_SCALE);
    sample(&s.den, sched, &[FRAMES, 8], cond, None, seed, false)
        .unwrap()
        .final_state()
        .clone()
}

#[test]
fn zero_strength_is_bit_identical_for_every_backend() {
    let s = Stack::new();
    let sched = NoiseSchedule::new(10, 1.0).unwrap();
    let tg = targets(&[ControlKind::Beats, ControlKind::Intensity]);
    let plain = plain_final(&s, &sched, 21);
    for backend in Backend::ALL {
        let zero = GuidanceConfig {
            rho: 0.0,
            mu: 0.0,
            gamma: 0.0,
            mask: vec![true; 10],
            ..GuidanceConfig::defaults(backend, 10)
        };
        let (traj, diag) = guided_sample(s.models(backend), &sched, FRAMES, 1, &zero, &tg, 21, false).unwrap();
        assert_eq!(traj.final_state(), &plain, "{backend} zero strength");
        assert_eq!(diag.len(), 10);
        let off = GuidanceConfig {
            mask: vec![false; 10],
            ..GuidanceConfig::defaults(backend, 10)
        };
        let (traj, diag) = guided_sample(s.models(backend), &sched, FRAMES, 1, &off, &tg, 21, false).unwrap();
        assert_eq!(traj.final_state(), &plain, "{backend} empty mask");
        assert!(diag.is_empty());
    }
}

#[test]
fn guidance_changes_output_and_is_deterministic() {
    let s = Stack::new();
    let sched = NoiseSchedule::new(10, 1.0).unwrap();
    let tg = targets(&[ControlKind::Beats]);
    let plain = plain_final(&s, &sched, 4);
    for backend in Backend::ALL {
        let cfg = GuidanceConfig {
            rho: 50.0,
            mu: 50.0,
            n_recur: 2,
            ..GuidanceConfig::defaults(backend, 10)
        };
        let run = || guided_sample(s.models(backend), &sched, FRAMES, 1, &cfg, &tg, 4, false).unwrap();
        let (a, da) = run();
        let (b, _) = run();
        assert_eq!(a.final_state(), b.final_state());
        assert_ne!(a.final_state(), &plain, "{backend}");
        assert_eq!(da.len(), 2);
    }
}

#[test]
fn readout_ignores_mean_settings() {
    let s = Stack::new();
    let sched = NoiseSchedule::new(10, 1.0).unwrap();
    let tg = targets(&[ControlKind::Pitch]);
    let base = GuidanceConfig {
        rho: 5.0,
        ..GuidanceConfig::defaults(Backend::Readout, 10)
    };
    let loud = GuidanceConfig {
        mu: 3.0,
        gamma: 4.0,
        ..base.clone()
    };
    let a = guided_sample(s.models(Backend::Readout), &sched, FRAMES, 0, &base, &tg, 8, false).unwrap();
    let b = guided_sample(s.models(Backend::Readout), &sched, FRAMES, 0, &loud, &tg, 8, false).unwrap();
    assert_eq!(a.0.final_state(), b.0.final_state());
}

#[test]
fn mismatched_targets_are_rejected() {
    let s = Stack::new();
    let sched = NoiseSchedule::new(10, 1.0).unwrap();
    let short = vec![ControlTarget::new(ControlTrack::new(ControlKind::Beats, vec![0.0; 3]).unwrap(), 1.0).unwrap()];
    let cfg = GuidanceConfig::defaults(Backend::Latch, 10);
    assert!(guided_sample(s.models(Backend::Latch), &sched, FRAMES, 0, &cfg, &short, 0, false).is_err());
    let none: [Latch; 0] = [];
    let models = GuidanceModels {
        denoiser: &s.den,
        heads: Heads::Latch(&none),
    };
    let err = guided_sample(models, &sched, FRAMES, 0, &cfg, &targets(&[ControlKind::Beats]), 0, false).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
}

/// Checks the variance-guidance gradient against central differences on
/// the elements carrying most of the gradient.
fn fd_variance(backend: Backend, kinds: &[ControlKind]) {
    let s = Stack::new();
    let tg = targets(kinds);
    let cfg = GuidanceConfig::defaults(backend, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::<f32>::randn([1, FRAMES, 8], &mut rng).cast(), true);
    let cond = Conditioning::class(2, 3.0);
    let (_, loss) = variance_graph(&mut g, &s.models(backend), z, 0.6, cond, &tg, &cfg, 0.0, &mut rng).unwrap();
    g.backward(loss.total).unwrap();
    let grad = g.grad(z).unwrap().into_data();
    let top = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(top > 0.0, "{backend}: no gradient");
    let idx: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 0.05 * top).take(12).collect();
    let rep = finite_diff_check(&mut g, loss.total, z, 1e-4, Some(&idx)).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{backend}: {rep:?}");
}

#[test]
fn variance_gradient_matches_fd_latch() {
    fd_variance(Backend::Latch, &[ControlKind::Beats, ControlKind::Intensity, ControlKind::Pitch]);
}

#[test]
fn variance_gradient_matches_fd_end_to_end() {
    fd_variance(Backend::EndToEnd, &[ControlKind::Intensity, ControlKind::Pitch]);
}

#[test]
fn variance_gradient_matches_fd_readout() {
    fd_variance(Backend::Readout, &[ControlKind::Beats, ControlKind::Pitch]);
}

#[test]
fn zero_denoiser_gradient_is_alpha_times_clean_gradient() {
    // With v = 0 the clean estimate is alpha * z_t, so the chain rule gives
    // grad_zt = alpha * grad_z0 evaluated at alpha * z_t.
    let mut s = Stack::new();
    for name in ["out.w", "out.b"] {
        let p = s.den.params.get_mut(name).unwrap();
        *p = Tensor::zeros(p.shape().to_vec());
    }
    let tg = targets(&[ControlKind::Beats]);
    let cfg = GuidanceConfig::defaults(Backend::Latch, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zt: Tensor<f64> = Tensor::<f32>::randn([1, FRAMES, 8], &mut rng).cast();
    let t = 0.36;
    let (a, _) = schedule_at(t).unwrap();
    let models = s.models(Backend::Latch);

    let mut g = Graph::<f64>::new();
    let z = g.leaf(zt.clone(), true);
    let cond = Conditioning::class(0, DEFAULT_CFG_SCALE);
    let (_, loss) = variance_graph(&mut g, &models, z, t, cond, &tg, &cfg, 0.0, &mut rng).unwrap();
    g.backward(loss.total).unwrap();
    let via_denoiser = g.grad(z).unwrap();

    let mut h = Graph::<f64>::new();
    let z0 = h.leaf(zt.map(|v| a * v), true);
    let feats = models.clean_features(&mut h, z0, t, &tg).unwrap();
    let l = control_loss(&mut h, &feats, &tg, 0.0, &mut rng).unwrap();
    h.backward(l.total).unwrap();
    let direct = h.grad(z0).unwrap();
    for (x, y) in via_denoiser.data().iter().zip(direct.data()) {
        assert!((x - a * y).abs() < 1e-5 * (1.0 + y.abs()), "{x} vs {}", a * y);
    }
    assert_eq!(s.den.predict_v(&Tensor::zeros([FRAMES, 8]), t, Some(0)).unwrap(), Tensor::zeros([FRAMES, 8]));
}

#[test]
fn diagnostics_csv_has_one_row_per_guided_step() {
    let rows = vec![
        StepLosses {
            step: 0,
            t: 1.0,
            losses: vec![0.5, 2.0],
            total: 1.0,
        },
        StepLosses {
            step: 1,
            t: 0.9,
            losses: vec![0.4, 1.0],
            total: 0.7,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.csv");
    write_diagnostics_csv(&path, &[ControlKind::Beats, ControlKind::Intensity], &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,t,beats,intensity,total");
    assert_eq!(lines.len(), 3);
}
