//! Invariants over random inputs.

use latch_core::diffusion::{cfg_combine, renoise, schedule_at, step_weights, v_split, NoiseSchedule};
use latch_core::eval::frechet_distance;
use latch_core::guidance::{make_mask, MaskMode};
use latch_core::training::{sparse_bce, v_pair};
use latch_core::world::{extract, savgol, ControlKind, Waveform, HOP};
use latch_core::{Graph, Tensor};
use proptest::prelude::*;

fn vec_f32(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn v_split_reconstructs_z_t(z in vec_f32(16), v in vec_f32(16), t in 0.0f64..=1.0) {
        let (z0, eps) = v_split(&Tensor::from_vec(z.clone()), &Tensor::from_vec(v), t).unwrap();
        let (a, s) = schedule_at(t).unwrap();
        for i in 0..16 {
            let back = a * f64::from(z0.data()[i]) + s * f64::from(eps.data()[i]);
            prop_assert!((back - f64::from(z[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn v_targets_invert_through_v_split(z0 in vec_f32(12), eps in vec_f32(12), t in 0.01f64..0.99) {
        let (z0, eps) = (Tensor::from_vec(z0), Tensor::from_vec(eps));
        let (z_t, v) = v_pair(&z0, &eps, t).unwrap();
        let (z0_hat, eps_hat) = v_split(&z_t, &v, t).unwrap();
        prop_assert!(z0_hat.max_abs_diff(&z0).unwrap() < 1e-5);
        prop_assert!(eps_hat.max_abs_diff(&eps).unwrap() < 1e-5);
    }

    #[test]
    fn step_weights_sum_to_one(steps in 1usize..600) {
        let w = step_weights(&NoiseSchedule::new(steps, 1.0).unwrap());
        prop_assert_eq!(w.len(), steps);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn mask_is_a_prefix_of_ceil_length(steps in 1usize..300, f in 0.0f64..=1.0) {
        let mask = make_mask(steps, MaskMode::FractionFront(f)).unwrap();
        let on = mask.iter().filter(|&&b| b).count();
        prop_assert!(mask[..on].iter().all(|&b| b));
        let exact = f * steps as f64;
        prop_assert!(on as f64 >= exact - 1e-6 && (on as f64) < exact + 1.0);
    }

    #[test]
    fn sparse_bce_is_nonnegative(logits in prop::collection::vec(-8.0f64..8.0, 10), ys in prop::collection::vec(0.0f32..=1.0, 10)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(logits));
        let l = sparse_bce(&mut g, x, &Tensor::from_vec(ys), 0.2).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
    }

    #[test]
    fn gradients_accumulate_additively(x in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_vec(x));
        let t = g.tanh(p).unwrap();
        let sq = g.mul(t, t).unwrap();
        let y = g.sum(sq).unwrap();
        g.backward(y).unwrap();
        let once = g.grad(p).unwrap();
        g.backward(y).unwrap();
        let twice = g.grad(p).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn renoise_to_the_same_time_is_identity(z in vec_f32(8), n in vec_f32(8), t in 0.0f64..0.99) {
        let z = Tensor::from_vec(z);
        let out = renoise(&z, t, t, &Tensor::from_vec(n)).unwrap();
        prop_assert!(out.max_abs_diff(&z).unwrap() < 1e-6);
    }

    #[test]
    fn unit_cfg_scale_returns_the_conditional(c in vec_f32(8), u in vec_f32(8)) {
        let c = Tensor::from_vec(c);
        let out = cfg_combine(&c, &Tensor::from_vec(u), 1.0).unwrap();
        prop_assert!(out.max_abs_diff(&c).unwrap() < 1e-6);
    }

    #[test]
    fn savgol_keeps_quadratics(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
        let xs: Vec<f64> = (0..30).map(|i| { let i = f64::from(i); a * i * i + b * i + c }).collect();
        let smooth = savgol(&xs, 7, 2).unwrap();
        for i in 3..27 {
            prop_assert!((xs[i] - smooth[i]).abs() < 1e-8 * (1.0 + xs[i].abs()));
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_zero_on_itself(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..10),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..10),
    ) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn extractors_are_pure_and_finite(samples in prop::collection::vec(-1.0f32..1.0, 8 * HOP)) {
        let w = Waveform::new(samples);
        for kind in ControlKind::ALL {
            let a = extract(kind, &w).unwrap();
            let b = extract(kind, &w).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.frames, 8);
            prop_assert!(a.values.iter().all(|v| v.is_finite()));
            if kind.is_probability() {
                prop_assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
