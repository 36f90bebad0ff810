//! Control alignment, the spectral quality proxy, and paired statistics.

mod runs;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::training::bce_prob;
use crate::world::{ControlKind, ControlTrack, Waveform, SAMPLE_RATE};

pub use runs::{
    checkpoints_used, evaluate_run_dir, execute_runs, generate, plan_runs, plan_runs_with_targets, profile, read_manifest,
    write_profile_csv, write_run_dir, Manifest, ManifestRun, ProfileRow, ReportRow, RunOutput, RunSpec, REPORT_FILE,
};

pub const BANDS: usize = 32;
const BAND_FFT: usize = 512;
const BAND_HOP: usize = 256;

/// Distance between a re-extracted track and its target: mean squared
/// error in dB² for intensity, mean BCE for pitch and beats.
pub fn alignment(generated: &ControlTrack, target: &ControlTrack) -> Result<f64> {
    if generated.kind != target.kind || generated.values.len() != target.values.len() {
        return Err(Error::invalid(format!(
            "cannot align {} track of {} values with {} target of {}",
            generated.kind,
            generated.values.len(),
            target.kind,
            target.values.len()
        )));
    }
    let n = target.values.len().max(1) as f64;
    let pairs = generated.values.iter().zip(&target.values).map(|(&p, &y)| (f64::from(p), f64::from(y)));
    let total: f64 = match target.kind {
        ControlKind::Intensity => pairs.map(|(p, y)| (p - y) * (p - y)).sum(),
        ControlKind::Pitch | ControlKind::Beats => pairs.map(|(p, y)| bce_prob(p, y)).sum(),
    };
    Ok(total / n)
}

fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `BANDS` triangular filters on the mel scale over the FFT bins.
fn filterbank() -> Vec<Vec<f64>> {
    let bins = BAND_FFT / 2 + 1;
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    let top = mel(nyquist);
    let edges: Vec<f64> = (0..BANDS + 2)
        .map(|i| mel_inv(top * i as f64 / (BANDS + 1) as f64))
        .collect();
    (0..BANDS)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * nyquist / (bins - 1) as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-clip mean of log band energies.
pub fn band_features(w: &Waveform) -> Result<Vec<f64>> {
    if w.len() < BAND_FFT {
        return Err(Error::invalid(format!(
            "clip of {} samples is shorter than one {BAND_FFT}-sample analysis frame",
            w.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(BAND_FFT);
    let window: Vec<f64> = (0..BAND_FFT)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / BAND_FFT as f64).cos())
        .collect();
    let bank = filterbank();
    let frames = (w.len() - BAND_FFT) / BAND_HOP + 1;
    let mut acc = vec![0.0; BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); BAND_FFT];
    for f in 0..frames {
        let start = f * BAND_HOP;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(f64::from(w.samples[start + i]) * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..=BAND_FFT / 2].iter().map(|c| c.norm_sqr()).collect();
        for (a, filt) in acc.iter_mut().zip(&bank) {
            let e: f64 = filt.iter().zip(&power).map(|(h, p)| h * p).sum();
            *a += (e + 1e-10).ln();
        }
    }
    Ok(acc.into_iter().map(|a| a / frames as f64).collect())
}

fn gaussian(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("Fréchet distance needs at least two feature rows of equal width"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric positive semi-definite square root; negative round-off
/// eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian(a)?;
    let (mb, cb) = gaussian(b)?;
    if ma.len() != mb.len() {
        return Err(Error::invalid("feature sets differ in width"));
    }
    let ra = sqrt_psd(&ca);
    let inner = &ra * &cb * &ra;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum::<f64>();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Outcome of a one-sided paired sign test that `treated < baseline`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, ½)`; ties dropped.
    pub p_value: f64,
}

pub fn sign_test(baseline: &[f64], treated: &[f64]) -> Result<SignTest> {
    if baseline.len() != treated.len() {
        return Err(Error::invalid("sign test needs paired samples"));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (b, t) in baseline.iter().zip(treated) {
        match t.partial_cmp(b) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).map_err(|e| Error::invalid(e.to_string()))?;
        dist.sf(wins - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// Median of a non-empty sample (mean of the middle pair when even).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rows(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() + shift).collect()).collect()
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let a = rows(1, 40, 6, 0.0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn frechet_matches_the_one_dimensional_closed_form() {
        // For scalars: (ma - mb)² + (sa - sb)².
        let a: Vec<Vec<f64>> = [1.0, 3.0].iter().map(|&x| vec![x]).collect();
        let b: Vec<Vec<f64>> = [4.0, 10.0, 7.0].iter().map(|&x| vec![x]).collect();
        let (sa, sb) = (2f64.sqrt(), 9f64.sqrt());
        let want = (2.0 - 7.0f64).powi(2) + (sa - sb).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn shifting_a_set_costs_the_squared_shift() {
        let a = rows(2, 50, 4, 0.0);
        for shift in [0.1, 1.0] {
            let b = rows(2, 50, 4, shift);
            let d = frechet_distance(&a, &b).unwrap();
            assert!((d - 4.0 * shift * shift).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn sign_test_tail_probabilities() {
        let base = vec![1.0; 10];
        let all = sign_test(&base, &[0.0; 10]).unwrap();
        assert_eq!((all.wins, all.losses), (10, 0));
        assert!((all.p_value - 1.0 / 1024.0).abs() < 1e-12);
        let mut mixed = vec![0.0; 8];
        mixed.extend([2.0, 1.0]);
        let t = sign_test(&base, &mixed).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (8, 1, 1));
        // P(X >= 8), X ~ Bin(9, 1/2) = (9 + 1) / 512.
        assert!((t.p_value - 10.0 / 512.0).abs() < 1e-12);
    }

    #[test]
    fn self_alignment_is_zero_for_intensity() {
        let t = ControlTrack::new(ControlKind::Intensity, vec![-30.0, -12.5, -3.0]).unwrap();
        assert_eq!(alignment(&t, &t).unwrap(), 0.0);
        let u = ControlTrack::new(ControlKind::Intensity, vec![-29.0, -12.5, -5.0]).unwrap();
        assert!((alignment(&u, &t).unwrap() - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn band_features_follow_tone_frequency() {
        let tone = |hz: f64| {
            Waveform::new(
                (0..4096)
                    .map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / f64::from(SAMPLE_RATE)).sin() as f32)
                    .collect(),
            )
        };
        let peak = |hz| {
            let f = band_features(&tone(hz)).unwrap();
            (0..BANDS).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap()
        };
        assert!(peak(200.0) < peak(1000.0));
        assert!(peak(1000.0) < peak(3000.0));
    }

    #[test]
    fn median_of_even_and_odd_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
