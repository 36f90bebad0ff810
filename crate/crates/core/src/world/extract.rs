//! Differentiable feature extractors, built as graph fragments so guidance
//! can backpropagate through them.

use std::f64::consts::{LN_10, PI};

use super::savgol::{mirror_index, savgol_coeffs};
use super::{pitch_hz, ControlKind, ControlTrack, Waveform, FRAME, HOP, PITCH_BINS, SAMPLE_RATE};
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub(crate) const SAVGOL_WINDOW: usize = 9;
pub(crate) const SAVGOL_ORDER: usize = 2;
const PAD: usize = (FRAME - HOP) / 2;
/// Probe frequencies per pitch bin, spread over one bin width.
const PROBES: usize = 3;
const PITCH_TEMPERATURE: f64 = 0.1;

/// Sample span `[lo, hi)` of the analysis window of frame `f`, clipped to
/// the clip.
pub(crate) fn frame_span(f: usize, n: usize) -> (usize, usize) {
    let lo = (f * HOP).saturating_sub(PAD);
    let hi = (f * HOP + FRAME - PAD).min(n);
    (lo, hi)
}

fn frames_of<T: Real>(g: &Graph<T>, x: NodeId) -> (usize, usize, usize) {
    let s = g.shape(x);
    (s[0], s[1], s[1] / HOP)
}

/// Smoothed dB level: `[B, L]` samples to `[B, L / 64]`.
///
/// Mean power is taken over the samples of each window that fall inside
/// the clip, so edge frames are not biased by padding.
pub fn intensity_graph<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (b, len, frames) = frames_of(g, x);
    let sq = g.square(x)?;
    let sq = g.reshape(sq, &[b, len, 1])?;
    let ones = g.constant(Tensor::full([FRAME, 1, 1], T::one()));
    let energy = g.conv1d(sq, ones, HOP, PAD, 1)?;
    let energy = g.reshape(energy, &[b, frames])?;
    let counts: Vec<T> = (0..frames)
        .map(|f| {
            let (lo, hi) = frame_span(f, len);
            T::lit((hi - lo) as f64)
        })
        .collect();
    let counts = g.constant(Tensor::from_vec(counts));
    let ms = g.div(energy, counts)?;
    let ms = g.offset(ms, 1e-20)?;
    let rms = g.sqrt(ms)?;
    let rms = g.offset(rms, 1e-6)?;
    let ln = g.log(rms)?;
    let db = g.scale(ln, 20.0 / LN_10)?;
    if frames < SAVGOL_WINDOW {
        return Ok(db);
    }
    smooth(g, db, b, frames)
}

/// Savitzky-Golay over axis 1 of `[B, F]` with mirror padding.
fn smooth<T: Real>(g: &mut Graph<T>, x: NodeId, b: usize, frames: usize) -> Result<NodeId> {
    let half = (SAVGOL_WINDOW / 2) as isize;
    let index: Vec<usize> = (-half..frames as isize + half)
        .map(|i| mirror_index(i, frames))
        .collect();
    let padded = g.gather(x, 1, &index)?;
    let padded = g.reshape(padded, &[b, frames + 2 * half as usize, 1])?;
    let coeffs = savgol_coeffs(SAVGOL_WINDOW, SAVGOL_ORDER)?;
    let kernel = g.constant(Tensor::new(
        vec![SAVGOL_WINDOW, 1, 1],
        coeffs.into_iter().map(T::lit).collect(),
    )?);
    let y = g.conv1d(padded, kernel, 1, 0, 1)?;
    g.reshape(y, &[b, frames])
}

/// Pitch probabilities: `[B, L]` samples to `[B, L / 64, 16]`.
///
/// Each bin's magnitude is the mean Hann-windowed DTFT magnitude at three
/// probe frequencies spanning the bin; logits are magnitudes over a tenth
/// of the frame maximum.
pub fn pitch_graph<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (b, len, frames) = frames_of(g, x);
    let x = g.reshape(x, &[b, len, 1])?;
    let kernel = g.constant(dtft_kernel());
    let spec = g.conv1d(x, kernel, HOP, PAD, 1)?;
    let power = g.square(spec)?;
    let power = g.reshape(power, &[b, frames, PITCH_BINS * PROBES, 2])?;
    let power = g.sum_axis(power, 3)?;
    let power = g.offset(power, 1e-12)?;
    let mag = g.sqrt(power)?;
    let mag = g.reshape(mag, &[b, frames, PITCH_BINS, PROBES])?;
    let mag = g.mean_axis(mag, 3)?;
    let peak = g.max_axis(mag, 2)?;
    let peak = g.offset(peak, 1e-6)?;
    let peak = g.scale(peak, PITCH_TEMPERATURE)?;
    let peak = g.reshape(peak, &[b, frames, 1])?;
    let peak = g.gather(peak, 2, &[0; PITCH_BINS])?;
    let logits = g.div(mag, peak)?;
    g.softmax(logits)
}

/// Conv kernel `[256, 1, 16 * 3 * 2]` of windowed cosines and sines.
fn dtft_kernel<T: Real>() -> Tensor<T> {
    let window = crate::tensor::hann(FRAME);
    let step = 2f64.powf(1.0 / (PITCH_BINS - 1) as f64 * 3.0 / PROBES as f64);
    let channels = PITCH_BINS * PROBES * 2;
    let mut data = vec![T::zero(); FRAME * channels];
    for k in 0..PITCH_BINS {
        for p in 0..PROBES {
            let f = pitch_hz(k) * step.powf(p as f64 - (PROBES / 2) as f64);
            let omega = 2.0 * PI * f / f64::from(SAMPLE_RATE);
            let c = (k * PROBES + p) * 2;
            for (n, w) in window.iter().enumerate() {
                data[n * channels + c] = T::lit(w * (omega * n as f64).cos());
                data[n * channels + c + 1] = T::lit(w * (omega * n as f64).sin());
            }
        }
    }
    Tensor::new(vec![FRAME, 1, channels], data).expect("kernel shape")
}

/// Beat probabilities: `[B, L]` samples to `[B, L / 64]`.
///
/// The envelope is the peak of `|x|` over the 256 samples ending at each
/// frame's last sample; onsets are its rectified first difference mapped
/// through `2 * (sigmoid(10 d) - 0.5)`.
pub fn beats_graph<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (b, len, frames) = frames_of(g, x);
    let lead = FRAME - HOP;
    let mag = g.abs(x)?;
    let zeros = g.constant(Tensor::zeros([b, lead]));
    let padded = g.concat(&[zeros, mag], 1)?;
    let index: Vec<usize> = (0..frames)
        .flat_map(|f| (0..FRAME).map(move |s| f * HOP + s))
        .collect();
    debug_assert!(index.iter().all(|&i| i < len + lead));
    let windows = g.gather(padded, 1, &index)?;
    let windows = g.reshape(windows, &[b, frames, FRAME])?;
    let env = g.max_axis(windows, 2)?;
    let first = g.constant(Tensor::zeros([b, 1]));
    let diff = if frames > 1 {
        let head = g.slice(env, 1, 0, frames - 1)?;
        let prev = g.concat(&[first, head], 1)?;
        g.sub(env, prev)?
    } else {
        env
    };
    let rect = g.relu(diff)?;
    let z = g.scale(rect, 10.0)?;
    let p = g.sigmoid(z)?;
    let p = g.offset(p, -0.5)?;
    let p = g.scale(p, 2.0)?;
    g.clamp(p, 0.0, 1.0)
}

/// Extractor graph for `kind` over `[B, L]` samples.
pub fn feature_graph<T: Real>(g: &mut Graph<T>, kind: ControlKind, x: NodeId) -> Result<NodeId> {
    match kind {
        ControlKind::Intensity => intensity_graph(g, x),
        ControlKind::Pitch => pitch_graph(g, x),
        ControlKind::Beats => beats_graph(g, x),
    }
}

/// Runs the extractor for `kind` on one clip.
pub fn extract(kind: ControlKind, w: &Waveform) -> Result<ControlTrack> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![1, w.len()], w.samples.clone())?);
    let y = feature_graph(&mut g, kind, x)?;
    ControlTrack::new(kind, g.value(y).to_vec())
}

pub fn extract_intensity(w: &Waveform) -> Result<ControlTrack> {
    extract(ControlKind::Intensity, w)
}

pub fn extract_pitch(w: &Waveform) -> Result<ControlTrack> {
    extract(ControlKind::Pitch, w)
}

pub fn extract_beats(w: &Waveform) -> Result<ControlTrack> {
    extract(ControlKind::Beats, w)
}
