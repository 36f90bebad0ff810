//! Synthetic signal world with analytically known controls.

mod extract;
mod io;
mod savgol;

pub use extract::{
    beats_graph, extract, extract_beats, extract_intensity, extract_pitch, feature_graph,
    intensity_graph, pitch_graph,
};
pub use io::{read_tracks_csv, read_wav, write_tracks_csv, write_wav};
pub use savgol::{mirror_index, savgol, savgol_coeffs};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
/// Samples per latent frame; also the extractor hop.
pub const HOP: usize = 64;
/// Extractor analysis window.
pub const FRAME: usize = 256;
pub const DEFAULT_SAMPLES: usize = 16384;
pub const PITCH_BINS: usize = 16;
pub const NUM_CLASSES: usize = 3;
pub const CLICK_SAMPLES: usize = 40;
pub const CLICK_AMPLITUDE: f64 = 0.5;

/// Centre frequency of pitch bin `k`: 16 log-spaced bins over 110-880 Hz.
pub fn pitch_hz(k: usize) -> f64 {
    110.0 * 2f64.powf(3.0 * k as f64 / (PITCH_BINS - 1) as f64)
}

/// Mono clip at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Latent frames covered by the clip.
    pub fn frames(&self) -> usize {
        self.samples.len() / HOP
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlKind {
    Intensity,
    Pitch,
    Beats,
}

impl ControlKind {
    pub const ALL: [ControlKind; 3] = [ControlKind::Intensity, ControlKind::Pitch, ControlKind::Beats];

    pub fn dims(self) -> usize {
        match self {
            ControlKind::Pitch => PITCH_BINS,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ControlKind::Intensity => "intensity",
            ControlKind::Pitch => "pitch",
            ControlKind::Beats => "beats",
        }
    }

    /// Whether values are probabilities (compared with BCE) rather than dB.
    pub fn is_probability(self) -> bool {
        self != ControlKind::Intensity
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intensity" => Ok(ControlKind::Intensity),
            "pitch" => Ok(ControlKind::Pitch),
            "beats" => Ok(ControlKind::Beats),
            other => Err(Error::invalid(format!("unknown control kind {other:?}"))),
        }
    }
}

/// Feature track at latent rate, `values` laid out `[frames, dims]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTrack {
    pub kind: ControlKind,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl ControlTrack {
    pub fn new(kind: ControlKind, values: Vec<f32>) -> Result<Self> {
        let dims = kind.dims();
        if values.len() % dims != 0 {
            return Err(Error::invalid(format!(
                "{kind} track of {} values is not a multiple of {dims}",
                values.len()
            )));
        }
        Ok(Self {
            kind,
            frames: values.len() / dims,
            values,
        })
    }

    pub fn dims(&self) -> usize {
        self.kind.dims()
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        let d = self.dims();
        &self.values[frame * d..(frame + 1) * d]
    }

    /// Per-frame argmax over dims.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|f| {
                self.row(f)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i)
            })
            .collect()
    }
}

/// Linear interpolation onto `target` frames, endpoints preserved.
pub fn resample_track(x: &[f64], target: usize) -> Result<Vec<f64>> {
    if target < 1 {
        return Err(Error::invalid("resample target must be at least one frame"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("resampling needs at least two frames"));
    }
    if target == x.len() {
        return Ok(x.to_vec());
    }
    if target == 1 {
        return Ok(vec![x[0]]);
    }
    let scale = (x.len() - 1) as f64 / (target - 1) as f64;
    Ok((0..target)
        .map(|j| {
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let frac = pos - i as f64;
            x[i] * (1.0 - frac) + x[i + 1] * frac
        })
        .collect())
}

/// Oscillator families; the class label stands in for a text prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timbre {
    Sine,
    Saw,
    Square,
}

impl Timbre {
    pub fn from_class(class: usize) -> Result<Self> {
        match class {
            0 => Ok(Timbre::Sine),
            1 => Ok(Timbre::Saw),
            2 => Ok(Timbre::Square),
            c => Err(Error::invalid(format!("class {c} is not one of 0, 1, 2"))),
        }
    }

    const GAIN: f64 = 0.85;

    /// Amplitude of harmonic `h` (1-based).
    fn harmonic(self, h: usize) -> f64 {
        match self {
            Timbre::Sine => f64::from(u8::from(h == 1)),
            Timbre::Saw => {
                let sign = if h % 2 == 1 { 1.0 } else { -1.0 };
                Self::GAIN * 2.0 / PI * sign / h as f64
            }
            Timbre::Square => {
                if h % 2 == 1 {
                    Self::GAIN * 4.0 / PI / h as f64
                } else {
                    0.0
                }
            }
        }
    }

    fn max_harmonic(self, f0: f64) -> usize {
        match self {
            Timbre::Sine => 1,
            _ => ((f64::from(SAMPLE_RATE) / 2.0 / f0).floor() as usize).max(1),
        }
    }

    /// Mean square of the band-limited waveform at `f0`.
    pub fn mean_square(self, f0: f64) -> f64 {
        (1..=self.max_harmonic(f0))
            .map(|h| self.harmonic(h).powi(2) / 2.0)
            .sum()
    }

    fn value(self, phase: f64, f0: f64) -> f64 {
        (1..=self.max_harmonic(f0))
            .map(|h| self.harmonic(h) * (h as f64 * phase).sin())
            .sum()
    }
}

/// Parameters of one synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    /// 0 sine, 1 saw, 2 square.
    pub class: usize,
    /// `(time_s, amplitude)` knots, linearly interpolated, held at the ends.
    pub envelope: Vec<(f64, f64)>,
    /// Pitch bins of equal-length segments covering the clip.
    pub pitches: Vec<usize>,
    /// Click onsets in seconds.
    pub beats: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Beat onsets at `tempo` from time 0, keeping each beat whose whole
/// period fits in `duration`.
pub fn beat_times(tempo_bpm: f64, duration: f64) -> Vec<f64> {
    let period = 60.0 / tempo_bpm;
    (0..)
        .map(|k| k as f64 * period)
        .take_while(|&t| t + period <= duration + 1e-12)
        .collect()
}

impl WorldSpec {
    /// Random clip: 5-9 envelope knots in [0.05, 0.45], 1-4 pitch
    /// segments, tempo 60-180 BPM.
    pub fn random(rng: &mut impl Rng, samples: usize) -> Self {
        let duration = samples as f64 / f64::from(SAMPLE_RATE);
        let class = rng.random_range(0..NUM_CLASSES);
        let knots = rng.random_range(5..=9);
        let envelope = (0..knots)
            .map(|i| {
                let t = duration * i as f64 / (knots - 1) as f64;
                (t, rng.random_range(0.05..0.45))
            })
            .collect();
        let segments = rng.random_range(1..=4);
        let pitches = (0..segments).map(|_| rng.random_range(0..PITCH_BINS)).collect();
        let tempo = rng.random_range(60.0..180.0);
        Self {
            class,
            envelope,
            pitches,
            beats: beat_times(tempo, duration),
            samples,
            seed: rng.random(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples as f64 / f64::from(SAMPLE_RATE)
    }

    pub fn frames(&self) -> usize {
        self.samples / HOP
    }

    pub fn amplitude(&self, t: f64) -> f64 {
        let knots = &self.envelope;
        match knots.iter().position(|&(kt, _)| kt > t) {
            None => knots.last().map_or(0.0, |k| k.1),
            Some(0) => knots[0].1,
            Some(i) => {
                let (t0, a0) = knots[i - 1];
                let (t1, a1) = knots[i];
                a0 + (a1 - a0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Pitch bin active at sample `n`.
    pub fn pitch_at(&self, n: usize) -> usize {
        let seg = n * self.pitches.len() / self.samples.max(1);
        self.pitches[seg.min(self.pitches.len() - 1)]
    }

    fn validate(&self) -> Result<Timbre> {
        let timbre = Timbre::from_class(self.class)?;
        if self.pitches.is_empty() {
            return Err(Error::invalid("pitch sequence is empty"));
        }
        if let Some(&k) = self.pitches.iter().find(|&&k| k >= PITCH_BINS) {
            return Err(Error::invalid(format!("pitch bin {k} is off the grid")));
        }
        if self.envelope.is_empty() {
            return Err(Error::invalid("envelope has no knots"));
        }
        if self.samples == 0 || self.samples % HOP != 0 {
            return Err(Error::invalid(format!(
                "clip length {} is not a positive multiple of {HOP}",
                self.samples
            )));
        }
        let dur = self.duration();
        if self.beats.windows(2).any(|w| w[1] <= w[0])
            || self.beats.iter().any(|&b| !(0.0..dur).contains(&b))
        {
            return Err(Error::invalid("beat times must increase strictly within the clip"));
        }
        Ok(timbre)
    }
}

/// Rendered clip with its ground-truth controls.
#[derive(Clone, Debug)]
pub struct Clip {
    pub spec: WorldSpec,
    pub wave: Waveform,
    pub intensity: ControlTrack,
    pub pitch: ControlTrack,
    pub beats: ControlTrack,
}

impl Clip {
    pub fn track(&self, kind: ControlKind) -> &ControlTrack {
        match kind {
            ControlKind::Intensity => &self.intensity,
            ControlKind::Pitch => &self.pitch,
            ControlKind::Beats => &self.beats,
        }
    }
}

/// Renders a clip: enveloped oscillator plus a click at every beat.
///
/// Ground-truth intensity is the smoothed dB level of the frame's mean
/// power, evaluated from the envelope and the oscillator's analytic mean
/// square plus the exact click energy; pitch is one-hot on the active bin;
/// beats mark the frame each click starts in.
pub fn synth(spec: &WorldSpec) -> Result<Clip> {
    use rand::SeedableRng;
    let timbre = spec.validate()?;
    let sr = f64::from(SAMPLE_RATE);
    let n = spec.samples;
    let mut tone = vec![0.0f64; n];
    let mut env_sq = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for (i, (out, e2)) in tone.iter_mut().zip(env_sq.iter_mut()).enumerate() {
        let f0 = pitch_hz(spec.pitch_at(i));
        let a = spec.amplitude(i as f64 / sr);
        *out = a * timbre.value(phase, f0);
        *e2 = a * a * timbre.mean_square(f0);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
    }
    let mut clicks = vec![0.0f64; n];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut beat_frames = Vec::with_capacity(spec.beats.len());
    for &b in &spec.beats {
        let start = (b * sr).round() as usize;
        beat_frames.push(start / HOP);
        for k in 0..CLICK_SAMPLES.min(n.saturating_sub(start)) {
            let decay = 1.0 - k as f64 / CLICK_SAMPLES as f64;
            clicks[start + k] += CLICK_AMPLITUDE * decay * rng.random_range(-1.0..1.0);
        }
    }
    let samples: Vec<f32> = tone
        .iter()
        .zip(&clicks)
        .map(|(t, c)| (t + c).clamp(-1.0, 1.0) as f32)
        .collect();

    let frames = spec.frames();
    let power: Vec<f64> = env_sq.iter().zip(&clicks).map(|(e, c)| e + c * c).collect();
    let db: Vec<f64> = (0..frames)
        .map(|f| {
            let (lo, hi) = extract::frame_span(f, n);
            let ms = power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            20.0 * (ms.sqrt() + 1e-6).log10()
        })
        .collect();
    let db = if frames >= extract::SAVGOL_WINDOW {
        savgol(&db, extract::SAVGOL_WINDOW, extract::SAVGOL_ORDER)?
    } else {
        db
    };
    let intensity = ControlTrack::new(
        ControlKind::Intensity,
        db.into_iter().map(|v| v as f32).collect(),
    )?;

    let mut pitch = vec![0.0f32; frames * PITCH_BINS];
    for f in 0..frames {
        let centre = (f * HOP + HOP / 2).min(n - 1);
        pitch[f * PITCH_BINS + spec.pitch_at(centre)] = 1.0;
    }
    let mut beats = vec![0.0f32; frames];
    for f in beat_frames {
        if f < frames {
            beats[f] = 1.0;
        }
    }
    Ok(Clip {
        spec: spec.clone(),
        wave: Waveform::new(samples),
        intensity,
        pitch: ControlTrack::new(ControlKind::Pitch, pitch)?,
        beats: ControlTrack::new(ControlKind::Beats, beats)?,
    })
}

/// `n` random clips of `samples` length from one seed.
pub fn random_clips(n: usize, samples: usize, seed: u64) -> Result<Vec<Clip>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synth(&WorldSpec::random(&mut rng, samples)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(class: usize, pitches: Vec<usize>, beats: Vec<f64>) -> WorldSpec {
        WorldSpec {
            class,
            envelope: vec![(0.0, 1.0)],
            pitches,
            beats,
            samples: DEFAULT_SAMPLES,
            seed: 1,
        }
    }

    #[test]
    fn constant_sine_truth_is_minus_3db() {
        let clip = synth(&plain(0, vec![5], vec![])).unwrap();
        for v in &clip.intensity.values {
            assert!((f64::from(*v) + 3.0103).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn held_pitch_is_one_hot() {
        let clip = synth(&plain(1, vec![9], vec![])).unwrap();
        assert_eq!(clip.pitch.frames, 256);
        for f in 0..clip.pitch.frames {
            let row = clip.pitch.row(f);
            assert_eq!(row[9], 1.0);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn tempo_120_gives_four_beats() {
        assert_eq!(beat_times(120.0, 2.048), vec![0.0, 0.5, 1.0, 1.5]);
        let clip = synth(&plain(0, vec![0], beat_times(120.0, 2.048))).unwrap();
        let marked: Vec<usize> = (0..256).filter(|&f| clip.beats.values[f] == 1.0).collect();
        assert_eq!(marked, vec![0, 62, 125, 187]);
    }

    #[test]
    fn waveform_contract() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let clip = synth(&WorldSpec::random(&mut rng, DEFAULT_SAMPLES)).unwrap();
            assert_eq!(clip.wave.len(), 16384);
            assert!(clip.wave.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
            let b = &clip.spec.beats;
            assert!(b.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn synth_rejects_invalid_specs() {
        assert!(synth(&plain(0, vec![], vec![])).is_err());
        assert!(synth(&plain(3, vec![0], vec![])).is_err());
        assert!(synth(&plain(0, vec![16], vec![])).is_err());
        assert!(synth(&plain(0, vec![0], vec![0.5, 0.2])).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = plain(2, vec![3, 7], vec![0.0, 0.7]);
        assert_eq!(synth(&spec).unwrap().wave, synth(&spec).unwrap().wave);
    }

    #[test]
    fn resample_examples() {
        let y = resample_track(&[0.0, 1.0, 0.0], 5).unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
        let x = [1.0, 4.0, -2.0];
        assert_eq!(resample_track(&x, 3).unwrap(), x.to_vec());
        let ramp: Vec<f64> = (0..7).map(|i| 2.0 * i as f64 + 1.0).collect();
        let r = resample_track(&ramp, 4).unwrap();
        assert_eq!((r[0], r[3]), (1.0, 13.0));
        assert!(r.windows(3).all(|w| ((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-12));
        assert!(resample_track(&x, 0).is_err());
        assert!(resample_track(&[1.0], 4).is_err());
    }
}
