//! Sampling-trajectory datasets for heads trained on model-generated states.
//!
//! File layout, little-endian:
//!
//! ```text
//! b"LTJ1" u32 runs u32 steps u32 stride u32 frames u32 channels
//! per run: u32 class u32 records
//!          f32 intensity[frames] f32 pitch[frames*16] f32 beats[frames]
//!          per record: f64 t  f32 z[frames*channels]
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::extract_all;
use crate::diffusion::{sample, Conditioning, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{Denoiser, Vae};
use crate::parallel::par_map;
use crate::tensor::Tensor;
use crate::world::{ControlKind, ControlTrack, NUM_CLASSES};

const MAGIC: &[u8; 4] = b"LTJ1";

/// One unguided sampling run: recorded posterior means `z0|t` at every
/// `stride`-th step, and the controls extracted from its decoded output.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRun {
    pub class: usize,
    pub targets: [ControlTrack; 3],
    /// `(t, z0|t)` with `z0|t` shaped `[frames, channels]`.
    pub records: Vec<(f64, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub steps: usize,
    pub stride: usize,
    pub frames: usize,
    pub channels: usize,
    pub runs: Vec<TrajectoryRun>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.runs.iter().map(|r| r.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self, run: usize, kind: ControlKind) -> &ControlTrack {
        &self.runs[run].targets[super::kind_index(kind)]
    }
}

/// Seed of run `r` within a dataset seeded by `seed`.
fn run_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng.random()
}

#[allow(clippy::too_many_arguments)]
pub fn build_trajectory_dataset(
    den: &Denoiser,
    vae: &Vae,
    sched: &NoiseSchedule,
    frames: usize,
    cfg_scale: f64,
    n: usize,
    stride: usize,
    seed: u64,
    jobs: usize,
) -> Result<TrajectoryDataset> {
    if stride == 0 {
        return Err(Error::invalid("trajectory stride must be positive"));
    }
    let channels = den.config.latent;
    let runs = par_map(n, jobs, |r| {
        let s = run_seed(seed, r);
        let class = (s % NUM_CLASSES as u64) as usize;
        let cond = Conditioning::class(class, cfg_scale);
        let traj = sample(den, sched, &[frames, channels], cond, None, s, true)?;
        let wave = vae.decode(traj.final_state())?;
        let targets = extract_all(&wave)?;
        let records = (0..sched.steps())
            .step_by(stride)
            .map(|i| {
                let z = traj.z0_hats[i]
                    .clone()
                    .ok_or_else(|| Error::invalid("unrecorded clean estimate"))?;
                Ok((sched.time(i), z))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryRun {
            class,
            targets,
            records,
        })
    })?;
    Ok(TrajectoryDataset {
        steps: sched.steps(),
        stride,
        frames,
        channels,
        runs,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_trajectory_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [ds.runs.len(), ds.steps, ds.stride, ds.frames, ds.channels] {
        put_u32(&mut out, v);
    }
    for run in &ds.runs {
        put_u32(&mut out, run.class);
        put_u32(&mut out, run.records.len());
        for track in &run.targets {
            put_f32s(&mut out, &track.values);
        }
        for (t, z) in &run.records {
            out.extend_from_slice(&t.to_le_bytes());
            put_f32s(&mut out, z.data());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format("trajectory dataset", "truncated"))?;
        self.pos = end;
        Ok(s.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.take()?))).collect()
    }
}

pub fn read_trajectory_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::format("trajectory dataset", "bad magic, expected LTJ1"));
    }
    let (n, steps, stride, frames, channels) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let mut runs = Vec::with_capacity(n);
    for _ in 0..n {
        let class = c.u32()?;
        let count = c.u32()?;
        let mut tracks = Vec::new();
        for kind in ControlKind::ALL {
            tracks.push(ControlTrack::new(kind, c.f32s(frames * kind.dims())?)?);
        }
        let targets: [ControlTrack; 3] = tracks.try_into().expect("three kinds");
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let t = f64::from_le_bytes(c.take()?);
            records.push((t, Tensor::new([frames, channels], c.f32s(frames * channels)?)?));
        }
        runs.push(TrajectoryRun {
            class,
            targets,
            records,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format("trajectory dataset", "trailing bytes"));
    }
    Ok(TrajectoryDataset {
        steps,
        stride,
        frames,
        channels,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DenoiserConfig, VaeConfig};

    fn tiny() -> (Denoiser, Vae) {
        let den = Denoiser::new(
            DenoiserConfig {
                dim: 16,
                layers: 2,
                heads: 2,
                mlp_mult: 1,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut vae = Vae::new(
            VaeConfig {
                res_units: 0,
                ..Default::default()
            },
            1,
        );
        vae.trained = true;
        (den, vae)
    }

    #[test]
    fn record_counts_follow_stride() {
        let (den, vae) = tiny();
        let sched = NoiseSchedule::new(10, 1.0).unwrap();
        let ds = build_trajectory_dataset(&den, &vae, &sched, 4, 3.0, 2, 1, 5, 1).unwrap();
        assert_eq!(ds.len(), 20);
        let ds = build_trajectory_dataset(&den, &vae, &sched, 4, 3.0, 3, 5, 5, 2).unwrap();
        assert_eq!(ds.len(), 6);
        let times: Vec<f64> = ds.runs[0].records.iter().map(|r| r.0).collect();
        assert_eq!(times, vec![sched.time(0), sched.time(5)]);
    }

    #[test]
    fn file_round_trip_and_job_independence() {
        let (den, vae) = tiny();
        let sched = NoiseSchedule::new(6, 1.0).unwrap();
        let a = build_trajectory_dataset(&den, &vae, &sched, 4, 3.0, 3, 2, 9, 1).unwrap();
        let b = build_trajectory_dataset(&den, &vae, &sched, 4, 3.0, 3, 2, 9, 3).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ltj");
        write_trajectory_dataset(&path, &a).unwrap();
        assert_eq!(read_trajectory_dataset(&path).unwrap(), a);
        std::fs::write(&path, b"LTJ0").unwrap();
        assert!(read_trajectory_dataset(&path).is_err());
    }
}
