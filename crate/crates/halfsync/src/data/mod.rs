//! Synthetic shot generation, normalization, chunking, and deterministic
//! sharding.
//!
//! A *shot* is one multi-channel time series sampled at 1 ms; about 10% of
//! generated shots end in a disruption at their final timestep, preceded by
//! a precursor ramp on a random channel subset that starts 50–200 ms before
//! the event. Non-disruptive shots are AR(1) noise plus slow per-channel
//! drifts. The test split is drawn with shifted generator parameters to
//! stand in for data from a different machine configuration.

mod shard;
mod shotfile;

pub use shard::{chunk_index, make_batch, shard_epoch, Batch, ChunkRef};
pub use shotfile::{load_shots, save_shots};

use crate::numerics::Precision;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// One discharge: `T x D` channel samples, row-major over time, always
/// fp32-representable so file persistence is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub id: u64,
    pub disruptive: bool,
    /// Timestep of the disruption; present iff `disruptive`.
    pub t_disrupt: Option<u32>,
    /// Channels per timestep.
    pub d: usize,
    /// `T * d` values, time-major.
    pub data: Vec<f64>,
}

impl Shot {
    pub fn t_len(&self) -> usize {
        self.data.len() / self.d
    }

    #[inline]
    pub fn at(&self, t: usize, ch: usize) -> f64 {
        self.data[t * self.d + ch]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Shot>,
    pub val: Vec<Shot>,
    pub test: Vec<Shot>,
}

/// Knobs for the synthetic generator. `ramp` is the precursor amplitude in
/// absolute units (compare with `noise`), and the `test_*` multipliers
/// reshape the test split's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub shots: usize,
    pub channels: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub disruptive_fraction: f64,
    /// Precursor lead time range in ms (= timesteps at 1 ms sampling).
    pub lead_min: usize,
    pub lead_max: usize,
    /// How many channels carry the precursor ramp.
    pub precursor_channels: usize,
    /// AR(1) innovation scale and coefficient.
    pub noise: f64,
    pub ar: f64,
    /// Scale of the per-channel baseline and slow drift.
    pub drift: f64,
    /// Peak precursor amplitude at the disruption.
    pub ramp: f64,
    /// Test split size; 0 skips the test split.
    pub test_shots: usize,
    /// Multipliers applied to noise/drift/ramp for the test split.
    pub test_shift: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            shots: 400,
            channels: 4,
            t_min: 300,
            t_max: 500,
            disruptive_fraction: 0.10,
            lead_min: 50,
            lead_max: 200,
            precursor_channels: 2,
            noise: 1.0,
            ar: 0.9,
            drift: 0.5,
            ramp: 6.0,
            test_shots: 80,
            test_shift: 1.2,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.disruptive_fraction > 0.0 && self.disruptive_fraction < 1.0) {
            return Err(Error::Config(format!(
                "generator.disruptive_fraction must be in (0, 1), got {}",
                self.disruptive_fraction
            )));
        }
        if self.t_min <= 30 {
            return Err(Error::Config(format!(
                "generator.t_min must exceed the 30 ms alarm cutoff, got {}",
                self.t_min
            )));
        }
        if self.t_min > self.t_max {
            return Err(Error::Config("generator.t_min > t_max".into()));
        }
        if self.lead_min < 50 || self.lead_min > self.lead_max {
            return Err(Error::Config(
                "generator lead range must satisfy 50 <= lead_min <= lead_max".into(),
            ));
        }
        if self.lead_max >= self.t_min {
            return Err(Error::Config(format!(
                "generator.lead_max {} must be shorter than the shortest shot {}",
                self.lead_max, self.t_min
            )));
        }
        if self.channels == 0 || self.shots == 0 {
            return Err(Error::Config("generator needs at least one shot and channel".into()));
        }
        if self.precursor_channels == 0 || self.precursor_channels > self.channels {
            return Err(Error::Config(format!(
                "generator.precursor_channels must be in [1, {}]",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller (the dependency set has no distribution
/// crate, and two uniform draws keep the stream deterministic).
fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn synth_shot(
    id: u64,
    disruptive: bool,
    p: &GeneratorParams,
    noise: f64,
    drift: f64,
    ramp: f64,
    rng: &mut ChaCha20Rng,
) -> Shot {
    let d = p.channels;
    let t_len = rng.gen_range(p.t_min..=p.t_max);
    let mut data = vec![0.0f64; t_len * d];

    for ch in 0..d {
        let baseline = drift * gauss(rng);
        let slope = drift * gauss(rng);
        let mut v = noise * gauss(rng);
        for t in 0..t_len {
            v = p.ar * v + noise * gauss(rng);
            let trend = baseline + slope * (t as f64 / t_len as f64);
            data[t * d + ch] = trend + v;
        }
    }

    let t_disrupt = if disruptive {
        let t_d = t_len - 1;
        let lead = rng.gen_range(p.lead_min..=p.lead_max);
        let mut chans: Vec<usize> = (0..d).collect();
        chans.shuffle(rng);
        chans.truncate(p.precursor_channels);
        let start = t_d - lead;
        for t in start..=t_d {
            let progress = (t - start) as f64 / lead as f64;
            let bump = ramp * progress * progress;
            for &ch in &chans {
                data[t * d + ch] += bump;
            }
        }
        Some(t_d as u32)
    } else {
        None
    };

    // Pin every sample to fp32 so shot files roundtrip losslessly.
    for v in &mut data {
        *v = Precision::Fp32.quantize(*v);
    }
    Shot { id, disruptive, t_disrupt, d, data }
}

/// Generate a pool of shots and split it. The disruptive count is exact
/// (`round(shots * fraction)`), the 80/20 train/val split is stratified by
/// class so small validation sets still contain both labels, and the test
/// split comes from a second pass with the `test_*` shifts applied. The
/// whole dataset is a pure function of `(params, seed)`.
pub fn generate(p: &GeneratorParams, seed: u64) -> Result<Dataset> {
    p.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n_disruptive = (p.shots as f64 * p.disruptive_fraction).round() as usize;
    let mut flags = vec![false; p.shots];
    for f in flags.iter_mut().take(n_disruptive) {
        *f = true;
    }
    flags.shuffle(&mut rng);

    let mut disruptive = Vec::new();
    let mut quiet = Vec::new();
    for (i, &flag) in flags.iter().enumerate() {
        let shot = synth_shot(i as u64, flag, p, p.noise, p.drift, p.ramp, &mut rng);
        if flag {
            disruptive.push(shot);
        } else {
            quiet.push(shot);
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut split = |mut shots: Vec<Shot>, train: &mut Vec<Shot>, val: &mut Vec<Shot>| {
        let n_train = (shots.len() as f64 * 0.8).round() as usize;
        val.extend(shots.split_off(n_train));
        train.extend(shots);
    };
    split(disruptive, &mut train, &mut val);
    split(quiet, &mut train, &mut val);
    // Interleave classes deterministically rather than leaving them grouped.
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);

    let mut test = Vec::new();
    if p.test_shots > 0 {
        let mut test_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7465_7374); // "test"
        let k = (p.test_shots as f64 * p.disruptive_fraction).round() as usize;
        let mut tflags = vec![false; p.test_shots];
        for f in tflags.iter_mut().take(k) {
            *f = true;
        }
        tflags.shuffle(&mut test_rng);
        let s = p.test_shift;
        for (i, &flag) in tflags.iter().enumerate() {
            test.push(synth_shot(
                (1_000_000 + i) as u64,
                flag,
                p,
                p.noise * s,
                p.drift * s,
                p.ramp * s,
                &mut test_rng,
            ));
        }
    }

    Ok(Dataset { train, val, test })
}

/// Per-channel standardization statistics, always taken from the training
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(train: &[Shot]) -> Result<NormStats> {
    let d = match train.first() {
        Some(s) => s.d,
        None => return Err(Error::Data("cannot compute stats on an empty split".into())),
    };
    let mut sum = vec![0.0f64; d];
    let mut sumsq = vec![0.0f64; d];
    let mut count = 0usize;
    for shot in train {
        for t in 0..shot.t_len() {
            for ch in 0..d {
                let v = shot.at(t, ch);
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
        count += shot.t_len();
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sumsq
        .iter()
        .zip(&mean)
        .enumerate()
        .map(|(ch, (sq, m))| {
            let var = (sq / n - m * m).max(0.0);
            if var == 0.0 {
                log::warn!("channel {ch} has zero variance; normalizing with unit divisor");
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Standardize every sample in place at fp32: `(x - mean) / std` per
/// channel, with the stats taken from whatever split produced `stats`.
pub fn normalize(shots: &mut [Shot], stats: &NormStats) {
    let p = Precision::Fp32;
    for shot in shots {
        let d = shot.d;
        for (i, v) in shot.data.iter_mut().enumerate() {
            let ch = i % d;
            *v = p.quantize((*v - stats.mean[ch]) / stats.std[ch]);
        }
    }
}

/// Convenience wrapper enforcing the contract: stats from the training
/// split, applied to all three splits.
pub fn normalize_dataset(ds: &mut Dataset) -> Result<NormStats> {
    let stats = channel_stats(&ds.train)?;
    normalize(&mut ds.train, &stats);
    normalize(&mut ds.val, &stats);
    normalize(&mut ds.test, &stats);
    Ok(stats)
}
