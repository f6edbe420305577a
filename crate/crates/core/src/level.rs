//! Active speech level measurement (ITU-T P.56 method B) and level normalization.

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Level the feature pipeline normalizes every input to before analysis.
pub const TARGET_LEVEL_DBOV: f64 = -26.0;

const TIME_CONSTANT_S: f64 = 0.03;
const HANGOVER_S: f64 = 0.2;
const MARGIN_DB: f64 = 15.9;
const NUM_THRESHOLDS: usize = 16;
const MIN_DURATION_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveLevelResult {
    /// dBov, 0 dBov being an RMS of 1.0.
    pub active_level: f64,
    pub activity_factor: f64,
    pub rms_level: f64,
}

/// Active speech level of a single-channel clip.
pub fn active_speech_level(clip: &AudioClip) -> Result<ActiveLevelResult> {
    if clip.num_channels() != 1 {
        return Err(Error::InvalidClip(format!(
            "active level needs a single channel, got {}",
            clip.num_channels()
        )));
    }
    measure(clip.channel(0), clip.sample_rate())
}

/// Active speech level of one channel's samples.
pub fn measure(samples: &[f64], sample_rate: u32) -> Result<ActiveLevelResult> {
    let fs = sample_rate as f64;
    if (samples.len() as f64) < MIN_DURATION_S * fs {
        return Err(Error::InsufficientDuration(format!(
            "{:.3} s is below the {MIN_DURATION_S} s minimum",
            samples.len() as f64 / fs
        )));
    }
    let energy: f64 = samples.iter().map(|x| x * x).sum();
    if energy == 0.0 {
        return Err(Error::NoActivity);
    }

    let g = (-1.0 / (fs * TIME_CONSTANT_S)).exp();
    let hangover = (HANGOVER_S * fs).round() as usize;
    // Thresholds from full scale down to 2^-15, halving each step.
    let thresholds: [f64; NUM_THRESHOLDS] = std::array::from_fn(|j| 0.5f64.powi(j as i32));
    let mut active = [0usize; NUM_THRESHOLDS];
    let mut hang = [hangover; NUM_THRESHOLDS];
    let (mut p, mut q) = (0.0, 0.0);
    for &x in samples {
        p = g * p + (1.0 - g) * x.abs();
        q = g * q + (1.0 - g) * p;
        for j in 0..NUM_THRESHOLDS {
            if q >= thresholds[j] {
                active[j] += 1;
                hang[j] = 0;
            } else if hang[j] < hangover {
                active[j] += 1;
                hang[j] += 1;
            }
        }
    }

    let n = samples.len() as f64;
    let rms_level = 10.0 * (energy / n).log10();
    let level = |j: usize| 10.0 * (energy / active[j] as f64).log10();
    let delta = |j: usize| {
        if active[j] == 0 {
            f64::NEG_INFINITY
        } else {
            level(j) - 20.0 * thresholds[j].log10()
        }
    };

    // Scan upward from the lowest threshold for the first rung whose
    // level-minus-threshold falls to the margin.
    let lowest = NUM_THRESHOLDS - 1;
    if active[lowest] == 0 {
        return Err(Error::NoActivity);
    }
    let mut result = (level(lowest), active[lowest] as f64 / n);
    if delta(lowest) > MARGIN_DB {
        for j in (0..lowest).rev() {
            let d_hi = delta(j);
            if d_hi <= MARGIN_DB {
                let lo = j + 1;
                result = if active[j] == 0 {
                    (level(lo), active[lo] as f64 / n)
                } else {
                    let d_lo = delta(lo);
                    let f = (d_lo - MARGIN_DB) / (d_lo - d_hi);
                    (
                        level(lo) + f * (level(j) - level(lo)),
                        (active[lo] as f64 + f * (active[j] as f64 - active[lo] as f64)) / n,
                    )
                };
                break;
            }
            if j == 0 {
                result = (level(0), active[0] as f64 / n);
            }
        }
    }
    Ok(ActiveLevelResult {
        active_level: result.0.max(rms_level),
        activity_factor: result.1.clamp(0.0, 1.0),
        rms_level,
    })
}

/// A level-normalized clip and the gain that produced it.
#[derive(Debug, Clone)]
pub struct NormalizedClip {
    pub clip: AudioClip,
    pub gain: f64,
    /// Samples whose magnitude exceeds 1.0 after the gain.
    pub clipped_samples: usize,
}

const REFINE_TOLERANCE_DB: f64 = 0.01;
const REFINE_ITERATIONS: usize = 4;

/// Scales all channels by one common gain so channel 0 reaches `target_dbov`.
pub fn normalize_to(clip: &AudioClip, target_dbov: f64) -> Result<NormalizedClip> {
    let reference = clip.channel(0);
    let rate = clip.sample_rate();
    let mut gain = 1.0;
    let mut level = measure(reference, rate)?.active_level;
    for _ in 0..REFINE_ITERATIONS {
        let err = target_dbov - level;
        if err.abs() < REFINE_TOLERANCE_DB {
            break;
        }
        gain *= 10f64.powf(err / 20.0);
        let scaled: Vec<f64> = reference.iter().map(|x| x * gain).collect();
        level = measure(&scaled, rate)?.active_level;
    }
    let out = clip.scaled(gain);
    let clipped_samples = out.channels().iter().flatten().filter(|s| s.abs() > 1.0).count();
    Ok(NormalizedClip {
        clip: out,
        gain,
        clipped_samples,
    })
}
