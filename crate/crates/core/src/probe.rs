//! Seeded speech-like test signals: voiced syllables with a gliding pitch,
//! harmonics shaped by vowel formants, aspiration noise, fricative bursts
//! and pauses. Used in place of a speech corpus for synthesis and testing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioClip;

/// First three formants (Hz) of a few cardinal vowels.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [640.0, 1190.0, 2390.0],
    [440.0, 1020.0, 2240.0],
];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 150.0];
const MAX_HARMONIC_HZ: f64 = 5000.0;
/// Spectral tilt exponent of the harmonic amplitudes.
const TILT: f64 = 0.6;
const BREATH: f64 = 0.5;
const FRICATIVE_PROB: f64 = 0.7;

fn formant_gain(f: f64, formants: &[f64; 3]) -> f64 {
    let resonance: f64 = formants
        .iter()
        .zip(FORMANT_BW)
        .map(|(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2)))
        .sum();
    // Glottal roll-off.
    (0.05 + resonance) * (200.0 / f.max(200.0)).powf(TILT)
}

/// Two-pole resonator at `fc` with bandwidth `bw`, unit peak gain.
struct Resonator {
    a1: f64,
    a2: f64,
    g: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(fc: f64, bw: f64, fs: f64) -> Self {
        let r = (-PI * bw / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * fc / fs).cos();
        let a2 = -r * r;
        Resonator { a1, a2, g: 1.0 - r, y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.g * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn add_syllable(out: &mut [f64], start: usize, len: usize, fs: f64, rng: &mut ChaCha8Rng) {
    let formants = VOWELS[rng.random_range(0..VOWELS.len())];
    let f0_start = rng.random_range(95.0..220.0);
    let f0_end = f0_start * rng.random_range(0.8..1.2);
    let amp = rng.random_range(0.4..1.0);
    let attack = (0.25 * len as f64).max(1.0);
    let mut phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut breath: Vec<Resonator> = formants
        .iter()
        .zip(FORMANT_BW)
        .map(|(fc, bw)| Resonator::new(*fc, 2.0 * bw, fs))
        .collect();
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let frac = i as f64 / len as f64;
        let f0 = f0_start + (f0_end - f0_start) * frac;
        phase += 2.0 * PI * f0 / fs;
        let env = if (i as f64) < attack {
            (0.5 * PI * i as f64 / attack).sin().powi(2)
        } else {
            (0.5 * PI * (len - i) as f64 / (len as f64 - attack)).sin().powf(0.7)
        };
        let mut s = 0.0;
        let mut h = 1.0;
        while h * f0 < MAX_HARMONIC_HZ {
            s += formant_gain(h * f0, &formants) * (h * phase).sin();
            h += 1.0;
        }
        let w: f64 = rng.random_range(-1.0..1.0);
        let aspiration: f64 = breath.iter_mut().map(|r| r.step(w)).sum();
        out[start + i] += amp * env * (s + BREATH * aspiration);
    }
}

fn add_fricative(out: &mut [f64], start: usize, len: usize, rng: &mut ChaCha8Rng) {
    let amp = rng.random_range(0.25..1.0);
    let (mut prev, mut prev2) = (0.0, 0.0);
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let w: f64 = rng.random_range(-1.0..1.0);
        // Second difference leaves mostly high-frequency energy.
        let hp = w - 2.0 * prev + prev2;
        prev2 = prev;
        prev = w;
        let env = (PI * i as f64 / len as f64).sin();
        out[start + i] += amp * env * hp;
    }
}

/// Speech-like mono signal of `duration` seconds, peak-normalized to 0.5.
pub fn speech_like(duration: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let n = (duration * fs).round() as usize;
    let mut out = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = rng.random_range(0.05..0.15);
    while t < duration - 0.1 {
        if rng.random_bool(FRICATIVE_PROB) {
            let len = rng.random_range(0.04..0.10);
            add_fricative(&mut out, (t * fs) as usize, (len * fs) as usize, &mut rng);
            t += len * 0.8;
        }
        let len = rng.random_range(0.12..0.30);
        add_syllable(&mut out, (t * fs) as usize, (len * fs) as usize, fs, &mut rng);
        t += len;
        t += if rng.random_bool(0.12) {
            rng.random_range(0.30..0.50)
        } else {
            rng.random_range(0.04..0.20)
        };
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

pub fn speech_like_clip(duration: f64, sample_rate: u32, seed: u64) -> AudioClip {
    AudioClip::mono(speech_like(duration, sample_rate, seed), sample_rate)
        .expect("probe is finite and non-empty")
}
