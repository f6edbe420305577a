//! Room impulse responses: image-method simulation, synthetic exponential
//! decays, ground-truth RT60 and DRR, convolution and noise mixing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioClip};
use crate::error::{Error, Result};
use crate::level;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width, in samples, of the windowed-sinc kernel used to place each image arrival.
const ARRIVAL_HALF_WIDTH: i64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum RirMeta {
    ImageMethod {
        room: [f64; 3],
        source: [f64; 3],
        mic: [f64; 3],
        /// Wall reflection coefficients: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
        beta: [f64; 6],
    },
    Exponential {
        tau: f64,
        seed: u64,
    },
    External {
        source: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub meta: RirMeta,
}

impl Rir {
    pub fn new(samples: Vec<f64>, sample_rate: u32, meta: RirMeta) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidClip("impulse response must be finite and non-empty".into()));
        }
        if samples.iter().all(|s| *s == 0.0) {
            return Err(Error::ZeroRir);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidClip("sample rate must be positive".into()));
        }
        Ok(Rir {
            samples,
            sample_rate,
            meta,
        })
    }

    /// Takes channel `channel` of a clip as an impulse response.
    pub fn from_clip(clip: &AudioClip, channel: usize, source: impl Into<String>) -> Result<Self> {
        Rir::new(
            clip.channel(channel).to_vec(),
            clip.sample_rate(),
            RirMeta::External {
                source: source.into(),
            },
        )
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn to_clip(&self) -> AudioClip {
        AudioClip::mono(self.samples.clone(), self.sample_rate).expect("valid rir is a valid clip")
    }
}

/// Direct-to-reverberant ratio, or the marker for a response with no
/// reverberant energy at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drr {
    Db(f64),
    DirectOnly,
}

impl Drr {
    pub fn db(self) -> Option<f64> {
        match self {
            Drr::Db(v) => Some(v),
            Drr::DirectOnly => None,
        }
    }
}

impl Serialize for Drr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Drr::Db(v) => s.serialize_f64(*v),
            Drr::DirectOnly => s.serialize_str("direct-only"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RirStats {
    pub rt60: f64,
    pub drr: Drr,
}

pub fn rir_stats(rir: &Rir) -> Result<RirStats> {
    Ok(RirStats {
        rt60: schroeder_rt60(rir)?,
        drr: drr(rir)?,
    })
}

fn inside(p: &[f64; 3], room: &[f64; 3]) -> bool {
    p.iter().zip(room).all(|(x, l)| *x > 0.0 && x < l)
}

/// Image-source room impulse response of a shoebox room.
///
/// Every image within `duration * c` of the microphone contributes
/// `b / (4 pi d)` at delay `d / c`, `b` being the product of its wall
/// reflection coefficients. Arrivals are placed with a Hann-windowed sinc
/// spanning four samples either side.
pub fn image_rir(
    room: [f64; 3],
    source: [f64; 3],
    mic: [f64; 3],
    beta: [f64; 6],
    sample_rate: u32,
    duration: f64,
) -> Result<Rir> {
    if room.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Geometry(format!("room dimensions {room:?} must be positive")));
    }
    if !inside(&source, &room) || !inside(&mic, &room) {
        return Err(Error::Geometry("source and microphone must lie strictly inside the room".into()));
    }
    if source == mic {
        return Err(Error::Geometry("source and microphone coincide".into()));
    }
    if beta.iter().any(|b| !(0.0..1.0).contains(b)) {
        return Err(Error::Geometry(format!("reflection coefficients {beta:?} must lie in [0, 1)")));
    }
    if !(duration >= 0.1) {
        return Err(Error::Geometry(format!("duration {duration} s is below 0.1 s")));
    }

    let fs = sample_rate as f64;
    let len = (duration * fs).round() as usize;
    let max_dist = duration * SPEED_OF_SOUND;
    let mut out = vec![0.0; len];

    // Per axis: (signed offset to the microphone, reflection factor).
    let axis = |a: usize| -> Vec<(f64, f64)> {
        let l = room[a];
        let (b0, b1) = (beta[2 * a], beta[2 * a + 1]);
        let reach = (max_dist / (2.0 * l)).ceil() as i64 + 1;
        let mut v = Vec::new();
        for n in -reach..=reach {
            for q in 0..=1i64 {
                let offset = (1 - 2 * q) as f64 * source[a] + 2.0 * n as f64 * l - mic[a];
                if offset.abs() > max_dist {
                    continue;
                }
                let refl = b0.powi((n - q).abs() as i32) * b1.powi(n.abs() as i32);
                if refl > 0.0 {
                    v.push((offset, refl));
                }
            }
        }
        v
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let max_sq = max_dist * max_dist;
    for &(dx, bx) in &xs {
        for &(dy, by) in &ys {
            let dxy = dx * dx + dy * dy;
            if dxy > max_sq {
                continue;
            }
            let bxy = bx * by;
            for &(dz, bz) in &zs {
                let d2 = dxy + dz * dz;
                if d2 > max_sq {
                    continue;
                }
                let d = d2.sqrt();
                let amp = bxy * bz / (4.0 * PI * d);
                add_arrival(&mut out, d / SPEED_OF_SOUND * fs, amp);
            }
        }
    }
    Rir::new(
        out,
        sample_rate,
        RirMeta::ImageMethod {
            room,
            source,
            mic,
            beta,
        },
    )
}

/// Adds `amp` at a fractional `delay` with a unit-sum Hann-windowed sinc.
fn add_arrival(out: &mut [f64], delay: f64, amp: f64) {
    const W: usize = 2 * ARRIVAL_HALF_WIDTH as usize + 1;
    let center = delay.round() as i64;
    let half_span = ARRIVAL_HALF_WIDTH as f64 + 0.5;
    let frac = delay - center as f64;
    // Taps sit at t = i - H - frac: sin(pi t) only alternates in sign, and the
    // window cosine advances by a fixed angle per tap.
    let sin_frac = (PI * frac).sin();
    let t0 = -(ARRIVAL_HALF_WIDTH as f64) - frac;
    let (mut s, mut c) = (PI * t0 / half_span).sin_cos();
    let (ds, dc) = (PI / half_span).sin_cos();
    let mut kernel = [0.0; W];
    for (i, k) in kernel.iter_mut().enumerate() {
        let t = t0 + i as f64;
        let window = 0.5 * (1.0 + c);
        let sign = if (i as i64 - ARRIVAL_HALF_WIDTH) % 2 == 0 { -1.0 } else { 1.0 };
        let sinc = if t == 0.0 { 1.0 } else { sign * sin_frac / (PI * t) };
        *k = window * sinc;
        (s, c) = (s * dc + c * ds, c * dc - s * ds);
    }
    let sum: f64 = kernel.iter().sum();
    let len = out.len() as i64;
    for (i, k) in kernel.iter().enumerate() {
        let n = center - ARRIVAL_HALF_WIDTH + i as i64;
        if (0..len).contains(&n) {
            out[n as usize] += amp * k / sum;
        }
    }
}

/// Eyring reverberation time of a shoebox room with uniform reflection coefficient.
pub fn eyring_rt60(room: [f64; 3], beta: f64) -> f64 {
    let [lx, ly, lz] = room;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let alpha = 1.0 - beta * beta;
    0.161 * volume / (-surface * (1.0 - alpha).ln())
}

/// Uniform reflection coefficient whose Eyring RT60 equals `rt60`.
pub fn eyring_beta(room: [f64; 3], rt60: f64) -> f64 {
    let [lx, ly, lz] = room;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    (-0.161 * volume / (2.0 * surface * rt60)).exp()
}

/// White Gaussian noise under an exponential amplitude envelope, `exp(-t / tau)`.
pub fn synth_exponential_rir(tau: f64, sample_rate: u32, duration: f64, seed: u64) -> Result<Rir> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("decay constant {tau} must be positive")));
    }
    let fs = sample_rate as f64;
    let len = ((duration * fs).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len)
        .map(|n| {
            let g: f64 = rng.sample(StandardNormal);
            (-(n as f64) / (tau * fs)).exp() * g
        })
        .collect();
    Rir::new(samples, sample_rate, RirMeta::Exponential { tau, seed })
}

/// Schroeder energy decay curve in dB re its initial value.
pub fn energy_decay_curve_db(samples: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; samples.len()];
    let mut acc = 0.0;
    for (i, s) in samples.iter().enumerate().rev() {
        acc += s * s;
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter().map(|e| 10.0 * (e / total).log10()).collect()
}

const FIT_START_DB: f64 = -5.0;
const FIT_END_DB: f64 = -35.0;

/// Reverberation time from a least-squares line through the energy decay
/// curve between -5 and -35 dB, extrapolated to 60 dB.
pub fn schroeder_rt60(rir: &Rir) -> Result<f64> {
    if rir.energy() == 0.0 {
        return Err(Error::ZeroRir);
    }
    let fs = rir.sample_rate as f64;
    let edc = energy_decay_curve_db(&rir.samples);
    let lowest = edc.iter().copied().fold(f64::INFINITY, f64::min);
    if lowest > FIT_END_DB {
        return Err(Error::InsufficientDecay { reached_db: lowest });
    }
    let start = edc.iter().position(|&d| d <= FIT_START_DB).unwrap_or(0);
    let end = edc.iter().rposition(|&d| d >= FIT_END_DB).unwrap_or(0);
    let span_s = end.saturating_sub(start) as f64 / fs;
    if end <= start || span_s < 1e-3 {
        return Err(Error::DegenerateDecay { span_s });
    }
    let n = (end - start + 1) as f64;
    let (mut st, mut sd, mut stt, mut std) = (0.0, 0.0, 0.0, 0.0);
    for (i, &d) in edc.iter().enumerate().take(end + 1).skip(start) {
        let t = i as f64 / fs;
        st += t;
        sd += d;
        stt += t * t;
        std += t * d;
    }
    let slope = (n * std - st * sd) / (n * stt - st * st);
    if !(slope < 0.0) {
        return Err(Error::DegenerateDecay { span_s });
    }
    Ok(-60.0 / slope)
}

const DIRECT_BEFORE_S: f64 = 0.0005;
const DIRECT_AFTER_S: f64 = 0.0025;

/// Energy within [-0.5 ms, +2.5 ms] of the strongest sample over the rest.
pub fn drr(rir: &Rir) -> Result<Drr> {
    let h = &rir.samples;
    if h.iter().all(|s| *s == 0.0) {
        return Err(Error::ZeroRir);
    }
    let fs = rir.sample_rate as f64;
    let peak = (0..h.len())
        .max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs()))
        .expect("non-empty");
    let lo = peak.saturating_sub((DIRECT_BEFORE_S * fs).round() as usize);
    let hi = (peak + (DIRECT_AFTER_S * fs).round() as usize).min(h.len() - 1);
    let direct: f64 = h[lo..=hi].iter().map(|s| s * s).sum();
    let total: f64 = h.iter().map(|s| s * s).sum();
    let reverberant: f64 = h[..lo].iter().chain(&h[hi + 1..]).map(|s| s * s).sum();
    if reverberant == 0.0 || reverberant <= total * f64::EPSILON * 1e-3 {
        return Ok(Drr::DirectOnly);
    }
    Ok(Drr::Db(10.0 * (direct / reverberant).log10()))
}

/// Full linear convolution of one signal with a kernel via FFT.
pub fn fft_convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let out_len = signal.len() + kernel.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| -> Vec<Complex<f64>> {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&s| Complex::new(s, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(signal);
    let mut b = pad(kernel);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|v| v.re * scale).collect()
}

/// Convolves every channel of `clip` with `rir` (resampled to the clip rate if needed).
pub fn convolve(clip: &AudioClip, rir: &Rir) -> AudioClip {
    let kernel = matched_kernel(rir, clip.sample_rate());
    let channels = clip
        .channels()
        .iter()
        .map(|c| fft_convolve(c, &kernel))
        .collect();
    AudioClip::new(channels, clip.sample_rate()).expect("convolution of valid inputs")
}

/// Renders a mono clip through one impulse response per output channel.
pub fn spatialize(mono: &[f64], sample_rate: u32, rirs: &[Rir]) -> Result<AudioClip> {
    let kernels: Vec<Vec<f64>> = rirs.iter().map(|r| matched_kernel(r, sample_rate)).collect();
    let longest = kernels.iter().map(Vec::len).max().unwrap_or(0);
    let channels = kernels
        .iter()
        .map(|k| {
            let mut y = fft_convolve(mono, k);
            y.resize(mono.len() + longest - 1, 0.0);
            y
        })
        .collect();
    AudioClip::new(channels, sample_rate)
}

fn matched_kernel(rir: &Rir, rate: u32) -> Vec<f64> {
    if rir.sample_rate == rate {
        rir.samples.clone()
    } else {
        resample(&rir.to_clip(), rate).into_channels().remove(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseType {
    White,
    /// White noise through a fixed two-pole low-pass (500 Hz corner).
    SpeechShaped,
}

impl NoiseType {
    pub fn name(self) -> &'static str {
        match self {
            NoiseType::White => "white",
            NoiseType::SpeechShaped => "speech-shaped",
        }
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseType::White),
            "speech-shaped" => Ok(NoiseType::SpeechShaped),
            _ => Err(Error::InvalidConfig(format!("unknown noise type {s:?}"))),
        }
    }
}

/// Independent seeded noise on each of `channels` channels.
pub fn generate_noise(
    kind: NoiseType,
    len: usize,
    channels: usize,
    sample_rate: u32,
    seed: u64,
) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole = (-2.0 * PI * 500.0 / sample_rate as f64).exp();
    let chans = (0..channels)
        .map(|_| {
            let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            match kind {
                NoiseType::White => white,
                NoiseType::SpeechShaped => {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    white
                        .into_iter()
                        .map(|x| {
                            s1 = pole * s1 + (1.0 - pole) * x;
                            s2 = pole * s2 + (1.0 - pole) * s1;
                            s2
                        })
                        .collect()
                }
            }
        })
        .collect();
    AudioClip::new(chans, sample_rate).expect("generated noise is valid")
}

#[derive(Debug, Clone)]
pub struct NoisyMix {
    pub clip: AudioClip,
    /// Gain applied to the selected noise segment.
    pub noise_gain: f64,
}

/// Adds `noise` scaled so that the speech active level (channel 0) minus the
/// noise RMS level (all channels pooled) equals `snr_db`. A seeded offset
/// picks the noise segment; shorter noise loops.
pub fn mix_noise_at_snr(speech: &AudioClip, noise: &AudioClip, snr_db: f64, seed: u64) -> Result<NoisyMix> {
    if noise.num_channels() != speech.num_channels() && noise.num_channels() != 1 {
        return Err(Error::InvalidClip(format!(
            "noise has {} channels, speech has {}",
            noise.num_channels(),
            speech.num_channels()
        )));
    }
    if noise.sample_rate() != speech.sample_rate() {
        return Err(Error::InvalidClip("speech and noise sample rates differ".into()));
    }
    let speech_level = level::measure(speech.channel(0), speech.sample_rate())?.active_level;
    let len = speech.len();
    let offset = if noise.len() > len {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..=noise.len() - len)
    } else {
        0
    };
    let segment: Vec<Vec<f64>> = (0..speech.num_channels())
        .map(|c| {
            let src = noise.channel(c.min(noise.num_channels() - 1));
            (0..len).map(|i| src[(offset + i) % src.len()]).collect()
        })
        .collect();
    let power: f64 = segment.iter().flatten().map(|x| x * x).sum::<f64>() / (len * segment.len()) as f64;
    if power == 0.0 {
        return Err(Error::NoActivity);
    }
    let noise_level = 10.0 * power.log10();
    let noise_gain = 10f64.powf((speech_level - snr_db - noise_level) / 20.0);
    let channels = speech
        .channels()
        .iter()
        .zip(&segment)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + noise_gain * b).collect())
        .collect();
    Ok(NoisyMix {
        clip: AudioClip::new(channels, speech.sample_rate())?,
        noise_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrival_kernel_matches_direct_sinc() {
        let h = ARRIVAL_HALF_WIDTH;
        let half_span = h as f64 + 0.5;
        for delay in [20.0, 20.25, 20.5, 20.49, 19.51, 20.999, 21.0 - 1e-9] {
            let mut out = vec![0.0; 40];
            add_arrival(&mut out, delay, 1.0);
            let center = delay.round() as i64;
            let taps: Vec<f64> = (center - h..=center + h)
                .map(|n| {
                    let t = n as f64 - delay;
                    let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
                    0.5 * (1.0 + (PI * t / half_span).cos()) * sinc
                })
                .collect();
            let sum: f64 = taps.iter().sum();
            for (n, tap) in (center - h..=center + h).zip(&taps) {
                assert!((out[n as usize] - tap / sum).abs() < 1e-13, "delay {delay} tap {n}");
            }
        }
    }

    fn exp_rt_mean(tau: f64) -> f64 {
        (0..10)
            .map(|seed| {
                let rir = synth_exponential_rir(tau, 16000, 10.0 * tau, seed).unwrap();
                schroeder_rt60(&rir).unwrap()
            })
            .sum::<f64>()
            / 10.0
    }

    #[test]
    fn exponential_decay_rt60() {
        let rt = exp_rt_mean(0.1);
        assert!((rt / 0.6908 - 1.0).abs() < 0.10, "rt {rt}");
    }

    #[test]
    fn exponential_decay_slope() {
        let rir = synth_exponential_rir(0.1, 16000, 1.0, 3).unwrap();
        // Energy in 50 ms blocks, fit slope in dB/s.
        let block = 800;
        let pts: Vec<(f64, f64)> = rir
            .samples
            .chunks(block)
            .take(12)
            .enumerate()
            .map(|(i, c)| {
                let e: f64 = c.iter().map(|s| s * s).sum();
                ((i as f64 + 0.5) * 0.05, 10.0 * e.log10())
            })
            .collect();
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let md = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mt) * (p.1 - md)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
        assert!((slope + 86.86).abs() < 4.0, "slope {slope}");
    }

    #[test]
    fn exponential_determinism_and_flat_limit() {
        let a = synth_exponential_rir(0.2, 16000, 0.5, 9).unwrap();
        let b = synth_exponential_rir(0.2, 16000, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let flat = synth_exponential_rir(1e6, 16000, 0.1, 1).unwrap();
        let first = flat.samples[0].abs() / flat.samples[0].abs().max(1e-300);
        assert_eq!(first, 1.0);
        let env = |n: usize| (-(n as f64) / (1e6 * 16000.0)).exp();
        assert!(env(1599) > 0.999_999);
        assert!(matches!(
            schroeder_rt60(&flat),
            Err(Error::InsufficientDecay { .. })
        ));
    }

    #[test]
    fn impulse_is_degenerate_decay() {
        let mut h = vec![0.0; 1000];
        h[10] = 1.0;
        let rir = Rir::new(h, 16000, RirMeta::External { source: "delta".into() }).unwrap();
        assert!(matches!(schroeder_rt60(&rir), Err(Error::DegenerateDecay { .. })));
        assert_eq!(drr(&rir).unwrap(), Drr::DirectOnly);
    }

    #[test]
    fn time_dilation_doubles_rt60() {
        let rir = synth_exponential_rir(0.08, 16000, 0.8, 4).unwrap();
        let base = schroeder_rt60(&rir).unwrap();
        let stretched = resample(&rir.to_clip(), 32000).into_channels().remove(0);
        let dilated = Rir::new(stretched, 16000, rir.meta.clone()).unwrap();
        let rt = schroeder_rt60(&dilated).unwrap();
        assert!((rt / (2.0 * base) - 1.0).abs() < 0.05, "{base} -> {rt}");
    }

    #[test]
    fn two_impulse_drr() {
        let mut h = vec![0.0; 16000];
        h[100] = 1.0;
        h[100 + 800] = 0.5;
        let rir = Rir::new(h, 16000, RirMeta::External { source: "t".into() }).unwrap();
        let Drr::Db(v) = drr(&rir).unwrap() else { panic!() };
        assert!((v - 6.0206).abs() < 0.01);
        let doubled = Rir::new(rir.samples.iter().map(|s| 2.0 * s).collect(), 16000, rir.meta.clone())
            .unwrap();
        assert_eq!(drr(&doubled).unwrap(), Drr::Db(v));
    }

    #[test]
    fn stats_invariant_to_scaling() {
        let rir = synth_exponential_rir(0.07, 16000, 0.7, 11).unwrap();
        let scale = |g: f64| Rir::new(rir.samples.iter().map(|s| g * s).collect(), 16000, rir.meta.clone()).unwrap();
        let a = rir_stats(&rir).unwrap();
        let b = rir_stats(&scale(3.5)).unwrap();
        assert!((a.rt60 / b.rt60 - 1.0).abs() < 1e-3);
        assert!((a.drr.db().unwrap() - b.drr.db().unwrap()).abs() < 1e-12);
        assert_eq!(a.drr, rir_stats(&scale(2.0)).unwrap().drr);
    }

    #[test]
    fn anechoic_image_arrival() {
        let src = [2.0, 2.0, 1.5];
        let mic = [3.7, 2.0, 1.5];
        let rir = image_rir([6.0, 5.0, 3.0], src, mic, [0.0; 6], 16000, 0.1).unwrap();
        let h = &rir.samples;
        let peak = (0..h.len()).max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs())).unwrap();
        assert_eq!(peak, 79);
        let delay: f64 = 1.7 / 343.0 * 16000.0;
        assert!((delay - 79.3).abs() < 0.05);
        let amp: f64 = h.iter().sum();
        assert!((amp - 1.0 / (4.0 * PI * 1.7)).abs() < 1e-12, "amp {amp}");
        assert!((amp - 0.0468).abs() < 1e-4);
        // Centroid of the arrival sits at the fractional delay.
        let centroid: f64 = h.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / amp;
        assert!((centroid - delay).abs() < 0.05, "centroid {centroid}");
        let outside: f64 = h.iter().enumerate().filter(|(i, _)| (*i as i64 - 79).abs() > 5).map(|(_, v)| v.abs()).sum();
        assert_eq!(outside, 0.0);
    }

    fn cube_rt60() -> f64 {
        let rir = image_rir([5.0; 3], [1.3, 2.1, 1.7], [3.6, 3.2, 2.4], [0.9; 6], 16000, 1.0).unwrap();
        schroeder_rt60(&rir).unwrap()
    }

    /// Pure specular images in a cube decay more slowly than Eyring predicts:
    /// late energy is dominated by near-axial images, which reflect once per
    /// room length travelled rather than 1.5 times on average. The decay rate
    /// is therefore bounded between the Eyring rate and two thirds of it.
    #[test]
    fn cube_room_decay_between_eyring_and_axial_bound() {
        let eyring = eyring_rt60([5.0; 3], 0.9);
        assert!((eyring - 0.637).abs() < 0.002);
        let rt = cube_rt60();
        assert!(rt > eyring && rt < 1.5 * eyring, "rt {rt} vs eyring {eyring}");
    }

    #[test]
    #[ignore = "image-method cube decays ~40% slower than Eyring; see cube_room_decay_between_eyring_and_axial_bound"]
    fn cube_room_within_25_percent_of_eyring() {
        let rt = cube_rt60();
        assert!((rt / eyring_rt60([5.0; 3], 0.9) - 1.0).abs() < 0.25, "rt {rt}");
    }

    #[test]
    fn image_reciprocity() {
        let room = [4.0, 5.5, 3.1];
        let (a, b) = ([1.0, 1.2, 1.1], [3.1, 4.0, 2.2]);
        let beta = [0.8; 6];
        let e1 = image_rir(room, a, b, beta, 16000, 0.3).unwrap().energy();
        let e2 = image_rir(room, b, a, beta, 16000, 0.3).unwrap().energy();
        assert!((e1 / e2 - 1.0).abs() < 0.01);
    }

    #[test]
    fn image_energy_monotone_in_beta() {
        let room = [4.0, 5.0, 3.0];
        let energies: Vec<f64> = [0.5, 0.7, 0.9]
            .iter()
            .map(|&b| image_rir(room, [1.0, 1.0, 1.0], [3.0, 3.5, 2.0], [b; 6], 16000, 0.3).unwrap().energy())
            .collect();
        assert!(energies.windows(2).all(|w| w[0] < w[1]), "{energies:?}");
    }

    #[test]
    fn image_geometry_errors() {
        let room = [4.0, 5.0, 3.0];
        let p = [1.0, 1.0, 1.0];
        assert!(image_rir(room, p, p, [0.5; 6], 16000, 0.2).is_err());
        assert!(image_rir(room, [5.0, 1.0, 1.0], [2.0, 2.0, 2.0], [0.5; 6], 16000, 0.2).is_err());
        assert!(image_rir(room, p, [2.0, 2.0, 2.0], [1.0; 6], 16000, 0.2).is_err());
        assert!(image_rir(room, p, [2.0, 2.0, 2.0], [0.5; 6], 16000, 0.05).is_err());
    }

    fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, a) in x.iter().enumerate() {
            for (j, b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        y
    }

    #[test]
    fn convolution_identities_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..700).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::mono(x.clone(), 16000).unwrap();
        let delta = Rir::new(vec![1.0], 16000, RirMeta::External { source: "d".into() }).unwrap();
        let y = convolve(&clip, &delta);
        for (a, b) in y.channel(0).iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut h = vec![0.0; 11];
        h[10] = 0.5;
        let shifted = Rir::new(h, 16000, RirMeta::External { source: "s".into() }).unwrap();
        let y = convolve(&clip, &shifted);
        assert_eq!(y.len(), 710);
        for i in 0..700 {
            assert!((y.channel(0)[i + 10] - 0.5 * x[i]).abs() < 1e-12);
        }
        let k: Vec<f64> = (0..123).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = fft_convolve(&x, &k);
        let slow = direct_convolve(&x, &k);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    fn unit_sine(len: usize, freq: f64) -> Vec<f64> {
        (0..len).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn snr_mixing() {
        let speech = AudioClip::mono(unit_sine(32000, 440.0), 16000).unwrap();
        let noise = AudioClip::mono(unit_sine(48000, 1234.0), 16000).unwrap();
        let mix = mix_noise_at_snr(&speech, &noise, 0.0, 1).unwrap();
        assert!((mix.noise_gain - 1.0).abs() < 0.01, "gain {}", mix.noise_gain);

        let white = generate_noise(NoiseType::White, 40000, 1, 16000, 2);
        let clean = mix_noise_at_snr(&speech, &white, 100.0, 3).unwrap();
        let diff: f64 = clean.clip.channel(0).iter().zip(speech.channel(0)).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = speech.channel(0).iter().map(|v| v * v).sum();
        assert!((diff / norm).sqrt() < 1e-4);

        for snr in [0.0, 10.0, 20.0] {
            let m = mix_noise_at_snr(&speech, &white, snr, 7).unwrap();
            let added: Vec<f64> = m.clip.channel(0).iter().zip(speech.channel(0)).map(|(a, b)| a - b).collect();
            let nl = 10.0 * (added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64).log10();
            let sl = level::measure(speech.channel(0), 16000).unwrap().active_level;
            assert!((sl - nl - snr).abs() < 0.1);
        }
    }

    #[test]
    fn mixing_errors() {
        let speech = AudioClip::mono(unit_sine(16000, 440.0), 16000).unwrap();
        let silent = AudioClip::mono(vec![0.0; 16000], 16000).unwrap();
        assert!(mix_noise_at_snr(&speech, &silent, 10.0, 0).is_err());
        assert!(mix_noise_at_snr(&silent, &speech, 10.0, 0).is_err());
    }

    #[test]
    fn noise_channels_are_independent() {
        let n = generate_noise(NoiseType::SpeechShaped, 8000, 2, 16000, 1);
        let dot: f64 = n.channel(0).iter().zip(n.channel(1)).map(|(a, b)| a * b).sum();
        let e: f64 = n.channel(0).iter().map(|v| v * v).sum();
        assert!(dot.abs() < 0.1 * e);
        assert_eq!(n, generate_noise(NoiseType::SpeechShaped, 8000, 2, 16000, 1));
    }
}
