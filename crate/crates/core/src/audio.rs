//! Multi-channel audio clips, WAV decoding and band-limited resampling.

use std::path::Path;

use crate::error::{Error, Result};

/// Rate every analysis stage runs at. Inputs are resampled to it on load.
pub const PIPELINE_RATE: u32 = 16_000;

const MAX_CHANNELS: usize = 32;

/// Multi-channel sampled audio. Channels are kept as separate sequences of
/// equal length; nothing is ever downmixed implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidClip("sample rate must be positive".into()));
        }
        let Some(first) = channels.first() else {
            return Err(Error::InvalidClip("clip has no channels".into()));
        };
        let len = first.len();
        if len == 0 {
            return Err(Error::InvalidClip("clip has no samples".into()));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidClip("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::InvalidClip("non-finite sample".into()));
        }
        Ok(AudioClip {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    /// Always false; a valid clip holds at least one sample per channel.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Single-channel clip holding a copy of channel `index`.
    pub fn select_channel(&self, index: usize) -> AudioClip {
        AudioClip {
            channels: vec![self.channels[index].clone()],
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|s| s * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Decodes a RIFF/WAVE file. Integer PCM is divided by its full-scale value
/// (2^(bits-1)), float samples pass through unchanged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => other.into(),
    })?;
    decode(reader)
}

fn decode<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<AudioClip> {
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 || n_ch > MAX_CHANNELS {
        return Err(Error::UnsupportedFormat(format!("{n_ch} channels")));
    }
    if reader.len() == 0 {
        return Err(Error::EmptyAudio);
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let full_scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.len() % n_ch != 0 {
        return Err(Error::UnsupportedFormat("partial trailing frame".into()));
    }
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    AudioClip::new(channels, spec.sample_rate)
}

/// Sample encodings supported by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Writes a clip as little-endian WAV. 16-bit output is rounded and clamped,
/// so 16-bit data read by [`read_wav`] round-trips bit-exactly.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => other.into(),
    })?;
    for i in 0..clip.len() {
        for ch in clip.channels() {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavEncoding::Float32 => writer.write_sample(ch[i] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a WAV file and resamples it to [`PIPELINE_RATE`].
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    Ok(resample(&clip, PIPELINE_RATE))
}

const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
const CUTOFF_FRACTION: f64 = 0.45;

/// Polyphase windowed-sinc resampler for a fixed rational rate ratio.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: u64,
    down: u64,
    /// `up` phases of `TAPS` coefficients each, row-major.
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Self {
        assert!(source_rate > 0 && target_rate > 0, "rates must be positive");
        let g = gcd(source_rate as u64, target_rate as u64);
        let up = target_rate as u64 / g;
        let down = source_rate as u64 / g;
        // Cutoff in cycles per input sample.
        let fc = CUTOFF_FRACTION * source_rate.min(target_rate) as f64 / source_rate as f64;
        let half = (TAPS / 2) as f64;
        let i0_beta = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up as usize * TAPS];
        for phase in 0..up as usize {
            let frac = phase as f64 / up as f64;
            let row = &mut table[phase * TAPS..(phase + 1) * TAPS];
            for (t, coeff) in row.iter_mut().enumerate() {
                // Input offset k runs over -(half-1)..=half; d = t_out - n.
                let k = t as f64 - (half - 1.0);
                let d = frac - k;
                let u = d / half;
                let window = if u.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
                };
                *coeff = 2.0 * fc * sinc(2.0 * fc * d) * window;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c /= sum);
        }
        Resampler { up, down, table }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let n = input_len as u64;
        ((n * self.up + self.down / 2) / self.down) as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let out_len = self.output_len(input.len());
        let n = input.len() as i64;
        let offset = TAPS as i64 / 2 - 1;
        (0..out_len as u64)
            .map(|i| {
                let pos = i * self.down;
                let base = (pos / self.up) as i64;
                let phase = (pos % self.up) as usize;
                let row = &self.table[phase * TAPS..(phase + 1) * TAPS];
                let start = base - offset;
                let mut acc = 0.0;
                for (t, c) in row.iter().enumerate() {
                    let idx = start + t as i64;
                    if (0..n).contains(&idx) {
                        acc += c * input[idx as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resamples every channel to `target_rate`. Identity when the rates match.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if clip.sample_rate() == target_rate {
        return clip.clone();
    }
    let resampler = Resampler::new(clip.sample_rate(), target_rate);
    let channels = clip.channels().iter().map(|c| resampler.process(c)).collect();
    AudioClip {
        channels,
        sample_rate: target_rate,
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
