//! Modulation-spectral analysis: gammatone filterbank, Hilbert envelopes,
//! framed DFTs of the envelopes and grouping into modulation bands. The
//! result is the energy tensor indexed by (acoustic band, modulation band,
//! frame).

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioClip, PIPELINE_RATE};
use crate::error::{Error, Result};
use crate::gammatone::GammatoneBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// 4-128 Hz modulation range, every frame counts.
    Original,
    /// 4-40 Hz modulation range with low-energy frames discarded.
    Normalized,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Original => "original",
            Mode::Normalized => "normalized",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub num_acoustic_bands: usize,
    pub cf_min: f64,
    pub cf_max: f64,
    /// Seconds.
    pub frame_len: f64,
    /// Seconds.
    pub frame_hop: f64,
    pub num_mod_bands: usize,
    /// Lower and upper modulation frequency, Hz.
    pub mod_range: (f64, f64),
    /// Frames this far (dB) below the loudest frame are inactive. `None` keeps every frame.
    pub energy_floor_db: Option<f64>,
    pub envelope_rate: f64,
    pub dft_size: usize,
    /// Subtract each frame's window-weighted mean before the DFT so the
    /// envelope's DC term does not leak into the lowest modulation bands.
    pub remove_frame_mean: bool,
}

impl PipelineConfig {
    pub fn original() -> Self {
        PipelineConfig {
            mode: Mode::Original,
            num_acoustic_bands: 23,
            cf_min: 125.0,
            cf_max: 6400.0,
            frame_len: 0.256,
            frame_hop: 0.032,
            num_mod_bands: 8,
            mod_range: (4.0, 128.0),
            energy_floor_db: None,
            envelope_rate: 500.0,
            dft_size: 1024,
            remove_frame_mean: true,
        }
    }

    pub fn normalized() -> Self {
        PipelineConfig {
            mode: Mode::Normalized,
            mod_range: (4.0, 40.0),
            energy_floor_db: Some(30.0),
            ..Self::original()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Original => Self::original(),
            Mode::Normalized => Self::normalized(),
        }
    }

    pub fn frame_samples(&self) -> usize {
        (self.frame_len * self.envelope_rate).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.frame_hop * self.envelope_rate).round() as usize
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.cf_min > 0.0 && self.cf_min < self.cf_max && self.cf_max < sample_rate / 2.0) {
            return bad(format!(
                "need 0 < cf_min < cf_max < {} Hz, got {}..{}",
                sample_rate / 2.0,
                self.cf_min,
                self.cf_max
            ));
        }
        if !(self.frame_hop > 0.0 && self.frame_hop <= self.frame_len) {
            return bad("need 0 < frame_hop <= frame_len".into());
        }
        let (lo, hi) = self.mod_range;
        if !(lo > 0.0 && lo < hi && hi < self.envelope_rate / 2.0) {
            return bad(format!(
                "modulation range {lo}..{hi} Hz must lie below half the envelope rate"
            ));
        }
        let factor = sample_rate / self.envelope_rate;
        if factor.fract() != 0.0 || factor < 1.0 {
            return bad(format!(
                "envelope rate {} must divide the sample rate {sample_rate}",
                self.envelope_rate
            ));
        }
        if self.num_acoustic_bands == 0 || self.num_mod_bands < 2 {
            return bad("need at least one acoustic band and two modulation bands".into());
        }
        if self.dft_size < self.frame_samples() || self.hop_samples() == 0 {
            return bad("dft_size must cover one frame and the hop must be non-empty".into());
        }
        if let Some(floor) = self.energy_floor_db {
            if !(floor > 0.0) {
                return bad("energy floor must be positive".into());
            }
        }
        for (b, (start, end)) in self.band_bins().into_iter().enumerate() {
            if start >= end {
                return bad(format!("modulation band {} contains no DFT bins", b + 1));
            }
        }
        Ok(())
    }

    /// Log-spaced modulation band center frequencies over `mod_range`.
    pub fn mod_band_centers(&self) -> Vec<f64> {
        let (lo, hi) = self.mod_range;
        let k = self.num_mod_bands;
        (0..k)
            .map(|b| match b {
                0 => lo,
                b if b == k - 1 => hi,
                b => lo * (hi / lo).powf(b as f64 / (k - 1) as f64),
            })
            .collect()
    }

    /// Band edges: geometric midpoints between neighbouring centers, with the
    /// range limits as outer edges. `num_mod_bands + 1` values.
    pub fn mod_band_edges(&self) -> Vec<f64> {
        let cf = self.mod_band_centers();
        let mut edges = Vec::with_capacity(cf.len() + 1);
        edges.push(self.mod_range.0);
        edges.extend(cf.windows(2).map(|w| (w[0] * w[1]).sqrt()));
        edges.push(self.mod_range.1);
        edges
    }

    /// Half-open DFT bin ranges `[start, end)` collected by each modulation band.
    pub fn band_bins(&self) -> Vec<(usize, usize)> {
        let resolution = self.envelope_rate / self.dft_size as f64;
        let first_bin_at = |f: f64| (f / resolution).ceil() as usize;
        let edges = self.mod_band_edges();
        edges
            .windows(2)
            .map(|w| (first_bin_at(w[0]), first_bin_at(w[1])))
            .collect()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::normalized()
    }
}

/// Modulation energies for `J` acoustic bands, `K` modulation bands and `M`
/// frames, plus the active-frame mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationTensor {
    num_acoustic: usize,
    num_mod: usize,
    num_frames: usize,
    /// Index `(j * M + m) * K + k`.
    energies: Vec<f64>,
    active: Vec<bool>,
    config: PipelineConfig,
}

impl ModulationTensor {
    /// Builds a tensor from `f(j, k, m)` with every frame active. Indices are zero-based.
    pub fn from_fn(
        num_acoustic: usize,
        num_mod: usize,
        num_frames: usize,
        config: PipelineConfig,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut energies = Vec::with_capacity(num_acoustic * num_mod * num_frames);
        for j in 0..num_acoustic {
            for m in 0..num_frames {
                for k in 0..num_mod {
                    energies.push(f(j, k, m));
                }
            }
        }
        Self::from_parts(num_acoustic, num_mod, num_frames, energies, vec![true; num_frames], config)
    }

    pub fn from_parts(
        num_acoustic: usize,
        num_mod: usize,
        num_frames: usize,
        energies: Vec<f64>,
        active: Vec<bool>,
        config: PipelineConfig,
    ) -> Result<Self> {
        if num_acoustic == 0 || num_mod == 0 || num_frames == 0 {
            return Err(Error::DegenerateTensor("tensor has an empty dimension".into()));
        }
        if energies.len() != num_acoustic * num_mod * num_frames || active.len() != num_frames {
            return Err(Error::DegenerateTensor("tensor storage does not match its dimensions".into()));
        }
        if energies.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::DegenerateTensor("energies must be finite and non-negative".into()));
        }
        Ok(ModulationTensor {
            num_acoustic,
            num_mod,
            num_frames,
            energies,
            active,
            config,
        })
    }

    pub fn num_acoustic_bands(&self) -> usize {
        self.num_acoustic
    }

    pub fn num_mod_bands(&self) -> usize {
        self.num_mod
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Energy for zero-based acoustic band `j`, modulation band `k`, frame `m`.
    pub fn energy(&self, j: usize, k: usize, m: usize) -> f64 {
        self.energies[(j * self.num_frames + m) * self.num_mod + k]
    }

    /// All modulation-band energies of one (acoustic band, frame) cell.
    pub fn cell(&self, j: usize, m: usize) -> &[f64] {
        let start = (j * self.num_frames + m) * self.num_mod;
        &self.energies[start..start + self.num_mod]
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn active_frames(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, m: usize) -> bool {
        self.active[m]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn with_mask(mut self, active: Vec<bool>) -> Result<Self> {
        if active.len() != self.num_frames {
            return Err(Error::DegenerateTensor("mask length differs from frame count".into()));
        }
        self.active = active;
        Ok(self)
    }

    /// Per-frame total energy over all acoustic and modulation bands.
    pub fn frame_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.num_frames];
        for j in 0..self.num_acoustic {
            for (m, total) in totals.iter_mut().enumerate() {
                *total += self.cell(j, m).iter().sum::<f64>();
            }
        }
        totals
    }

    /// Writes `frame,acoustic_band,mod_band,energy,active` rows; band indices are 1-based.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "frame,acoustic_band,mod_band,energy,active")?;
        for m in 0..self.num_frames {
            for j in 0..self.num_acoustic {
                for k in 0..self.num_mod {
                    writeln!(
                        out,
                        "{m},{},{},{:e},{}",
                        j + 1,
                        k + 1,
                        self.energy(j, k, m),
                        self.active[m]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Gammatone bank for the configured band layout.
pub fn design_gammatone_bank(config: &PipelineConfig, sample_rate: f64) -> Result<GammatoneBank> {
    GammatoneBank::new(config.num_acoustic_bands, config.cf_min, config.cf_max, sample_rate)
}

/// Shared FFT plans for one analysis run.
struct Plans {
    hilbert_fwd: Arc<dyn Fft<f64>>,
    hilbert_inv: Arc<dyn Fft<f64>>,
    modulation: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(signal_len: usize, dft_size: usize) -> Self {
        let mut planner = FftPlanner::new();
        let n = signal_len.next_power_of_two();
        Plans {
            hilbert_fwd: planner.plan_fft_forward(n),
            hilbert_inv: planner.plan_fft_inverse(n),
            modulation: planner.plan_fft_forward(dft_size),
        }
    }
}

fn analytic_magnitude(signal: &[f64], fwd: &dyn Fft<f64>, inv: &dyn Fft<f64>) -> Vec<f64> {
    let n = fwd.len();
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fwd.process(&mut buf);
    // One-sided spectrum: keep DC and Nyquist, double positive frequencies.
    for (i, v) in buf.iter_mut().enumerate() {
        if i == 0 || (n % 2 == 0 && i == n / 2) {
            continue;
        } else if i < n.div_ceil(2) {
            *v *= 2.0;
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf[..signal.len()].iter().map(|v| v.norm() * scale).collect()
}

/// Kaiser-windowed sinc low-pass used before envelope decimation.
fn decimation_filter(factor: usize, cutoff_fraction_of_output: f64) -> Vec<f64> {
    let half = 4 * factor;
    let fc = cutoff_fraction_of_output / factor as f64;
    let beta = 8.0;
    let i0b = crate::audio::bessel_i0(beta);
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let d = i as f64 - half as f64;
            let u = d / half as f64;
            let w = crate::audio::bessel_i0(beta * (1.0 - u * u).max(0.0).sqrt()) / i0b;
            let x = 2.0 * fc * d;
            let sinc = if d == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            2.0 * fc * sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn decimate(signal: &[f64], factor: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let n = signal.len() as isize;
    (0..signal.len().div_ceil(factor))
        .map(|i| {
            let center = (i * factor) as isize;
            let lo = (center - half).max(0);
            let hi = (center + half).min(n - 1);
            (lo..=hi)
                .map(|idx| taps[(idx - center + half) as usize] * signal[idx as usize])
                .sum()
        })
        .collect()
}

/// Hilbert envelope of one band signal, low-passed at 0.4 of `envelope_rate`
/// and decimated to that rate.
pub fn temporal_envelope(signal: &[f64], sample_rate: f64, envelope_rate: f64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::InvalidClip("empty band signal".into()));
    }
    let factor = sample_rate / envelope_rate;
    if factor.fract() != 0.0 || factor < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "envelope rate {envelope_rate} must divide the sample rate {sample_rate}"
        )));
    }
    let mut planner = FftPlanner::new();
    let n = signal.len().next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let magnitude = analytic_magnitude(signal, fwd.as_ref(), inv.as_ref());
    let factor = factor as usize;
    Ok(decimate(&magnitude, factor, &decimation_filter(factor, 0.4)))
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

fn frame_count(len: usize, frame: usize, hop: usize) -> Result<usize> {
    if len < frame {
        return Err(Error::UtteranceTooShort { len, frame });
    }
    Ok((len - frame) / hop + 1)
}

fn frame_spectra_with(
    envelope: &[f64],
    config: &PipelineConfig,
    fft: &dyn Fft<f64>,
) -> Result<Vec<Vec<f64>>> {
    let frame = config.frame_samples();
    let hop = config.hop_samples();
    let m = frame_count(envelope.len(), frame, hop)?;
    let window = hamming(frame);
    let wsum: f64 = window.iter().sum();
    let bins = config.dft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); config.dft_size];
    Ok((0..m)
        .map(|i| {
            let seg = &envelope[i * hop..i * hop + frame];
            let mean = if config.remove_frame_mean {
                seg.iter().zip(&window).map(|(x, w)| x * w).sum::<f64>() / wsum
            } else {
                0.0
            };
            for (b, slot) in buf.iter_mut().enumerate() {
                *slot = if b < frame {
                    Complex::new((seg[b] - mean) * window[b], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            buf[..bins].iter().map(|v| v.norm_sqr()).collect()
        })
        .collect())
}

/// Hamming-windowed, zero-padded DFT of each envelope frame. Returns the
/// squared magnitude of bins `0..=dft_size/2` for every frame.
pub fn frame_and_dft(envelope: &[f64], config: &PipelineConfig) -> Result<Vec<Vec<f64>>> {
    let fft = FftPlanner::new().plan_fft_forward(config.dft_size);
    frame_spectra_with(envelope, config, fft.as_ref())
}

/// Sums squared magnitudes into the modulation bands of `config`.
pub fn group_bins(spectrum: &[f64], bands: &[(usize, usize)]) -> Vec<f64> {
    bands
        .iter()
        .map(|&(start, end)| {
            assert!(start < end, "modulation band without DFT bins");
            spectrum[start..end.min(spectrum.len())].iter().sum()
        })
        .collect()
}

/// Groups per-channel, per-frame spectra (`spectra[j][m]`) into an unmasked tensor.
pub fn group_modulation_bands(
    spectra: &[Vec<Vec<f64>>],
    config: &PipelineConfig,
) -> Result<ModulationTensor> {
    let bands = config.band_bins();
    let num_frames = spectra.first().map_or(0, Vec::len);
    if spectra.iter().any(|s| s.len() != num_frames) {
        return Err(Error::DegenerateTensor("channels differ in frame count".into()));
    }
    let energies = spectra
        .iter()
        .flat_map(|frames| frames.iter().flat_map(|spec| group_bins(spec, &bands)))
        .collect();
    ModulationTensor::from_parts(
        spectra.len(),
        bands.len(),
        num_frames,
        energies,
        vec![true; num_frames],
        config.clone(),
    )
}

/// Marks frames whose total energy lies more than `floor_db` below the loudest
/// frame as inactive. The loudest frame always stays active.
pub fn apply_energy_floor(tensor: ModulationTensor, floor_db: f64) -> Result<ModulationTensor> {
    let totals = tensor.frame_totals();
    let peak = totals.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::DegenerateTensor("every frame is silent".into()));
    }
    let peak_db = 10.0 * peak.log10();
    let mask = totals
        .iter()
        .map(|&t| t > 0.0 && 10.0 * t.log10() >= peak_db - floor_db)
        .collect();
    tensor.with_mask(mask)
}

/// Full analysis of a single-channel clip: resample to the pipeline rate,
/// filter, take envelopes, frame, transform, group and (in normalized mode)
/// apply the energy floor.
pub fn analyze(clip: &AudioClip, config: &PipelineConfig) -> Result<ModulationTensor> {
    if clip.num_channels() != 1 {
        return Err(Error::InvalidClip(format!(
            "analysis needs a single channel, got {}",
            clip.num_channels()
        )));
    }
    let clip = resample(clip, PIPELINE_RATE);
    let fs = PIPELINE_RATE as f64;
    config.validate(fs)?;
    if clip.duration() < 0.3 {
        return Err(Error::InsufficientDuration(format!(
            "{:.3} s is below the 0.3 s analysis minimum",
            clip.duration()
        )));
    }
    let signal = clip.channel(0);
    if signal.iter().all(|x| *x == 0.0) {
        return Err(Error::SilentInput);
    }
    let bank = design_gammatone_bank(config, fs)?;
    let plans = Plans::new(signal.len(), config.dft_size);
    let factor = (fs / config.envelope_rate) as usize;
    let taps = decimation_filter(factor, 0.4);
    let spectra = bank
        .channels
        .par_iter()
        .map(|ch| {
            let band = ch.filter(signal);
            let mag = analytic_magnitude(&band, plans.hilbert_fwd.as_ref(), plans.hilbert_inv.as_ref());
            let env = decimate(&mag, factor, &taps);
            frame_spectra_with(&env, config, plans.modulation.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let tensor = group_modulation_bands(&spectra, config)?;
    if tensor.energies().iter().all(|e| *e == 0.0) {
        return Err(Error::SilentInput);
    }
    match config.energy_floor_db {
        Some(floor) => apply_energy_floor(tensor, floor),
        None => Ok(tensor),
    }
}
