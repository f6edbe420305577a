//! Fourth-order gammatone filterbank with ERB-rate spaced center frequencies.
//!
//! Each channel is realized as a complex one-pole cascade around its center
//! frequency: the input is shifted down by `cf`, low-passed by four identical
//! one-pole sections with pole `exp(-2*pi*b/fs)`, and shifted back up. The
//! resulting impulse response is `C(n+3, 3) a^n cos(2*pi*cf*n/fs)`, the
//! sampled form of `t^3 exp(-2*pi*b*t) cos(2*pi*cf*t)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const ORDER: i32 = 4;
const BANDWIDTH_FACTOR: f64 = 1.019;

/// Equivalent rectangular bandwidth in Hz (Glasberg and Moore).
pub fn erb(freq_hz: f64) -> f64 {
    24.7 * (4.37 * freq_hz / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `freq_hz`).
pub fn erb_rate(freq_hz: f64) -> f64 {
    21.4 * (4.37 * freq_hz / 1000.0 + 1.0).log10()
}

pub fn erb_rate_to_hz(rate: f64) -> f64 {
    (10f64.powf(rate / 21.4) - 1.0) * 1000.0 / 4.37
}

/// `count` frequencies equally spaced on the ERB-rate scale, endpoints included.
pub fn erb_space(low_hz: f64, high_hz: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![low_hz];
    }
    let lo = erb_rate(low_hz);
    let hi = erb_rate(high_hz);
    (0..count)
        .map(|i| {
            if i == 0 {
                low_hz
            } else if i == count - 1 {
                high_hz
            } else {
                erb_rate_to_hz(lo + (hi - lo) * i as f64 / (count - 1) as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammatoneChannel {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Pole radius of each of the four one-pole sections.
    pub pole: f64,
    sample_rate: f64,
}

impl GammatoneChannel {
    pub fn new(center_hz: f64, sample_rate: f64) -> Self {
        let bandwidth_hz = BANDWIDTH_FACTOR * erb(center_hz);
        GammatoneChannel {
            center_hz,
            bandwidth_hz,
            pole: (-2.0 * PI * bandwidth_hz / sample_rate).exp(),
            sample_rate,
        }
    }

    /// Filters `input`, unit gain at the center frequency.
    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let a = self.pole;
        let b = 1.0 - a;
        let omega = 2.0 * PI * self.center_hz / self.sample_rate;
        // Demodulating by e^{-j omega n}, low-passing and remodulating equals
        // running the cascade with its pole rotated to e^{j omega}.
        let (pr, pi) = (a * omega.cos(), a * omega.sin());
        let mut re = [0.0; ORDER as usize];
        let mut im = [0.0; ORDER as usize];
        input
            .iter()
            .map(|&x| {
                let (mut ur, mut ui) = (x, 0.0);
                for stage in 0..ORDER as usize {
                    let (r, i) = (re[stage], im[stage]);
                    re[stage] = pr * r - pi * i + b * ur;
                    im[stage] = pr * i + pi * r + b * ui;
                    ur = re[stage];
                    ui = im[stage];
                }
                2.0 * ur
            })
            .collect()
    }

    /// Magnitude of the transfer function at `freq_hz`.
    pub fn magnitude_response(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        let w0 = 2.0 * PI * self.center_hz / self.sample_rate;
        let lowpass = |theta: f64| {
            // ((1-a) / (1 - a e^{-j theta}))^4
            let (dr, di) = (1.0 - self.pole * theta.cos(), self.pole * theta.sin());
            let mag = (1.0 - self.pole) / (dr * dr + di * di).sqrt();
            let arg = -di.atan2(dr);
            let m4 = mag.powi(ORDER);
            let a4 = arg * ORDER as f64;
            (m4 * a4.cos(), m4 * a4.sin())
        };
        let (r1, i1) = lowpass(w - w0);
        let (r2, i2) = lowpass(-w - w0);
        // L(w - w0) + conj(L(-w - w0))
        let (re, im) = (r1 + r2, i1 - i2);
        (re * re + im * im).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammatoneBank {
    pub channels: Vec<GammatoneChannel>,
}

impl GammatoneBank {
    pub fn new(num_bands: usize, cf_min: f64, cf_max: f64, sample_rate: f64) -> Result<Self> {
        if cf_max >= sample_rate / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "highest center frequency {cf_max} Hz is not below Nyquist {} Hz",
                sample_rate / 2.0
            )));
        }
        if !(cf_min > 0.0 && cf_min < cf_max) || num_bands == 0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 < cf_min < cf_max and at least one band, got {cf_min}..{cf_max} x{num_bands}"
            )));
        }
        let channels = erb_space(cf_min, cf_max, num_bands)
            .into_iter()
            .map(|cf| GammatoneChannel::new(cf, sample_rate))
            .collect();
        Ok(GammatoneBank { channels })
    }

    pub fn center_frequencies(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.center_hz).collect()
    }
}
