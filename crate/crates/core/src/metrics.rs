//! SRMR-family metrics computed from a [`ModulationTensor`].
//!
//! Modulation band indices `k` are 1-based here (band 1 is the lowest).
//! Every sum over frames runs over the tensor's active frames only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modspec::{Mode, ModulationTensor};

/// Band used by the per-acoustic-band ratio unless told otherwise.
pub const DEFAULT_STAR_BAND: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `[SRMR_5, SRMR_6, SRMR_7, SRMR_8]`.
    SrmrK,
    Osrmr,
    Srmr,
    Nsrmr,
    Nosrmr,
    /// Per-acoustic-band, per-frame ratio of band 1 to band k.
    NsrmrStar,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SrmrK,
        Variant::Osrmr,
        Variant::Srmr,
        Variant::Nsrmr,
        Variant::Nosrmr,
        Variant::NsrmrStar,
    ];

    /// Analysis mode the variant's tensor must come from.
    pub fn mode(self) -> Mode {
        match self {
            Variant::SrmrK | Variant::Osrmr | Variant::Srmr => Mode::Original,
            Variant::Nsrmr | Variant::Nosrmr | Variant::NsrmrStar => Mode::Normalized,
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            Variant::SrmrK => 4,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SrmrK => "srmr-k",
            Variant::Osrmr => "osrmr",
            Variant::Srmr => "srmr",
            Variant::Nsrmr => "nsrmr",
            Variant::Nosrmr => "nosrmr",
            Variant::NsrmrStar => "nsrmr-star",
        }
    }

    /// The variant obtained by running this variant's formula in `mode`.
    pub fn in_mode(self, mode: Mode) -> Variant {
        use Variant::*;
        match (self, mode) {
            (Srmr | Nsrmr, Mode::Original) => Srmr,
            (Srmr | Nsrmr, Mode::Normalized) => Nsrmr,
            (Osrmr | Nosrmr, Mode::Original) => Osrmr,
            (Osrmr | Nosrmr, Mode::Normalized) => Nosrmr,
            (v, _) => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmrFeatures {
    pub variant: Variant,
    pub mode: Mode,
    pub k: Option<usize>,
    pub values: Vec<f64>,
}

impl SrmrFeatures {
    fn new(variant: Variant, mode: Mode, k: Option<usize>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::DegenerateTensor(format!(
                "{variant} produced non-positive or non-finite values {values:?}"
            )));
        }
        Ok(SrmrFeatures {
            variant,
            mode,
            k,
            values,
        })
    }

    pub fn same_kind(&self, other: &SrmrFeatures) -> bool {
        self.variant == other.variant
            && self.mode == other.mode
            && self.k == other.k
            && self.values.len() == other.values.len()
    }
}

/// Sum of band `k` (1-based) over every acoustic band and active frame.
fn band_sum(tensor: &ModulationTensor, k: usize) -> f64 {
    let mut sum = 0.0;
    for j in 0..tensor.num_acoustic_bands() {
        for m in (0..tensor.num_frames()).filter(|&m| tensor.is_active(m)) {
            sum += tensor.energy(j, k - 1, m);
        }
    }
    sum
}

fn check_bands(tensor: &ModulationTensor, needed: usize) -> Result<()> {
    if tensor.num_mod_bands() < needed {
        return Err(Error::DegenerateTensor(format!(
            "need {needed} modulation bands, tensor has {}",
            tensor.num_mod_bands()
        )));
    }
    if tensor.active_count() == 0 {
        return Err(Error::DegenerateTensor("no active frames".into()));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if den <= 0.0 {
        return Err(Error::DegenerateTensor("zero denominator energy".into()));
    }
    let r = num / den;
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::DegenerateTensor(format!("ratio {num}/{den} is not positive")));
    }
    Ok(r)
}

/// Band 1 energy over band `k` energy, `5 <= k <= 8`.
pub fn srmr_k(tensor: &ModulationTensor, k: usize) -> Result<f64> {
    if !(5..=8).contains(&k) {
        return Err(Error::InvalidConfig(format!("band index {k} outside 5..=8")));
    }
    check_bands(tensor, 8)?;
    ratio(band_sum(tensor, 1), band_sum(tensor, k))
}

pub fn srmr_k_vector(tensor: &ModulationTensor) -> Result<[f64; 4]> {
    Ok([
        srmr_k(tensor, 5)?,
        srmr_k(tensor, 6)?,
        srmr_k(tensor, 7)?,
        srmr_k(tensor, 8)?,
    ])
}

/// Band 1 energy over the summed energy of bands 5-8.
pub fn osrmr(tensor: &ModulationTensor) -> Result<f64> {
    check_bands(tensor, 8)?;
    let den: f64 = (5..=8).map(|k| band_sum(tensor, k)).sum();
    ratio(band_sum(tensor, 1), den)
}

/// Bands 1-4 energy over bands 5-8 energy.
pub fn srmr(tensor: &ModulationTensor) -> Result<f64> {
    check_bands(tensor, 8)?;
    let num: f64 = (1..=4).map(|k| band_sum(tensor, k)).sum();
    let den: f64 = (5..=8).map(|k| band_sum(tensor, k)).sum();
    ratio(num, den)
}

/// Per-cell ratio of band 1 to band `k`, summed over acoustic bands and
/// active frames and divided by the active frame count only.
///
/// Each denominator is floored at `1e-12` times the tensor's largest energy.
pub fn nsrmr_star(tensor: &ModulationTensor, k: usize) -> Result<f64> {
    if tensor.mode() != Mode::Normalized {
        return Err(Error::InvalidConfig(
            "the per-band ratio needs a normalized-mode tensor".into(),
        ));
    }
    if !(2..=tensor.num_mod_bands()).contains(&k) {
        return Err(Error::InvalidConfig(format!("band index {k} out of range")));
    }
    check_bands(tensor, k)?;
    let peak = tensor.energies().iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::DegenerateTensor("all-zero tensor".into()));
    }
    let floor = 1e-12 * peak;
    let mut sum = 0.0;
    for j in 0..tensor.num_acoustic_bands() {
        for m in (0..tensor.num_frames()).filter(|&m| tensor.is_active(m)) {
            let cell = tensor.cell(j, m);
            sum += cell[0] / cell[k - 1].max(floor);
        }
    }
    ratio(sum, tensor.active_count() as f64)
}

/// Computes `variant` from a tensor produced in the variant's mode.
pub fn compute(tensor: &ModulationTensor, variant: Variant) -> Result<SrmrFeatures> {
    let mode = tensor.mode();
    if variant.mode() != mode {
        return Err(Error::InvalidConfig(format!(
            "{variant} needs a {} tensor, got {mode}",
            variant.mode()
        )));
    }
    match variant {
        Variant::SrmrK => SrmrFeatures::new(variant, mode, None, srmr_k_vector(tensor)?.to_vec()),
        Variant::Osrmr | Variant::Nosrmr => {
            SrmrFeatures::new(variant, mode, None, vec![osrmr(tensor)?])
        }
        Variant::Srmr | Variant::Nsrmr => SrmrFeatures::new(variant, mode, None, vec![srmr(tensor)?]),
        Variant::NsrmrStar => SrmrFeatures::new(
            variant,
            mode,
            Some(DEFAULT_STAR_BAND),
            vec![nsrmr_star(tensor, DEFAULT_STAR_BAND)?],
        ),
    }
}

/// Elementwise mean of per-channel features of one kind.
pub fn average_channel_features(features: &[SrmrFeatures]) -> Result<SrmrFeatures> {
    let Some(first) = features.first() else {
        return Err(Error::HeterogeneousFeatures("no features to average".into()));
    };
    if let Some(odd) = features.iter().find(|f| !f.same_kind(first)) {
        return Err(Error::HeterogeneousFeatures(format!(
            "cannot average {} ({}) with {} ({})",
            first.variant, first.mode, odd.variant, odd.mode
        )));
    }
    let n = features.len() as f64;
    let values = (0..first.values.len())
        .map(|i| features.iter().map(|f| f.values[i]).sum::<f64>() / n)
        .collect();
    Ok(SrmrFeatures {
        values,
        ..first.clone()
    })
}

/// One JSON line of feature output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub variant: Variant,
    pub mode: Mode,
    pub k: Option<usize>,
    pub values: Vec<f64>,
    pub source_file: String,
    /// Channel index, or `None` for a channel average.
    pub channel: Option<usize>,
}

impl FeatureRecord {
    pub fn new(features: &SrmrFeatures, source_file: impl Into<String>, channel: Option<usize>) -> Self {
        FeatureRecord {
            variant: features.variant,
            mode: features.mode,
            k: features.k,
            values: features.values.clone(),
            source_file: source_file.into(),
            channel,
        }
    }
}
