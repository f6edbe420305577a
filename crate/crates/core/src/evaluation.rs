//! Train/test protocol over a synthesized manifest: feature extraction,
//! mapping training on a RIR-disjoint split, and RMSE / Pearson / error
//! variance per condition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_audio, AudioClip};
use crate::dataset::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::level::{normalize_to, TARGET_LEVEL_DBOV};
use crate::mapping::{MappingModel, ModelKind};
use crate::metrics::{compute, SrmrFeatures, Variant};
use crate::modspec::{analyze, Mode, PipelineConfig};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidData("empty sequence".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(estimates, truths)?;
    let mse = estimates.iter().zip(truths).map(|(e, t)| (e - t).powi(2)).sum::<f64>()
        / estimates.len() as f64;
    Ok(mse.sqrt())
}

/// Mean of `estimate - truth`.
pub fn bias(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(estimates, truths)?;
    Ok(estimates.iter().zip(truths).map(|(e, t)| e - t).sum::<f64>() / estimates.len() as f64)
}

/// Population variance of the errors `estimate - truth`.
pub fn error_variance(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    let b = bias(estimates, truths)?;
    Ok(estimates.iter().zip(truths).map(|(e, t)| (e - t - b).powi(2)).sum::<f64>()
        / estimates.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Rt60,
    Drr,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Rt60 => "rt60",
            Target::Drr => "drr",
        }
    }

    /// Log-link GLM for RT60, linear for DRR.
    pub fn model_kind(self) -> ModelKind {
        match self {
            Target::Rt60 => ModelKind::GlmLog,
            Target::Drr => ModelKind::Linear,
        }
    }

    pub fn truth(self, record: &ManifestRecord) -> f64 {
        match self {
            Target::Rt60 => record.true_rt60_s,
            Target::Drr => record.true_drr_db,
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rt60" => Ok(Target::Rt60),
            "drr" => Ok(Target::Drr),
            _ => Err(Error::InvalidConfig(format!("unknown target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelStrategy {
    /// Channel 0 only.
    Single,
    /// Average features over channels, then map once.
    FeatureAverage,
    /// Map every channel, then average the estimates.
    ParameterAverage,
}

impl std::str::FromStr for ChannelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ChannelStrategy::Single),
            "feature-average" => Ok(ChannelStrategy::FeatureAverage),
            "parameter-average" => Ok(ChannelStrategy::ParameterAverage),
            _ => Err(Error::InvalidConfig(format!("unknown channel strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub variants: Vec<Variant>,
    pub targets: Vec<Target>,
    pub channel_strategy: ChannelStrategy,
    pub split_seed: u64,
    /// Fraction of RIRs used for training. At 1.0 the test set is the
    /// training set.
    pub train_fraction: f64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            variants: vec![Variant::Nsrmr, Variant::NsrmrStar, Variant::Osrmr],
            targets: vec![Target::Rt60, Target::Drr],
            channel_strategy: ChannelStrategy::FeatureAverage,
            split_seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.targets.is_empty() {
            return Err(Error::InvalidConfig("plan needs at least one variant and target".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction {} must lie in (0, 1]",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ExperimentPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Pipeline configurations per analysis mode.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfigs {
    pub original: PipelineConfig,
    pub normalized: PipelineConfig,
}

impl Default for AnalysisConfigs {
    fn default() -> Self {
        AnalysisConfigs {
            original: PipelineConfig::original(),
            normalized: PipelineConfig::normalized(),
        }
    }
}

impl AnalysisConfigs {
    pub fn for_mode(&self, mode: Mode) -> &PipelineConfig {
        match mode {
            Mode::Original => &self.original,
            Mode::Normalized => &self.normalized,
        }
    }
}

/// Level-normalizes `clip` (one gain for all channels), analyzes every
/// channel once per needed mode and returns `[variant][channel]` features.
pub fn extract_clip_features(
    clip: &AudioClip,
    variants: &[Variant],
    configs: &AnalysisConfigs,
) -> Result<Vec<Vec<SrmrFeatures>>> {
    let clip = normalize_to(clip, TARGET_LEVEL_DBOV)?.clip;
    let modes: BTreeSet<Mode> = variants.iter().map(|v| v.mode()).collect();
    let mut tensors = BTreeMap::new();
    for mode in modes {
        let per_channel = (0..clip.num_channels())
            .into_par_iter()
            .map(|c| analyze(&clip.select_channel(c), configs.for_mode(mode)))
            .collect::<Result<Vec<_>>>()?;
        tensors.insert(mode, per_channel);
    }
    variants
        .iter()
        .map(|v| tensors[&v.mode()].iter().map(|t| compute(t, *v)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub utterance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub record: ManifestRecord,
    /// `[variant][channel]` feature vectors.
    pub features: Vec<Vec<Vec<f64>>>,
}

/// Features for every usable record of a manifest.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub variants: Vec<Variant>,
    pub rows: Vec<FeatureRow>,
    pub skipped: Vec<Skipped>,
}

impl FeatureTable {
    /// Unreadable audio is an error; numerically degenerate audio is skipped.
    pub fn extract(manifest: &Manifest, variants: &[Variant], configs: &AnalysisConfigs) -> Result<Self> {
        let results: Vec<Result<std::result::Result<FeatureRow, Skipped>>> = manifest
            .records
            .par_iter()
            .map(|rec| {
                let clip = load_audio(manifest.audio_path(rec))?;
                match extract_clip_features(&clip, variants, configs) {
                    Ok(f) => Ok(Ok(FeatureRow {
                        record: rec.clone(),
                        features: f
                            .into_iter()
                            .map(|per_ch| per_ch.into_iter().map(|x| x.values).collect())
                            .collect(),
                    })),
                    Err(e) if e.is_numeric() => Ok(Err(Skipped {
                        utterance_id: rec.utterance_id.clone(),
                        reason: e.to_string(),
                    })),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        for r in results {
            match r? {
                Ok(row) => rows.push(row),
                Err(s) => skipped.push(s),
            }
        }
        Ok(FeatureTable {
            variants: variants.to_vec(),
            rows,
            skipped,
        })
    }

    fn variant_index(&self, v: Variant) -> Result<usize> {
        self.variants
            .iter()
            .position(|x| *x == v)
            .ok_or_else(|| Error::InvalidConfig(format!("features for {v} were not extracted")))
    }
}

/// Splits by RIR: a seeded shuffle of the distinct RIR ids puts
/// `train_fraction` of them in training. Test records sharing an utterance
/// id with any training record are dropped. Returns row indices.
pub fn split_by_rir(records: &[&ManifestRecord], seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..records.len()).collect();
    if train_fraction >= 1.0 {
        return (all.clone(), all);
    }
    let mut rirs: Vec<&str> = records.iter().map(|r| r.rir_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    rirs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((rirs.len() as f64 * train_fraction).round() as usize).clamp(1, rirs.len().max(2) - 1);
    let train_rirs: BTreeSet<&str> = rirs[..n_train.min(rirs.len())].iter().copied().collect();
    let (train, test): (Vec<usize>, Vec<usize>) =
        all.into_iter().partition(|&i| train_rirs.contains(records[i].rir_id.as_str()));
    let train_utts: BTreeSet<&str> = train.iter().map(|&i| records[i].utterance_id.as_str()).collect();
    let test = test
        .into_iter()
        .filter(|&i| !train_utts.contains(records[i].utterance_id.as_str()))
        .collect();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub rir_id: String,
    pub noise_type: String,
    pub snr_db: Option<f64>,
    pub channels: usize,
    pub variant: Variant,
    pub target: Target,
    pub estimate: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    /// One test condition; these rows partition the test set.
    Condition,
    /// Errors pooled over several conditions.
    Pooled,
    /// Unweighted mean of the per-condition figures.
    LevelMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub kind: RowKind,
    pub variant: Variant,
    pub target: Target,
    pub n: usize,
    pub rmse: f64,
    /// `None` when undefined (constant estimates or truths).
    pub pearson: Option<f64>,
    pub err_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub n: usize,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub err_var: f64,
    pub bias: f64,
}

pub fn score(estimates: &[f64], truths: &[f64]) -> Result<Scores> {
    Ok(Scores {
        n: estimates.len(),
        rmse: rmse(estimates, truths)?,
        pearson: pearson(estimates, truths).ok(),
        err_var: error_variance(estimates, truths)?,
        bias: bias(estimates, truths)?,
    })
}

pub fn condition_label(noise_type: &str, snr_db: Option<f64>, channels: usize) -> String {
    match snr_db {
        Some(snr) => format!("noise={noise_type},snr={snr},ch={channels}"),
        None => format!("noise={noise_type},snr=clean,ch={channels}"),
    }
}

impl Prediction {
    pub fn condition(&self) -> String {
        condition_label(&self.noise_type, self.snr_db, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plan: ExperimentPlan,
    pub n_records: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub skipped: Vec<Skipped>,
    pub models: Vec<MappingModel>,
    pub rows: Vec<ReportRow>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn row(&self, condition: &str, variant: Variant, target: Target) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.variant == variant && r.target == target)
    }

    /// Scores over the test predictions selected by `keep`.
    pub fn subset(&self, variant: Variant, target: Target, keep: impl Fn(&Prediction) -> bool) -> Result<Scores> {
        let (est, truth): (Vec<f64>, Vec<f64>) = self
            .predictions
            .iter()
            .filter(|p| p.variant == variant && p.target == target && keep(p))
            .map(|p| (p.estimate, p.truth))
            .unzip();
        score(&est, &truth)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,variant,target,n,rmse,pearson,err_var\n");
        for r in &self.rows {
            let cond = if r.condition.contains(',') {
                format!("\"{}\"", r.condition)
            } else {
                r.condition.clone()
            };
            let p = r.pearson.map(|p| p.to_string()).unwrap_or_default();
            writeln!(out, "{cond},{},{},{},{},{p},{}", r.variant, r.target.name(), r.n, r.rmse, r.err_var)
                .expect("write to string");
        }
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("utterance_id,rir_id,noise_type,snr_db,channels,variant,target,estimate,truth\n");
        for p in &self.predictions {
            let snr = p.snr_db.map(|s| s.to_string()).unwrap_or_else(|| "clean".into());
            writeln!(
                out,
                "{},{},{},{snr},{},{},{},{},{}",
                p.utterance_id, p.rir_id, p.noise_type, p.channels, p.variant, p.target.name(), p.estimate, p.truth
            )
            .expect("write to string");
        }
        out
    }

    /// Writes `report.csv`, `report.json` and `predictions.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.csv", self.to_csv()),
            ("report.json", serde_json::to_string_pretty(self)? + "\n"),
            ("predictions.csv", self.predictions_csv()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn channel_rows(row: &FeatureRow, vi: usize, strategy: ChannelStrategy) -> Vec<Vec<f64>> {
    let per_ch = &row.features[vi];
    match strategy {
        ChannelStrategy::Single => vec![per_ch[0].clone()],
        ChannelStrategy::ParameterAverage => per_ch.clone(),
        ChannelStrategy::FeatureAverage => {
            let n = per_ch.len() as f64;
            vec![(0..per_ch[0].len())
                .map(|d| per_ch.iter().map(|c| c[d]).sum::<f64>() / n)
                .collect()]
        }
    }
}

/// Fits the `target` mapping for `variant` on the table rows `rows`.
pub fn train_model(
    table: &FeatureTable,
    rows: &[usize],
    variant: Variant,
    target: Target,
    strategy: ChannelStrategy,
) -> Result<MappingModel> {
    let vi = table.variant_index(variant)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &i in rows {
        let truth = target.truth(&table.rows[i].record);
        for feats in channel_rows(&table.rows[i], vi, strategy) {
            x.push(feats);
            y.push(truth);
        }
    }
    MappingModel::train(target.model_kind(), variant, &x, &y)
}

/// Trains on the training split and scores the test split of `table`.
pub fn run_with_features(table: &FeatureTable, plan: &ExperimentPlan) -> Result<EvalReport> {
    plan.validate()?;
    let records: Vec<&ManifestRecord> = table.rows.iter().map(|r| &r.record).collect();
    let (train, test) = split_by_rir(&records, plan.split_seed, plan.train_fraction);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidData(format!(
            "split left {} training and {} test records",
            train.len(),
            test.len()
        )));
    }

    let mut models = Vec::new();
    let mut predictions = Vec::new();
    for &variant in &plan.variants {
        let vi = table.variant_index(variant)?;
        for &target in &plan.targets {
            let model = train_model(table, &train, variant, target, plan.channel_strategy)?;
            for &i in &test {
                let row = &table.rows[i];
                let ests = channel_rows(row, vi, plan.channel_strategy)
                    .iter()
                    .map(|f| model.predict(f))
                    .collect::<Result<Vec<f64>>>()?;
                let rec = &row.record;
                predictions.push(Prediction {
                    utterance_id: rec.utterance_id.clone(),
                    rir_id: rec.rir_id.clone(),
                    noise_type: rec.noise_type.clone(),
                    snr_db: rec.snr_db,
                    channels: rec.channels,
                    variant,
                    target,
                    estimate: mean(&ests),
                    truth: target.truth(rec),
                });
            }
            models.push(model);
        }
    }
    predictions.sort_by(|a, b| {
        (a.variant, a.target, &a.utterance_id).cmp(&(b.variant, b.target, &b.utterance_id))
    });
    let rows = build_rows(&predictions, plan)?;
    let mut skipped = table.skipped.clone();
    skipped.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(EvalReport {
        plan: plan.clone(),
        n_records: table.rows.len() + table.skipped.len(),
        n_train: train.len(),
        n_test: test.len(),
        skipped,
        models,
        rows,
        predictions,
    })
}

fn build_rows(predictions: &[Prediction], plan: &ExperimentPlan) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &variant in &plan.variants {
        for &target in &plan.targets {
            let preds: Vec<&Prediction> = predictions
                .iter()
                .filter(|p| p.variant == variant && p.target == target)
                .collect();
            let mut groups: BTreeMap<(RowKind, String), Vec<&Prediction>> = BTreeMap::new();
            for p in &preds {
                groups.entry((RowKind::Condition, p.condition())).or_default().push(p);
                groups.entry((RowKind::Pooled, "all".into())).or_default().push(p);
                groups
                    .entry((RowKind::Pooled, format!("noise={}", p.noise_type)))
                    .or_default()
                    .push(p);
                let snr = p.snr_db.map(|s| s.to_string()).unwrap_or_else(|| "clean".into());
                groups.entry((RowKind::Pooled, format!("snr={snr}"))).or_default().push(p);
            }
            let mut made = Vec::new();
            for ((kind, condition), group) in &groups {
                let (est, truth): (Vec<f64>, Vec<f64>) = group.iter().map(|p| (p.estimate, p.truth)).unzip();
                let s = score(&est, &truth)?;
                made.push(ReportRow {
                    condition: condition.clone(),
                    kind: *kind,
                    variant,
                    target,
                    n: s.n,
                    rmse: s.rmse,
                    pearson: s.pearson,
                    err_var: s.err_var,
                });
            }
            let per_cond: Vec<&ReportRow> = made.iter().filter(|r| r.kind == RowKind::Condition).collect();
            if per_cond.len() > 1 {
                let k = per_cond.len() as f64;
                let ps: Vec<f64> = per_cond.iter().filter_map(|r| r.pearson).collect();
                let level_mean = ReportRow {
                    condition: "mean-over-conditions".into(),
                    kind: RowKind::LevelMean,
                    variant,
                    target,
                    n: per_cond.iter().map(|r| r.n).sum(),
                    rmse: per_cond.iter().map(|r| r.rmse).sum::<f64>() / k,
                    pearson: (!ps.is_empty()).then(|| mean(&ps)),
                    err_var: per_cond.iter().map(|r| r.err_var).sum::<f64>() / k,
                };
                made.push(level_mean);
            }
            rows.extend(made);
        }
    }
    Ok(rows)
}

/// Extracts features for `manifest` and runs `plan` on them.
pub fn run_experiment(manifest: &Manifest, plan: &ExperimentPlan, configs: &AnalysisConfigs) -> Result<EvalReport> {
    plan.validate()?;
    let table = FeatureTable::extract(manifest, &plan.variants, configs)?;
    run_with_features(&table, plan)
}
