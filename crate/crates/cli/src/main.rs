//! `srmr`: blind RT60/DRR estimation, dataset synthesis and evaluation.
//!
//! Records go to stdout as JSON lines, diagnostics to stderr. Exit status is
//! 0 on success, 1 for input errors and 2 for numeric failures.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};
use srmr_core::audio::{load_audio, read_wav};
use srmr_core::dataset::{synthesize, Manifest, RirModel};
use srmr_core::evaluation::{
    extract_clip_features, run_with_features, train_model, AnalysisConfigs, ChannelStrategy, FeatureTable, Target,
};
use srmr_core::mapping::{load_model, save_model, MappingModel, ModelKind};
use srmr_core::metrics::{average_channel_features, FeatureRecord, SrmrFeatures, Variant};
use srmr_core::room::{drr, schroeder_rt60, NoiseType, Rir};
use srmr_core::Mode;

use config::ConfigFile;

/// Training needs at least this many usable records.
const MIN_TRAIN_RECORDS: usize = 10;

#[derive(Parser, Debug)]
#[command(name = "srmr", version, about = "Blind RT60 and DRR estimation from reverberant speech")]
struct Cli {
    /// JSON file overriding the embedded default configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for synthesis, or for the train/test split when evaluating.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report per-file failures and carry on instead of stopping.
    #[arg(long, global = true)]
    keep_going: bool,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Feature values, and parameter estimates with --model, for audio files.
    Analyze {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "nsrmr")]
        variant: Variant,
        /// Run the variant's formula in this mode instead of its own.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Trained mapping; repeat for both an RT60 and a DRR model.
        #[arg(long)]
        model: Vec<PathBuf>,
        /// One record per channel instead of the channel-averaged features.
        #[arg(long)]
        per_channel: bool,
    },
    /// Writes a synthetic reverberant dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// RT60 targets, seconds.
        #[arg(long, value_delimiter = ',')]
        rt60: Option<Vec<f64>>,
        /// SNRs, dB.
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<f64>>,
        /// Also render every RIR without noise.
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        rirs_per_level: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<NoiseType>>,
        #[arg(long)]
        channels: Option<usize>,
        /// Copy one RIR and one noise signal to every channel.
        #[arg(long)]
        duplicate_channels: bool,
        /// Utterance duration, seconds.
        #[arg(long)]
        utterance_s: Option<f64>,
        #[arg(long, value_enum)]
        rir_model: Option<RirModelArg>,
    },
    /// Fits a mapping on every usable record of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "nsrmr")]
        variant: Variant,
        #[arg(long, default_value = "rt60")]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        channel_strategy: Option<ChannelStrategy>,
    },
    /// Train/test evaluation over a manifest, writing report files.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for report.csv, report.json and predictions.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variant: Option<Vec<Variant>>,
        #[arg(long, value_delimiter = ',')]
        target: Option<Vec<Target>>,
        #[arg(long)]
        channel_strategy: Option<ChannelStrategy>,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Measured RT60 and DRR of impulse-response files.
    RirStats {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Original,
    Normalized,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Original => Mode::Original,
            ModeArg::Normalized => Mode::Normalized,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RirModelArg {
    Image,
    Exponential,
}

impl From<RirModelArg> for RirModel {
    fn from(m: RirModelArg) -> RirModel {
        match m {
            RirModelArg::Image => RirModel::ImageMethod,
            RirModelArg::Exponential => RirModel::Exponential,
        }
    }
}

fn main() -> ExitCode {
    // Usage errors are input errors; clap's own status 2 would read as numeric.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .filter_map(|c| c.downcast_ref::<srmr_core::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = ConfigFile::load(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    if cli.dump_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given (see --help)");
    };
    let keep_going = cli.keep_going;
    match command {
        Command::Analyze {
            paths,
            variant,
            mode,
            model,
            per_channel,
        } => {
            let variant = mode.map_or(variant, |m| variant.in_mode(m.into()));
            let models = model.iter().map(load_model).collect::<srmr_core::Result<Vec<_>>>()?;
            let analysis = config.analysis();
            let results: Vec<_> = paths
                .par_iter()
                .map(|p| analyze_file(p, variant, &models, per_channel, &analysis))
                .collect();
            emit_per_file(&paths, results, keep_going, "source_file")
        }
        Command::Synth {
            out,
            rt60,
            snr,
            clean,
            rirs_per_level,
            noise,
            channels,
            duplicate_channels,
            utterance_s,
            rir_model,
        } => {
            let plan = &mut config.synth;
            if let Some(v) = rt60 {
                plan.rt60_targets = v;
            }
            if let Some(v) = snr {
                plan.snrs_db = v;
            }
            plan.include_clean |= clean;
            plan.duplicate_channels |= duplicate_channels;
            if let Some(v) = rirs_per_level {
                plan.rirs_per_level = v;
            }
            if let Some(v) = noise {
                plan.noise_types = v;
            }
            if let Some(v) = channels {
                plan.channels = v;
            }
            if let Some(v) = utterance_s {
                plan.utterance_s = v;
            }
            if let Some(v) = rir_model {
                plan.rir_model = v.into();
            }
            if let Some(v) = cli.seed {
                plan.seed = v;
            }
            plan.validate()?;
            eprintln!("synthesizing {} utterances into {}", plan.num_utterances(), out.display());
            let records = synthesize(plan, &out)?;
            let manifest = out.join("manifest.jsonl");
            println!("{}", json!({ "manifest": manifest, "records": records.len() }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            manifest,
            variant,
            target,
            out,
            channel_strategy,
        } => {
            let strategy = channel_strategy.unwrap_or(config.experiment.channel_strategy);
            let manifest = Manifest::read(&manifest)?;
            let table = FeatureTable::extract(&manifest, &[variant], &config.analysis())?;
            report_skipped(&table);
            if table.rows.len() < MIN_TRAIN_RECORDS {
                bail!(
                    "only {} usable records; training needs at least {MIN_TRAIN_RECORDS}",
                    table.rows.len()
                );
            }
            let rows: Vec<usize> = (0..table.rows.len()).collect();
            let model = train_model(&table, &rows, variant, target, strategy)?;
            save_model(&model, &out)?;
            println!(
                "{}",
                json!({
                    "model": out,
                    "variant": model.variant,
                    "target": target,
                    "kind": model.kind,
                    "n_train": model.n_train,
                    "deviance": model.deviance,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            manifest,
            out,
            variant,
            target,
            channel_strategy,
            train_fraction,
        } => {
            let analysis = config.analysis();
            let plan = &mut config.experiment;
            if let Some(v) = variant {
                plan.variants = v;
            }
            if let Some(v) = target {
                plan.targets = v;
            }
            if let Some(v) = channel_strategy {
                plan.channel_strategy = v;
            }
            if let Some(v) = train_fraction {
                plan.train_fraction = v;
            }
            if let Some(v) = cli.seed {
                plan.split_seed = v;
            }
            plan.validate()?;
            let manifest = Manifest::read(&manifest)?;
            let table = FeatureTable::extract(&manifest, &plan.variants, &analysis)?;
            report_skipped(&table);
            let report = run_with_features(&table, plan)?;
            report.write_all(&out)?;
            eprintln!(
                "{} records, {} train, {} test; reports in {}",
                report.n_records,
                report.n_train,
                report.n_test,
                out.display()
            );
            let mut stdout = std::io::stdout().lock();
            for row in &report.rows {
                writeln!(stdout, "{}", serde_json::to_string(row)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RirStats { paths } => {
            let results: Vec<_> = paths.par_iter().map(|p| rir_file_stats(p)).collect();
            emit_per_file(&paths, results, keep_going, "path")
        }
    }
}

fn report_skipped(table: &FeatureTable) {
    for s in &table.skipped {
        eprintln!("skipped {}: {}", s.utterance_id, s.reason);
    }
}

/// A failed file: the error plus any fields measured before it.
struct FileError {
    error: srmr_core::Error,
    partial: serde_json::Map<String, Value>,
}

impl From<srmr_core::Error> for FileError {
    fn from(error: srmr_core::Error) -> Self {
        FileError {
            error,
            partial: serde_json::Map::new(),
        }
    }
}

/// Prints each file's records in input order. A failed file yields an error
/// record; without `keep_going` output stops there with exit status 1.
fn emit_per_file(
    paths: &[PathBuf],
    results: Vec<std::result::Result<Vec<Value>, FileError>>,
    keep_going: bool,
    path_key: &str,
) -> Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    for (path, result) in paths.iter().zip(results) {
        match result {
            Ok(records) => {
                for r in records {
                    writeln!(stdout, "{r}")?;
                }
            }
            Err(FileError { error, partial }) => {
                eprintln!("{}: {error}", path.display());
                let mut record = serde_json::Map::new();
                record.insert(path_key.into(), json!(path));
                record.extend(partial);
                record.insert("error".into(), json!(error.to_string()));
                record.insert("numeric".into(), json!(error.is_numeric()));
                writeln!(stdout, "{}", Value::Object(record))?;
                if !keep_going {
                    stdout.flush()?;
                    return Ok(ExitCode::from(1));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze_file(
    path: &Path,
    variant: Variant,
    models: &[MappingModel],
    per_channel: bool,
    configs: &AnalysisConfigs,
) -> std::result::Result<Vec<Value>, FileError> {
    let clip = load_audio(path)?;
    let mut variants = vec![variant];
    for m in models {
        if !variants.contains(&m.variant) {
            variants.push(m.variant);
        }
    }
    let features = extract_clip_features(&clip, &variants, configs)?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    let mut push = |pick: &dyn Fn(&[SrmrFeatures]) -> srmr_core::Result<SrmrFeatures>,
                    channel: Option<usize>|
     -> srmr_core::Result<()> {
        let own = pick(&features[0])?;
        let mut record = serde_json::to_value(FeatureRecord::new(&own, source.clone(), channel))?;
        for m in models {
            let vi = variants.iter().position(|v| *v == m.variant).unwrap_or(0);
            let value = m.predict(&pick(&features[vi])?.values)?;
            let key = match m.kind {
                ModelKind::GlmLog => "rt60_s",
                ModelKind::Linear => "drr_db",
            };
            record[key] = json!(value);
        }
        out.push(record);
        Ok(())
    };
    if per_channel {
        for c in 0..clip.num_channels() {
            push(&|f: &[SrmrFeatures]| Ok(f[c].clone()), Some(c))?;
        }
    } else {
        push(&|f: &[SrmrFeatures]| average_channel_features(f), None)?;
    }
    Ok(out)
}

fn rir_file_stats(path: &Path) -> std::result::Result<Vec<Value>, FileError> {
    let clip = read_wav(path)?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    for c in 0..clip.num_channels() {
        let rir = Rir::from_clip(&clip, c, source.clone())?;
        let drr = drr(&rir)?;
        match schroeder_rt60(&rir) {
            Ok(rt60) => out.push(json!({ "path": source, "channel": c, "rt60_s": rt60, "drr_db": drr })),
            Err(error) => {
                let mut partial = serde_json::Map::new();
                partial.insert("channel".into(), json!(c));
                partial.insert("drr_db".into(), json!(drr));
                return Err(FileError { error, partial });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&srmr_core::Error::SingularDesign.into()), 2);
        assert_eq!(exit_code(&srmr_core::Error::SilentInput.into()), 2);
        assert_eq!(exit_code(&srmr_core::Error::EmptyAudio.into()), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("bad flag")), 1);
        let wrapped = anyhow::Error::from(srmr_core::Error::NoConvergence("x".into())).context("training");
        assert_eq!(exit_code(&wrapped), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
