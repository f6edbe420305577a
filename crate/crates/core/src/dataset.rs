//! Synthetic reverberant, noisy datasets: tuned image-method rooms (or
//! exponential-decay RIRs), speech-like utterances, additive noise at set
//! SNRs, and a JSON-lines manifest holding the ground truth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, WavEncoding, PIPELINE_RATE};
use crate::error::{Error, Result};
use crate::probe::speech_like;
use crate::room::{
    eyring_beta, generate_noise, image_rir, mix_noise_at_snr, rir_stats, schroeder_rt60, spatialize,
    synth_exponential_rir, NoiseType, Rir,
};

pub const DEFAULT_RT60_GRID: [f64; 5] = [0.25, 0.45, 0.65, 0.85, 1.05];
pub const DEFAULT_SNRS_DB: [f64; 3] = [0.0, 10.0, 20.0];
/// Accepted relative deviation of a tuned room's RT60 from its target.
pub const RT60_TOLERANCE: f64 = 0.15;

const TUNING_GOAL: f64 = 0.05;
const MAX_TUNING_STEPS: usize = 10;
const MIC_SPACING_M: f64 = 0.1;
const WALL_MARGIN_M: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RirModel {
    ImageMethod,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthPlan {
    pub rt60_targets: Vec<f64>,
    pub snrs_db: Vec<f64>,
    /// Adds a noise-free copy of every utterance condition.
    pub include_clean: bool,
    pub rirs_per_level: usize,
    pub noise_types: Vec<NoiseType>,
    pub channels: usize,
    /// Render one RIR and copy it to every channel, noise included.
    pub duplicate_channels: bool,
    pub utterance_s: f64,
    pub rir_model: RirModel,
    /// Source-to-microphone distance range (m) for image-method rooms.
    pub distance_m: [f64; 2],
    pub seed: u64,
}

impl Default for SynthPlan {
    fn default() -> Self {
        SynthPlan {
            rt60_targets: DEFAULT_RT60_GRID.to_vec(),
            snrs_db: DEFAULT_SNRS_DB.to_vec(),
            include_clean: false,
            rirs_per_level: 10,
            noise_types: vec![NoiseType::White],
            channels: 1,
            duplicate_channels: false,
            utterance_s: 4.0,
            rir_model: RirModel::ImageMethod,
            distance_m: [1.0, 3.0],
            seed: 0,
        }
    }
}

impl SynthPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.rt60_targets.is_empty() || self.rt60_targets.iter().any(|t| !(*t > 0.05 && *t < 5.0)) {
            return bad("rt60 targets must lie in (0.05, 5) s");
        }
        if self.snrs_db.iter().any(|s| !s.is_finite()) {
            return bad("SNRs must be finite");
        }
        if self.snrs_db.is_empty() && !self.include_clean {
            return bad("no SNR conditions and no clean condition");
        }
        if !self.snrs_db.is_empty() && self.noise_types.is_empty() {
            return bad("noisy conditions need at least one noise type");
        }
        if self.rirs_per_level == 0 || self.channels == 0 || self.channels > 32 {
            return bad("rirs_per_level must be positive and channels in 1..=32");
        }
        if !(self.distance_m[0] > 0.0 && self.distance_m[0] < self.distance_m[1]) {
            return bad("distance range must be positive and increasing");
        }
        if !(self.utterance_s >= 1.0) {
            return bad("utterances must last at least 1 s");
        }
        Ok(())
    }

    /// (noise type, SNR) pairs per RIR; `None` is the clean condition.
    pub fn conditions(&self) -> Vec<Option<(NoiseType, f64)>> {
        let mut out = Vec::new();
        if self.include_clean {
            out.push(None);
        }
        for &kind in &self.noise_types {
            for &snr in &self.snrs_db {
                out.push(Some((kind, snr)));
            }
        }
        out
    }

    pub fn num_utterances(&self) -> usize {
        self.rt60_targets.len() * self.rirs_per_level * self.conditions().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: String,
    pub rir_id: String,
    pub true_rt60_s: f64,
    pub true_drr_db: f64,
    /// `"none"` for clean utterances.
    pub noise_type: String,
    /// `None` for clean utterances.
    pub snr_db: Option<f64>,
    pub channels: usize,
    pub utterance_id: String,
}

impl ManifestRecord {
    pub fn is_clean(&self) -> bool {
        self.snr_db.is_none()
    }
}

/// Mixes the indices into `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// RIRs for one (level, index) slot, one per channel, plus channel-mean truth.
#[derive(Debug, Clone)]
pub struct RirSet {
    pub id: String,
    pub target_rt60: f64,
    pub rirs: Vec<Rir>,
    pub rt60: f64,
    pub drr_db: f64,
}

fn rir_duration(target: f64) -> f64 {
    (1.1 * target + 0.05).max(0.3)
}

fn random_position(rng: &mut ChaCha8Rng, room: [f64; 3], margin: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| rng.random_range(margin[i]..room[i] - margin[i]))
}

fn image_set(target: f64, channels: usize, distance: [f64; 2], rng: &mut ChaCha8Rng) -> Result<Vec<Rir>> {
    let room = [rng.random_range(4.0..8.0), rng.random_range(3.0..6.0), rng.random_range(2.5..3.5)];
    let mic_margin = [WALL_MARGIN_M + MIC_SPACING_M * channels as f64, WALL_MARGIN_M, WALL_MARGIN_M];
    let mut attempts = 0;
    let (source, mic) = loop {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Geometry(format!("no source/mic pair {distance:?} m apart fits {room:?}")));
        }
        let s = random_position(rng, room, [WALL_MARGIN_M; 3]);
        let m = random_position(rng, room, mic_margin);
        let d = s.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if (distance[0]..=distance[1]).contains(&d) {
            break (s, m);
        }
    };
    let duration = rir_duration(target);
    let render = |beta: f64, c: usize| {
        let mut m = mic;
        m[0] += MIC_SPACING_M * c as f64;
        image_rir(room, source, m, [beta; 6], PIPELINE_RATE, duration)
    };

    // Absorption scales roughly with -ln(beta), RT60 inversely with it.
    let mut beta = eyring_beta(room, target).clamp(0.05, 0.995);
    let mut best: Option<(f64, Rir)> = None;
    for _ in 0..MAX_TUNING_STEPS {
        let rir = render(beta, 0)?;
        let rt = schroeder_rt60(&rir)?;
        let dev = (rt / target - 1.0).abs();
        let improved = best.as_ref().is_none_or(|(d, _)| dev < *d);
        if improved {
            best = Some((dev, rir));
        }
        if dev <= TUNING_GOAL {
            break;
        }
        beta = (beta.ln() * rt / target).exp().clamp(0.05, 0.995);
    }
    let (dev, first) = best.expect("at least one tuning step");
    if dev > RT60_TOLERANCE {
        return Err(Error::NoConvergence(format!(
            "room {room:?} missed RT60 target {target} s by {:.0}%",
            100.0 * dev
        )));
    }
    let beta_final = match &first.meta {
        crate::room::RirMeta::ImageMethod { beta, .. } => beta[0],
        _ => unreachable!("image_rir sets image-method metadata"),
    };
    let mut rirs = vec![first];
    for c in 1..channels {
        rirs.push(render(beta_final, c)?);
    }
    Ok(rirs)
}

fn exponential_set(target: f64, channels: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Rir>> {
    let tau = target / (60.0 / (20.0 * std::f64::consts::LOG10_E));
    (0..channels)
        .map(|_| synth_exponential_rir(tau, PIPELINE_RATE, rir_duration(target) + 0.3 * target, rng.random()))
        .collect()
}

/// Renders and measures one RIR set.
pub fn make_rir_set(plan: &SynthPlan, level: usize, index: usize) -> Result<RirSet> {
    let target = plan.rt60_targets[level];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[1, level as u64, index as u64]));
    let rendered = if plan.duplicate_channels { 1 } else { plan.channels };
    let mut rirs = match plan.rir_model {
        RirModel::ImageMethod => image_set(target, rendered, plan.distance_m, &mut rng)?,
        RirModel::Exponential => exponential_set(target, rendered, &mut rng)?,
    };
    while rirs.len() < plan.channels {
        rirs.push(rirs[0].clone());
    }
    let mut rt_sum = 0.0;
    let mut drr_sum = 0.0;
    for rir in &rirs {
        let stats = rir_stats(rir)?;
        rt_sum += stats.rt60;
        drr_sum += stats
            .drr
            .db()
            .ok_or_else(|| Error::InvalidData("synthesized RIR has no reverberant energy".into()))?;
    }
    let n = rirs.len() as f64;
    Ok(RirSet {
        id: format!("rt{:03}_r{:02}", (target * 100.0).round() as u32, index),
        target_rt60: target,
        rirs,
        rt60: rt_sum / n,
        drr_db: drr_sum / n,
    })
}

/// Reverberant (and possibly noisy) rendering of one utterance.
pub fn render_utterance(
    plan: &SynthPlan,
    set: &RirSet,
    condition: Option<(NoiseType, f64)>,
    utterance_seed: u64,
) -> Result<AudioClip> {
    let dry = speech_like(plan.utterance_s, PIPELINE_RATE, utterance_seed);
    let wet = spatialize(&dry, PIPELINE_RATE, &set.rirs)?;
    let trimmed: Vec<Vec<f64>> = wet.into_channels().into_iter().map(|mut c| {
        c.truncate(dry.len());
        c
    }).collect();
    let clip = AudioClip::new(trimmed, PIPELINE_RATE)?;
    let Some((kind, snr)) = condition else {
        return Ok(clip);
    };
    let noise_seed = derive_seed(utterance_seed, &[2]);
    let noise_channels = if plan.duplicate_channels { 1 } else { plan.channels };
    let mut noise = generate_noise(kind, clip.len(), noise_channels, PIPELINE_RATE, noise_seed);
    if noise.num_channels() != clip.num_channels() {
        let one = noise.channel(0).to_vec();
        noise = AudioClip::new(vec![one; clip.num_channels()], PIPELINE_RATE)?;
    }
    Ok(mix_noise_at_snr(&clip, &noise, snr, noise_seed)?.clip)
}

/// Synthesizes the plan into `outdir` (audio/, rirs/, manifest.jsonl) and
/// returns the manifest records in their written order.
pub fn synthesize(plan: &SynthPlan, outdir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    plan.validate()?;
    let outdir = outdir.as_ref();
    for sub in ["audio", "rirs"] {
        let dir = outdir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let slots: Vec<(usize, usize)> = (0..plan.rt60_targets.len())
        .flat_map(|l| (0..plan.rirs_per_level).map(move |r| (l, r)))
        .collect();
    let sets: Vec<RirSet> = slots
        .par_iter()
        .map(|&(l, r)| make_rir_set(plan, l, r))
        .collect::<Result<_>>()?;
    for set in &sets {
        for (c, rir) in set.rirs.iter().enumerate() {
            let path = outdir.join("rirs").join(format!("{}_ch{c}.wav", set.id));
            write_wav(&path, &rir.to_clip(), WavEncoding::Float32)?;
        }
    }

    let conditions = plan.conditions();
    let jobs: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|s| (0..conditions.len()).map(move |c| (s, c)))
        .collect();
    let records: Vec<ManifestRecord> = jobs
        .par_iter()
        .map(|&(s, c)| {
            let set = &sets[s];
            let utt_seed = derive_seed(plan.seed, &[3, s as u64, c as u64]);
            let utterance_id = format!("u{:04}", s * conditions.len() + c);
            let clip = render_utterance(plan, set, conditions[c], utt_seed)?;
            let audio_path = format!("audio/{utterance_id}.wav");
            write_wav(outdir.join(&audio_path), &clip, WavEncoding::Float32)?;
            let (noise_type, snr_db) = match conditions[c] {
                None => ("none".to_string(), None),
                Some((kind, snr)) => (kind.name().to_string(), Some(snr)),
            };
            Ok(ManifestRecord {
                audio_path,
                rir_id: set.id.clone(),
                true_rt60_s: set.rt60,
                true_drr_db: set.drr_db,
                noise_type,
                snr_db,
                channels: plan.channels,
                utterance_id,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(outdir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A manifest loaded from disk, with the directory its relative paths use.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Manifest(format!("{} has no records", path.display())));
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { base_dir, records })
    }

    pub fn audio_path(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
