//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srmr_core::dataset::{synthesize, Manifest, SynthPlan};
use srmr_core::evaluation::{
    bias, error_variance, rmse, run_with_features, spearman, AnalysisConfigs, ChannelStrategy, EvalReport,
    ExperimentPlan, FeatureTable, Target,
};
use srmr_core::level::{active_speech_level, normalize_to};
use srmr_core::mapping::fit_glm_log;
use srmr_core::metrics::{self, Variant};
use srmr_core::room::{convolve, drr, schroeder_rt60, synth_exponential_rir, Drr, Rir, RirMeta};
use srmr_core::{analyze, probe, AudioClip, Mode, ModulationTensor, PipelineConfig};

/// Criteria run one at a time so each runtime limit measures that criterion alone.
fn exclusive() -> MutexGuard<'static, ()> {
    static TURN: Mutex<()> = Mutex::new(());
    TURN.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, checks: &[(&str, bool)], detail: &str, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let pass = failed.is_empty() && in_time;
    // Written to the raw stderr handle so the line shows even when output is captured.
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {id} {}: {name} | {detail} | {:.1}s of {}s{}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if failed.is_empty() { String::new() } else { format!(" | failed: {}", failed.join(", ")) }
    );
    assert!(in_time, "criterion {id} exceeded its runtime limit");
    assert!(failed.is_empty(), "criterion {id} failed: {failed:?}");
}

/// Brute-force sums over a raw `[j][k][m]` energy array.
struct Raw {
    e: Vec<Vec<Vec<f64>>>,
    active: Vec<bool>,
}

impl Raw {
    fn band(&self, k: usize) -> f64 {
        let mut s = 0.0;
        for j in 0..self.e.len() {
            for m in 0..self.active.len() {
                if self.active[m] {
                    s += self.e[j][k - 1][m];
                }
            }
        }
        s
    }

    fn star(&self, k: usize) -> f64 {
        let peak = self.e.iter().flatten().flatten().copied().fold(0.0, f64::max);
        let mut s = 0.0;
        for j in 0..self.e.len() {
            for m in 0..self.active.len() {
                if self.active[m] {
                    s += self.e[j][0][m] / self.e[j][k - 1][m].max(1e-12 * peak);
                }
            }
        }
        s / self.active.iter().filter(|a| **a).count() as f64
    }

    fn tensor(&self, mode: Mode) -> ModulationTensor {
        let m = self.active.len();
        let t = ModulationTensor::from_fn(23, 8, m, PipelineConfig::for_mode(mode), |j, k, mm| self.e[j][k][mm]).unwrap();
        t.with_mask(self.active.clone()).unwrap()
    }
}

#[test]
fn criterion_1_metric_oracles() {
    let _turn = exclusive();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(1..=50);
        let e: Vec<Vec<Vec<f64>>> = (0..23)
            .map(|_| (0..8).map(|_| (0..m).map(|_| rng.random_range(1e-3..10.0)).collect()).collect())
            .collect();
        let mut active: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
        active[rng.random_range(0..m)] = true;
        let raw = Raw { e, active };
        let to = raw.tensor(Mode::Original);
        let tn = raw.tensor(Mode::Normalized);
        let mut pairs = Vec::new();
        for k in 5..=8 {
            pairs.push((metrics::srmr_k(&to, k).unwrap(), raw.band(1) / raw.band(k)));
        }
        let high: f64 = (5..=8).map(|k| raw.band(k)).sum();
        pairs.push((metrics::osrmr(&to).unwrap(), raw.band(1) / high));
        pairs.push((metrics::srmr(&to).unwrap(), (1..=4).map(|k| raw.band(k)).sum::<f64>() / high));
        for k in [2, 5, 8] {
            pairs.push((metrics::nsrmr_star(&tn, k).unwrap(), raw.star(k)));
        }
        for (a, b) in pairs {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    let uniform = |mode| ModulationTensor::from_fn(23, 8, 17, PipelineConfig::for_mode(mode), |_, _, _| 3.7).unwrap();
    let (uo, un) = (uniform(Mode::Original), uniform(Mode::Normalized));
    let uni = [
        metrics::srmr_k(&uo, 5).unwrap(),
        metrics::osrmr(&uo).unwrap(),
        metrics::srmr(&uo).unwrap(),
        metrics::nsrmr_star(&un, 5).unwrap(),
    ];
    verdict(
        1,
        "metric-math oracle suite",
        &[("oracle agreement 1e-9", worst <= 1e-9), ("uniform values", uni == [1.0, 0.25, 1.0, 23.0])],
        &format!("worst relative error {worst:.2e}, uniform {uni:?}"),
        start,
        Duration::from_secs(5),
    );
}

fn permuted(t: &ModulationTensor, perm: &[usize]) -> ModulationTensor {
    let (j, k, m) = (t.num_acoustic_bands(), t.num_mod_bands(), t.num_frames());
    let mut e = Vec::with_capacity(j * k * m);
    for jj in 0..j {
        for mm in 0..m {
            e.extend_from_slice(t.cell(jj, perm[mm]));
        }
    }
    let active = perm.iter().map(|&p| t.is_active(p)).collect();
    ModulationTensor::from_parts(j, k, m, e, active, t.config().clone()).unwrap()
}

fn all_metrics(to: &ModulationTensor, tn: &ModulationTensor) -> Vec<f64> {
    let mut v = metrics::srmr_k_vector(to).unwrap().to_vec();
    v.push(metrics::osrmr(to).unwrap());
    v.push(metrics::srmr(to).unwrap());
    v.push(metrics::srmr(tn).unwrap());
    v.push(metrics::osrmr(tn).unwrap());
    v.push(metrics::nsrmr_star(tn, 5).unwrap());
    v
}

#[test]
fn criterion_2_pipeline_invariants() {
    let _turn = exclusive();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (orig, norm) = (PipelineConfig::original(), PipelineConfig::normalized());
    let mut scale_err = 0.0f64;
    let mut metric_err = 0.0f64;
    let mut perm_err = 0.0f64;
    let mut deterministic = true;
    let mut masks_equal = true;
    for p in 0..10 {
        let secs = rng.random_range(1.0..3.0);
        let x = probe::speech_like_clip(secs, 16000, 1000 + p);
        let a = rng.random_range(0.05..4.0);
        let ax = x.scaled(a);
        let to = analyze(&x, &orig).unwrap();
        let tn = analyze(&x, &norm).unwrap();
        let tao = analyze(&ax, &orig).unwrap();
        let tan = analyze(&ax, &norm).unwrap();
        let peak = to.energies().iter().copied().fold(0.0, f64::max);
        for (e, ea) in to.energies().iter().zip(tao.energies()) {
            if *e > 1e-9 * peak {
                scale_err = scale_err.max((ea - a * a * e).abs() / (a * a * e));
            }
        }
        masks_equal &= tn.active_frames() == tan.active_frames();
        let base = all_metrics(&to, &tn);
        for (u, v) in base.iter().zip(all_metrics(&tao, &tan)) {
            metric_err = metric_err.max((u - v).abs() / u);
        }
        let mut perm: Vec<usize> = (0..to.num_frames()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let shuffled = all_metrics(&permuted(&to, &perm), &permuted(&tn, &perm));
        for (u, v) in base.iter().zip(shuffled) {
            perm_err = perm_err.max((u - v).abs() / u);
        }
        let again = analyze(&x, &norm).unwrap();
        deterministic &= again.energies().iter().zip(tn.energies()).all(|(a, b)| a.to_bits() == b.to_bits())
            && again.active_frames() == tn.active_frames();
    }
    verdict(
        2,
        "pipeline invariants",
        &[
            ("amplitude law 1e-9", scale_err <= 1e-9),
            ("metric scale invariance", metric_err <= 1e-9 && masks_equal),
            ("frame permutation", perm_err <= 1e-9),
            ("bit determinism", deterministic),
        ],
        &format!("scale {scale_err:.1e}, metric {metric_err:.1e}, permutation {perm_err:.1e}"),
        start,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_3_decay_oracle() {
    let _turn = exclusive();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for tau in [0.05, 0.1, 0.15] {
        let mean: f64 = (0..10)
            .map(|seed| schroeder_rt60(&synth_exponential_rir(tau, 16000, 10.0 * tau, seed).unwrap()).unwrap())
            .sum::<f64>()
            / 10.0;
        worst = worst.max((mean / (6.908 * tau) - 1.0).abs());
    }
    let mut h = vec![0.0; 16000];
    h[0] = 1.0;
    h[800] = 0.5;
    let two = Rir::new(h, 16000, RirMeta::External { source: "two-impulse".into() }).unwrap();
    let d = match drr(&two).unwrap() {
        Drr::Db(d) => d,
        Drr::DirectOnly => f64::NAN,
    };
    let expect = 10.0 * 4f64.log10();
    verdict(
        3,
        "decay oracle",
        &[("rt60 within 10%", worst <= 0.10), ("two-impulse drr 0.01 dB", (d - expect).abs() <= 0.01)],
        &format!("worst rt60 deviation {:.1}%, drr {d:.4} dB", 100.0 * worst),
        start,
        Duration::from_secs(10),
    );
}

fn sse(x: &[f64], y: &[f64], b0: f64, b1: f64) -> f64 {
    x.iter().zip(y).map(|(xi, yi)| (yi - (b0 + b1 * xi).exp()).powi(2)).sum()
}

#[test]
fn criterion_4_glm_correctness() {
    let _turn = exclusive();
    let start = Instant::now();
    let xs = [0.0, 1.0, 2.0, 3.0];
    let ys: Vec<f64> = xs.iter().map(|v: &f64| (1.0 + 0.5 * v).exp()).collect();
    let rows: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
    let exact = fit_glm_log(&rows, &ys).unwrap();
    let exact_ok = (exact.coeffs[0] - 1.0).abs() < 1e-6 && (exact.coeffs[1] - 0.5).abs() < 1e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..3.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| ((0.8 + 0.4 * v).exp() * (1.0 + 0.1 * rng.random_range(-1.0..1.0))).max(0.01))
        .collect();
    let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    let fit = fit_glm_log(&rows, &y).unwrap();
    let monotone = fit.deviance_history.windows(2).all(|w| w[1] <= w[0]);
    let (b0, b1) = (fit.coeffs[0], fit.coeffs[1]);
    let h = 1e-6;
    let g0 = (sse(&x, &y, b0 + h, b1) - sse(&x, &y, b0 - h, b1)) / (2.0 * h);
    let g1 = (sse(&x, &y, b0, b1 + h) - sse(&x, &y, b0, b1 - h)) / (2.0 * h);
    let grad = (g0 * g0 + g1 * g1).sqrt() / sse(&x, &y, b0, b1);

    // Brute-force oracle: a 400x400 grid, then a 400x400 zoom over three
    // coarse steps around its best point.
    let grid = |lo0: f64, hi0: f64, lo1: f64, hi1: f64| {
        let n = 400;
        let (s0, s1) = ((hi0 - lo0) / (n - 1) as f64, (hi1 - lo1) / (n - 1) as f64);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let (c0, c1) = (lo0 + i as f64 * s0, lo1 + j as f64 * s1);
                let s = sse(&x, &y, c0, c1);
                if s < best.0 {
                    best = (s, c0, c1);
                }
            }
        }
        (best, s0, s1)
    };
    let (coarse, s0, s1) = grid(0.3, 1.3, 0.1, 0.7);
    let (best, _, _) = grid(coarse.1 - 3.0 * s0, coarse.1 + 3.0 * s0, coarse.2 - 3.0 * s1, coarse.2 + 3.0 * s1);
    let grid_ok = sse(&x, &y, b0, b1) <= best.0 && (b0 - best.1).abs() <= s0 && (b1 - best.2).abs() <= s1;
    verdict(
        4,
        "GLM correctness",
        &[
            ("exact recovery 1e-6", exact_ok),
            ("monotone deviance", monotone),
            ("gradient < 1e-4", grad < 1e-4),
            ("grid-search agreement", grid_ok),
        ],
        &format!("coeffs ({b0:.5}, {b1:.5}) vs grid ({:.5}, {:.5}), relative gradient {grad:.1e}", best.1, best.2),
        start,
        Duration::from_secs(10),
    );
}

const GRID: [f64; 5] = [0.25, 0.45, 0.65, 0.85, 1.05];

fn reverberate(dry: &AudioClip, rt60: f64, seed: u64) -> (AudioClip, f64) {
    let rir = synth_exponential_rir(rt60 / 6.908, 16000, 1.5 * rt60 + 0.1, seed).unwrap();
    let wet = convolve(dry, &rir);
    let trimmed = AudioClip::mono(wet.channel(0)[..dry.len()].to_vec(), 16000).unwrap();
    (trimmed, schroeder_rt60(&rir).unwrap())
}

fn nsrmr_of(clip: &AudioClip) -> f64 {
    let clip = normalize_to(clip, -26.0).unwrap().clip;
    metrics::srmr(&analyze(&clip, &PipelineConfig::normalized()).unwrap()).unwrap()
}

#[test]
fn criterion_5_monotonicity() {
    let _turn = exclusive();
    let start = Instant::now();
    let dry = probe::speech_like_clip(8.0, 16000, 505);
    let fixed: Vec<f64> = GRID.iter().map(|&rt| nsrmr_of(&reverberate(&dry, rt, 77).0)).collect();
    let strictly = fixed.windows(2).all(|w| w[1] < w[0]);

    use rayon::prelude::*;
    let pairs: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let dry = probe::speech_like_clip(8.0, 16000, 5000 + i);
            let (wet, rt) = reverberate(&dry, GRID[(i % 5) as usize], 9000 + i);
            (nsrmr_of(&wet), rt)
        })
        .collect();
    let (v, rt): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let rho = spearman(&v, &rt).unwrap();
    verdict(
        5,
        "NSRMR decreases with RT60",
        &[("strictly decreasing on fixed probe", strictly), ("spearman <= -0.85", rho <= -0.85)],
        &format!("fixed-probe NSRMR {fixed:.3?}, spearman {rho:.3}"),
        start,
        Duration::from_secs(180),
    );
}

fn clean_or_20(snr: Option<f64>) -> bool {
    snr.is_none_or(|s| s >= 20.0)
}

#[test]
fn criterion_6_scaled_replication() {
    let _turn = exclusive();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let plan = SynthPlan {
        include_clean: true,
        rirs_per_level: 20,
        seed: 606,
        ..SynthPlan::default()
    };
    let records = synthesize(&plan, dir.path()).unwrap();
    let manifest = Manifest::read(dir.path().join("manifest.jsonl")).unwrap();
    let exp = ExperimentPlan {
        variants: vec![Variant::Nsrmr, Variant::NsrmrStar, Variant::Osrmr],
        targets: vec![Target::Rt60, Target::Drr],
        channel_strategy: ChannelStrategy::Single,
        split_seed: 6,
        train_fraction: 0.8,
    };
    let table = FeatureTable::extract(&manifest, &exp.variants, &AnalysisConfigs::default()).unwrap();
    let report = run_with_features(&table, &exp).unwrap();
    let sub = |v, t| report.subset(v, t, |p| clean_or_20(p.snr_db)).unwrap();
    let nsrmr = sub(Variant::Nsrmr, Target::Rt60);
    let star = sub(Variant::NsrmrStar, Target::Rt60);
    let drr = sub(Variant::Osrmr, Target::Drr);
    let (pn, ps, pd) = (nsrmr.pearson.unwrap_or(f64::NAN), star.pearson.unwrap_or(f64::NAN), drr.pearson.unwrap_or(f64::NAN));
    let grid_ok = records.iter().all(|r| {
        GRID.iter().any(|g| (r.true_rt60_s / g - 1.0).abs() <= 0.15)
    });
    let pooled = |v, t| report.row("all", v, t).and_then(|r| r.pearson).unwrap_or(f64::NAN);
    verdict(
        6,
        "scaled end-to-end replication",
        &[
            (">= 150 utterances", records.len() >= 150),
            ("rooms on the RT60 grid", grid_ok),
            ("rt60 pearson >= 0.8", pn >= 0.8),
            ("rt60 rmse <= 0.20 s", nsrmr.rmse <= 0.20),
            ("nsrmr* pearson >= nsrmr - 0.05", ps >= pn - 0.05),
            ("drr pearson >= 0.6", pd >= 0.6),
        ],
        &format!(
            "{} utterances, {} test; clean+20 dB: NSRMR r={pn:.3} rmse={:.3}s, NSRMR* r={ps:.3} rmse={:.3}s, OSRMR DRR r={pd:.3} rmse={:.2}dB; pooled r: {:.3}/{:.3}/{:.3}",
            records.len(),
            report.n_test,
            nsrmr.rmse,
            star.rmse,
            drr.rmse,
            pooled(Variant::Nsrmr, Target::Rt60),
            pooled(Variant::NsrmrStar, Target::Rt60),
            pooled(Variant::Osrmr, Target::Drr),
        ),
        start,
        Duration::from_secs(900),
    );
}

fn relabel(report: &EvalReport) -> String {
    let mut rows = report.rows.clone();
    for r in rows.iter_mut() {
        r.condition = r.condition.replace("ch=2", "ch=1");
    }
    let preds: Vec<(String, u64, u64)> = report
        .predictions
        .iter()
        .map(|p| (p.utterance_id.clone(), p.estimate.to_bits(), p.truth.to_bits()))
        .collect();
    serde_json::to_string(&(rows, preds, &report.models)).unwrap()
}

#[test]
fn criterion_7_multichannel() {
    let _turn = exclusive();
    let start = Instant::now();
    let base = SynthPlan {
        rirs_per_level: 6,
        utterance_s: 3.0,
        seed: 707,
        ..SynthPlan::default()
    };
    let exp = ExperimentPlan {
        variants: vec![Variant::Nsrmr, Variant::Osrmr],
        targets: vec![Target::Rt60, Target::Drr],
        channel_strategy: ChannelStrategy::FeatureAverage,
        split_seed: 7,
        train_fraction: 0.8,
    };
    let configs = AnalysisConfigs::default();
    let run = |plan: &SynthPlan| {
        let dir = tempfile::tempdir().unwrap();
        synthesize(plan, dir.path()).unwrap();
        let manifest = Manifest::read(dir.path().join("manifest.jsonl")).unwrap();
        FeatureTable::extract(&manifest, &exp.variants, &configs).unwrap()
    };
    let mono = run(&base);
    let dup = run(&SynthPlan { channels: 2, duplicate_channels: true, ..base.clone() });
    let identical = relabel(&run_with_features(&mono, &exp).unwrap()) == relabel(&run_with_features(&dup, &exp).unwrap());

    let stereo = run(&SynthPlan { channels: 2, ..base.clone() });
    let fa = run_with_features(&stereo, &exp).unwrap();
    let pa = run_with_features(&stereo, &ExperimentPlan { channel_strategy: ChannelStrategy::ParameterAverage, ..exp.clone() }).unwrap();
    let ev = |r: &EvalReport, t| r.row("all", Variant::Nsrmr, t).unwrap().err_var;
    let (fa_rt, pa_rt) = (ev(&fa, Target::Rt60), ev(&pa, Target::Rt60));
    let (fa_drr, pa_drr) = (
        fa.row("all", Variant::Osrmr, Target::Drr).unwrap().err_var,
        pa.row("all", Variant::Osrmr, Target::Drr).unwrap().err_var,
    );
    verdict(
        7,
        "multi-channel consistency",
        &[("duplicate channels match mono", identical), ("feature-average err var <= parameter-average", fa_rt <= pa_rt)],
        &format!(
            "NSRMR RT60 err var: feature-average {fa_rt:.5}, parameter-average {pa_rt:.5}; OSRMR DRR: {fa_drr:.4} vs {pa_drr:.4}"
        ),
        start,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_8_level_meter() {
    let _turn = exclusive();
    let start = Instant::now();
    let sine = AudioClip::mono((0..32000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect(), 16000).unwrap();
    let unit = active_speech_level(&sine).unwrap().active_level;
    let mut worst_norm = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for p in 0..5 {
        let clip = probe::speech_like_clip(2.0, 16000, 800 + p).scaled(rng.random_range(0.01..1.5));
        let target = rng.random_range(-40.0..-15.0);
        let out = normalize_to(&clip, target).unwrap();
        let got = active_speech_level(&out.clip).unwrap().active_level;
        worst_norm = worst_norm.max((got - target).abs());
    }
    let mut worst_identity = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lhs = rmse(&e, &t).unwrap().powi(2);
        let rhs = error_variance(&e, &t).unwrap() + bias(&e, &t).unwrap().powi(2);
        worst_identity = worst_identity.max((lhs - rhs).abs());
    }
    verdict(
        8,
        "level meter",
        &[
            ("unit sine -3.01 +- 0.1", (unit + 3.01).abs() <= 0.1),
            ("normalize within 0.2 dB", worst_norm <= 0.2),
            ("rmse identity 1e-12", worst_identity <= 1e-12),
        ],
        &format!("unit sine {unit:.3} dBov, worst normalization error {worst_norm:.3} dB, identity {worst_identity:.1e}"),
        start,
        Duration::from_secs(5),
    );
}
