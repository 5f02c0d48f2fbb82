//! Four-way attack comparison on the synthetic world: conversion with each
//! decoder, post-hoc perturbation of vanilla outputs, success rates and
//! Gaussian Fréchet distances, and the CSV / markdown report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_utterance, SpeakerClassifier};
use crate::decoder::{convert, DecoderParams};
use crate::diffusion::{NoiseSchedule, ReverseConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::pgd::{pgd_attack_batch, BudgetStats, PgdConfig};
use crate::rng::stream;
use crate::world::Utterance;

pub const REPORT_FORMAT_VERSION: u32 = 1;
const SHRINKAGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Vanilla,
    SpkConstraint,
    AdvConstraint,
    DirectPerturb,
}

impl MethodId {
    /// Report order.
    pub const ALL: [MethodId; 4] =
        [MethodId::Vanilla, MethodId::SpkConstraint, MethodId::AdvConstraint, MethodId::DirectPerturb];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Vanilla => "vanilla",
            MethodId::SpkConstraint => "spk_constraint",
            MethodId::AdvConstraint => "adv_constraint",
            MethodId::DirectPerturb => "direct_perturb",
        }
    }

    fn label(self) -> &'static str {
        match self {
            MethodId::Vanilla => "Vanilla",
            MethodId::SpkConstraint => "+ speaker constraint",
            MethodId::AdvConstraint => "+ adversarial constraint",
            MethodId::DirectPerturb => "+ direct perturbation",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Report(format!("unknown method `{s}`")))
    }
}

/// One conversion request: test utterance `utterance` (spoken by `source`)
/// converted to `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPair {
    pub utterance: usize,
    pub source: usize,
    pub target: usize,
}

/// Every utterance paired with up to `targets_per_source` other speakers,
/// taken cyclically after the source (`None` means all of them).
pub fn protocol_pairs(utts: &[Utterance], n_speakers: usize, targets_per_source: Option<usize>) -> Vec<AttackPair> {
    let k = targets_per_source.unwrap_or(n_speakers.saturating_sub(1)).min(n_speakers.saturating_sub(1));
    utts.iter()
        .enumerate()
        .flat_map(|(i, u)| {
            (1..=k).map(move |j| AttackPair { utterance: i, source: u.speaker_id, target: (u.speaker_id + j) % n_speakers })
        })
        .collect()
}

pub fn check_pairs(pairs: &[AttackPair], utts: &[Utterance]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        let utt = utts
            .get(p.utterance)
            .ok_or_else(|| Error::Protocol(format!("pair {i} names utterance {} of {}", p.utterance, utts.len())))?;
        if utt.speaker_id != p.source {
            return Err(Error::Protocol(format!("pair {i}: source {} but utterance is by {}", p.source, utt.speaker_id)));
        }
        if p.target == p.source {
            return Err(Error::Protocol(format!("pair {i}: target equals source speaker {}", p.source)));
        }
    }
    Ok(())
}

/// Read-only models shared by every method.
pub struct BenchModels<'a, C: SpeakerClassifier + ?Sized> {
    pub encoder: &'a EncoderParams,
    pub vanilla: &'a DecoderParams,
    pub spk: Option<&'a DecoderParams>,
    pub adv: Option<&'a DecoderParams>,
    pub classifier: &'a C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub reverse: ReverseConfig,
    pub schedule: NoiseSchedule,
    /// Budget of the post-hoc perturbation.
    pub pgd: PgdConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub pair: AttackPair,
    pub frames: Tensor,
    pub prediction: usize,
    /// Per-frame distance to the vanilla generation drawn with the same noise.
    pub perturb_l2: Vec<f64>,
    pub perturb_linf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: MethodId,
    pub outputs: Vec<Generated>,
    pub budget: BudgetStats,
}

impl MethodRun {
    pub fn predictions(&self) -> Vec<usize> {
        self.outputs.iter().map(|g| g.prediction).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.outputs.iter().map(|g| g.pair.target).collect()
    }
}

fn decoder_for<'a, C: SpeakerClassifier + ?Sized>(
    method: MethodId,
    models: &BenchModels<'a, C>,
) -> Result<&'a DecoderParams> {
    match method {
        MethodId::Vanilla | MethodId::DirectPerturb => Ok(models.vanilla),
        MethodId::SpkConstraint => models.spk.ok_or_else(|| Error::Report("no speaker-constraint decoder".into())),
        MethodId::AdvConstraint => models.adv.ok_or_else(|| Error::Report("no adversarial-constraint decoder".into())),
    }
}

fn row_distances(a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    (0..a.rows())
        .map(|i| {
            let diff = a.row(i).iter().zip(b.row(i)).map(|(x, y)| x - y);
            diff.fold((0.0, 0.0_f64), |(sq, mx), v| (sq + v * v, mx.max(v.abs())))
        })
        .map(|(sq, mx)| (sq.sqrt(), mx))
        .unzip()
}

/// Runs several methods over the same pairs. Pair `i` always draws its
/// conversion noise from stream `(seed, i)`, so every method sees the same
/// noise and the vanilla output of a pair doubles as the reference for the
/// perturbation norms. Pairs are processed in parallel on the current rayon
/// pool; results are independent of the number of threads.
pub fn run_methods<C: SpeakerClassifier + ?Sized>(
    methods: &[MethodId],
    models: &BenchModels<'_, C>,
    utts: &[Utterance],
    pairs: &[AttackPair],
    cfg: &BenchConfig,
) -> Result<Vec<MethodRun>> {
    check_pairs(pairs, utts)?;
    cfg.reverse.validate()?;
    let n_classes = models.classifier.n_classes();
    if let Some(p) = pairs.iter().find(|p| p.target >= n_classes || p.target >= models.vanilla.n_speakers()) {
        return Err(Error::Lookup { kind: "speaker", id: p.target });
    }
    let decoders: Vec<&DecoderParams> = methods.iter().map(|&m| decoder_for(m, models)).collect::<Result<_>>()?;

    let per_pair: Vec<Vec<(Generated, BudgetStats)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let x_src = utts[pair.utterance].x_matrix()?;
            let generate = |decoder: &DecoderParams| {
                let mut rng = stream(cfg.seed, &[i as u64]);
                convert(decoder, models.encoder, &x_src, pair.target, &cfg.reverse, &cfg.schedule, &mut rng)
            };
            let reference = generate(models.vanilla)?;
            methods
                .iter()
                .zip(&decoders)
                .map(|(&method, &decoder)| {
                    let mut budget = BudgetStats::default();
                    let frames = match method {
                        MethodId::Vanilla => reference.clone(),
                        MethodId::DirectPerturb => {
                            let targets = vec![pair.target; reference.rows()];
                            let outcomes = pgd_attack_batch(models.classifier, &reference, &targets, &cfg.pgd)?;
                            let mut frames = reference.clone();
                            for (r, out) in outcomes.iter().enumerate() {
                                budget.record(&out.delta, &cfg.pgd);
                                for (v, d) in frames.row_mut(r).iter_mut().zip(&out.delta) {
                                    *v += d;
                                }
                            }
                            frames
                        }
                        _ => generate(decoder)?,
                    };
                    let prediction = predict_utterance(models.classifier, &frames)?;
                    let (perturb_l2, perturb_linf) = row_distances(&frames, &reference);
                    Ok((Generated { pair: *pair, frames, prediction, perturb_l2, perturb_linf }, budget))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut runs: Vec<MethodRun> =
        methods.iter().map(|&method| MethodRun { method, outputs: vec![], budget: BudgetStats::default() }).collect();
    for row in per_pair {
        for (run, (generated, budget)) in runs.iter_mut().zip(row) {
            run.budget.merge(&budget);
            run.outputs.push(generated);
        }
    }
    Ok(runs)
}

pub fn run_method<C: SpeakerClassifier + ?Sized>(
    method: MethodId,
    models: &BenchModels<'_, C>,
    utts: &[Utterance],
    pairs: &[AttackPair],
    cfg: &BenchConfig,
) -> Result<MethodRun> {
    Ok(run_methods(&[method], models, utts, pairs, cfg)?.remove(0))
}

/// Fraction of predictions equal to their target; zero for no samples.
pub fn attack_success_rate(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "attack_success_rate",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn gaussian_stats(set: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.rows(), set.cols());
    let m = DMatrix::from_row_slice(n, d, set.data());
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0) + DMatrix::identity(d, d) * SHRINKAGE;
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussians fitted to two frame sets
/// (rows are frames). Each set needs more frames than dimensions.
pub fn frechet_gaussian(set_a: &Tensor, set_b: &Tensor) -> Result<f64> {
    let (a, b) = (set_a.as_matrix(), set_b.as_matrix());
    if a.cols() != b.cols() {
        return Err(Error::shape("frechet_gaussian", format!("dims {} and {}", a.cols(), b.cols())));
    }
    let d = a.cols();
    if a.rows() <= d || b.rows() <= d {
        return Err(Error::contract(format!(
            "frechet_gaussian needs at least {} frames per set, got {} and {}",
            d + 1,
            a.rows(),
            b.rows()
        )));
    }
    let (mu_a, cov_a) = gaussian_stats(&a);
    let (mu_b, cov_b) = gaussian_stats(&b);
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Mean over groups of the Fréchet distance between generated frames of a
/// group and the real frames of the matching speaker.
fn grouped_frechet(groups: &BTreeMap<usize, Vec<&[f64]>>, real: &BTreeMap<usize, Tensor>) -> Result<f64> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (speaker, rows) in groups {
        let reference = real.get(speaker).ok_or(Error::Lookup { kind: "speaker", id: *speaker })?;
        total += frechet_gaussian(&Tensor::from_rows(rows)?, reference)?;
    }
    Ok(total / groups.len() as f64)
}

/// Real frames grouped by speaker.
pub fn frames_by_speaker<'a>(utts: impl IntoIterator<Item = &'a Utterance>) -> Result<BTreeMap<usize, Tensor>> {
    let mut rows: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for u in utts {
        rows.entry(u.speaker_id).or_default().extend(u.frames.iter().map(|f| &f.x[..]));
    }
    rows.into_iter().map(|(s, r)| Ok((s, Tensor::from_rows(&r)?))).collect()
}

/// One row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: MethodId,
    pub seed: u64,
    pub n_samples: usize,
    pub acc: f64,
    pub mean_perturb_l2: f64,
    pub mean_perturb_linf: f64,
    pub frechet_to_target: f64,
    pub frechet_to_source: f64,
}

pub fn summarize_run(run: &MethodRun, real: &BTreeMap<usize, Tensor>, seed: u64) -> Result<MethodMetrics> {
    let acc = attack_success_rate(&run.predictions(), &run.targets())?;
    let l2: Vec<f64> = run.outputs.iter().flat_map(|g| g.perturb_l2.iter().copied()).collect();
    let linf: Vec<f64> = run.outputs.iter().flat_map(|g| g.perturb_linf.iter().copied()).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };

    let mut by_target: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    let mut by_source: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for g in &run.outputs {
        for r in 0..g.frames.rows() {
            by_target.entry(g.pair.target).or_default().push(g.frames.row(r));
            by_source.entry(g.pair.source).or_default().push(g.frames.row(r));
        }
    }
    Ok(MethodMetrics {
        method: run.method,
        seed,
        n_samples: run.outputs.len(),
        acc,
        mean_perturb_l2: mean(&l2),
        mean_perturb_linf: mean(&linf),
        frechet_to_target: grouped_frechet(&by_target, real)?,
        frechet_to_source: grouped_frechet(&by_source, real)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<MethodMetrics>,
}

/// Orders rows by seed then method and checks that every seed has all four
/// methods exactly once.
pub fn build_report(config_hash: &str, rows: Vec<MethodMetrics>) -> Result<EvalReport> {
    let mut by_seed: BTreeMap<u64, BTreeMap<MethodId, MethodMetrics>> = BTreeMap::new();
    for row in rows {
        if !(0.0..=1.0).contains(&row.acc) {
            return Err(Error::Report(format!("{} seed {}: rate {} outside [0, 1]", row.method, row.seed, row.acc)));
        }
        let (method, seed) = (row.method, row.seed);
        if by_seed.entry(seed).or_default().insert(method, row).is_some() {
            return Err(Error::Report(format!("duplicate row for {method} seed {seed}")));
        }
    }
    if by_seed.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let mut ordered = vec![];
    for (seed, mut methods) in by_seed {
        for m in MethodId::ALL {
            ordered.push(methods.remove(&m).ok_or_else(|| Error::Report(format!("seed {seed} lacks method {m}")))?);
        }
    }
    Ok(EvalReport { config_hash: config_hash.to_string(), rows: ordered })
}

impl EvalReport {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    pub fn row(&self, method: MethodId, seed: u64) -> Option<&MethodMetrics> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed)
    }

    /// Median over seeds of a metric for one method.
    pub fn median(&self, method: MethodId, metric: impl Fn(&MethodMetrics) -> f64) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(metric).collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    /// Difference of median success rates in percentage points.
    pub fn acc_gap_points(&self, better: MethodId, baseline: MethodId) -> f64 {
        100.0 * (self.median(better, |r| r.acc) - self.median(baseline, |r| r.acc))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?)
            .map_err(|e| Error::Report(e.to_string()))?;
        Ok(format!(
            "# diffattack-report format_version={REPORT_FORMAT_VERSION} config_hash={}\n{body}",
            self.config_hash
        ))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        let mut version = None;
        let mut config_hash = None;
        for field in first.strip_prefix("# diffattack-report").unwrap_or_default().split_whitespace() {
            match field.split_once('=') {
                Some(("format_version", v)) => version = v.parse::<u32>().ok(),
                Some(("config_hash", v)) => config_hash = Some(v.to_string()),
                _ => {}
            }
        }
        match version {
            Some(REPORT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::format(1, format!("report format_version {v}, expected {REPORT_FORMAT_VERSION}")))
            }
            None => return Err(Error::format(1, "missing report header with format_version")),
        }
        let config_hash = config_hash.ok_or_else(|| Error::format(1, "missing config_hash in report header"))?;
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::format(i + 3, e.to_string())))
            .collect::<Result<Vec<MethodMetrics>>>()?;
        build_report(&config_hash, rows)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Method | Seed | N | Acc (%) | Perturb L2 | Perturb Linf | Fréchet to target | Fréchet to source |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.method.label(),
                r.seed,
                r.n_samples,
                100.0 * r.acc,
                r.mean_perturb_l2,
                r.mean_perturb_linf,
                r.frechet_to_target,
                r.frechet_to_source
            ));
        }
        out.push_str("\nMedian over seeds:\n\n| Method | Acc (%) | Fréchet to target |\n|---|---:|---:|\n");
        for m in MethodId::ALL {
            out.push_str(&format!(
                "| {} | {:.2} | {:.4} |\n",
                m.label(),
                100.0 * self.median(m, |r| r.acc),
                self.median(m, |r| r.frechet_to_target)
            ));
        }
        out.push_str(&format!(
            "\nAdversarial constraint over vanilla: {:+.2} points\n",
            self.acc_gap_points(MethodId::AdvConstraint, MethodId::Vanilla)
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Frame;

    fn utt(speaker_id: usize) -> Utterance {
        Utterance { speaker_id, frames: vec![Frame { x: vec![0.0], xbar0: vec![0.0], c: vec![0.0] }] }
    }

    fn metrics(method: MethodId, seed: u64, acc: f64) -> MethodMetrics {
        MethodMetrics {
            method,
            seed,
            n_samples: 10,
            acc,
            mean_perturb_l2: 0.1,
            mean_perturb_linf: 0.05,
            frechet_to_target: 1.0 / 3.0,
            frechet_to_source: 2.5,
        }
    }

    #[test]
    fn success_rate_arithmetic() {
        let targets: Vec<usize> = (0..1000).map(|i| i % 7).collect();
        let preds: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| if i < 657 { t } else { t + 1 }).collect();
        assert!((attack_success_rate(&preds, &targets).unwrap() - 0.657).abs() < 1e-12);
        assert_eq!(attack_success_rate(&targets, &targets).unwrap(), 1.0);
        assert!(attack_success_rate(&preds[1..], &targets).is_err());
        assert_eq!(attack_success_rate(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn pairs_never_target_the_source() {
        let utts: Vec<Utterance> = (0..4).map(utt).collect();
        let pairs = protocol_pairs(&utts, 4, None);
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|p| p.target != p.source));
        check_pairs(&pairs, &utts).unwrap();
        assert_eq!(protocol_pairs(&utts, 4, Some(1)).len(), 4);
        let bad = [AttackPair { utterance: 1, source: 1, target: 1 }];
        assert!(matches!(check_pairs(&bad, &utts), Err(Error::Protocol(_))));
    }

    #[test]
    fn report_needs_all_methods() {
        let rows: Vec<MethodMetrics> = MethodId::ALL[..3].iter().map(|&m| metrics(m, 0, 0.5)).collect();
        assert!(matches!(build_report("h", rows), Err(Error::Report(_))));
    }

    #[test]
    fn report_csv_round_trip() {
        let rows: Vec<MethodMetrics> = [7u64, 3]
            .iter()
            .flat_map(|&s| MethodId::ALL.iter().rev().map(move |&m| metrics(m, s, 0.1 * (m as usize) as f64)))
            .collect();
        let report = build_report("abc", rows).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert_eq!(report.rows[0].seed, 3);
        assert_eq!(report.rows[0].method, MethodId::Vanilla);
        let csv = report.to_csv().unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with(
            "method,seed,n_samples,acc,mean_perturb_l2,mean_perturb_linf,frechet_to_target,frechet_to_source"
        ));
        assert_eq!(EvalReport::from_csv(&csv).unwrap(), report);
        assert!(EvalReport::from_csv(&csv.replace("format_version=1", "format_version=2")).is_err());
        assert!(report.to_markdown().contains("+ adversarial constraint"));
    }

    #[test]
    fn median_and_gap() {
        let rows: Vec<MethodMetrics> = [0u64, 1, 2]
            .iter()
            .flat_map(|&s| {
                MethodId::ALL.iter().map(move |&m| metrics(m, s, if m == MethodId::AdvConstraint { 0.3 + 0.1 * s as f64 } else { 0.2 }))
            })
            .collect();
        let report = build_report("h", rows).unwrap();
        assert!((report.acc_gap_points(MethodId::AdvConstraint, MethodId::Vanilla) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_small_sets() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(frechet_gaussian(&a, &a), Err(Error::Contract(_))));
    }
}
