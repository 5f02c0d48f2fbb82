//! Acceptance criteria A1–A9. Each test prints one `A<n> PASS|FAIL` line
//! with the measured numbers before asserting.
//!
//! The pipeline criteria (A4–A7, A9) run the release pipeline through the
//! `diffattack` binary on `configs/default.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use diffattack_core::bench::{EvalReport, MethodId};
use diffattack_core::checkpoint::Checkpoint;
use diffattack_core::classifier::{evaluate_classifier, AlwaysTarget, ClassifierParams, SpeakerClassifier};
use diffattack_core::decoder::{
    train_decoder, training_objective, Batch, DecoderHyper, DecoderParams, DiffusedTerms, TrainVariant,
};
use diffattack_core::diffusion::{
    forward_sample, kernel_mean, reverse_integrate, NoiseSchedule, ReverseConfig, DEFAULT_T_MIN,
};
use diffattack_core::grad::{argmax, MlpParams, MlpVars, Tape, Tensor, Var};
use diffattack_core::pgd::{BudgetStats, PgdConfig};
use diffattack_core::rng::{normal, normal_vec, seeded};
use diffattack_core::world::{generate_world, make_dataset, Dataset, WorldConfig};
use nalgebra::DMatrix;
use rand::Rng;
use serde_json::Value;
use tempfile::TempDir;

const DEFAULT_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
const SEEDS: [u64; 3] = [0, 1, 2];

fn criterion(id: &str, ok: bool, detail: String) {
    println!("{id} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id} failed: {detail}");
}

fn run_cli(args: &[&str], out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_diffattack"))
        .args(args)
        .arg("--config")
        .arg(DEFAULT_CONFIG)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "diffattack {args:?} exited with {status}");
}

// ---------------------------------------------------------------- A1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Coordinates probed per tensor; all of them for small tensors.
const FD_PROBES: usize = 48;

/// Largest relative error between taped gradients and central differences
/// of `f` over (a sample of) every coordinate of the tensors in `params`.
fn fd_error<P: Clone>(
    params: &P,
    analytic: &[Tensor],
    tensors_mut: fn(&mut P) -> Vec<&mut Tensor>,
    f: impl Fn(&P) -> f64,
    seed: u64,
) -> f64 {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> =
            if n <= FD_PROBES { (0..n).collect() } else { (0..FD_PROBES).map(|_| rng.random_range(0..n)).collect() };
        for j in coords {
            let orig = tensors_mut(&mut probe)[k].data()[j];
            tensors_mut(&mut probe)[k].data_mut()[j] = orig + FD_STEP;
            let up = f(&probe);
            tensors_mut(&mut probe)[k].data_mut()[j] = orig - FD_STEP;
            let down = f(&probe);
            tensors_mut(&mut probe)[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn random_sizes<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    std::iter::once(d_in).chain((0..depth).map(|_| rng.random_range(1..=64))).chain([d_out]).collect()
}

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols)).unwrap()
}

fn single(t: &mut Tensor) -> Vec<&mut Tensor> {
    vec![t]
}

fn mlp_grads(mlp: &MlpParams, loss: impl for<'t> Fn(&MlpParams, &'t Tape, &MlpVars<'t>) -> Var<'t>) -> Vec<Tensor> {
    let tape = Tape::new();
    let vars = mlp.register(&tape);
    let l = loss(mlp, &tape, &vars);
    let grads = tape.backward(l).unwrap();
    vars.vars().into_iter().map(|v| grads.wrt(v)).collect()
}

#[test]
fn a1_autodiff_matches_finite_differences() {
    let sched = NoiseSchedule::default();
    let mut errors: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let slot = errors.entry(name).or_insert(0.0);
        *slot = slot.max(e);
    };
    for trial in 0..4u64 {
        let mut rng = seeded(100 + trial);
        let (d, c, n) = (6, 5, 4);
        let x = random_tensor(&mut rng, n, d);
        let y = random_tensor(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();

        // encoder regression
        let enc = MlpParams::init(&random_sizes(&mut rng, d, d), &mut rng).unwrap();
        let g = mlp_grads(&enc, |m, tape, vars| m.forward_tape(vars, tape.leaf(x.clone())).unwrap().mse(tape.leaf(y.clone())).unwrap());
        let mse = |m: &MlpParams| {
            let tape = Tape::new();
            let vars = m.register(&tape);
            let loss = m.forward_tape(&vars, tape.leaf(x.clone())).unwrap().mse(tape.leaf(y.clone())).unwrap().value().item();
            loss
        };
        note("encoder mse", fd_error(&enc, &g, MlpParams::tensors_mut, mse, trial));

        // classifier cross-entropy wrt weights
        let clf = ClassifierParams { mlp: MlpParams::init(&random_sizes(&mut rng, d, c), &mut rng).unwrap() };
        let g = mlp_grads(&clf.mlp, |m, tape, vars| m.forward_tape(vars, tape.leaf(x.clone())).unwrap().cross_entropy(&labels).unwrap());
        let ce = |m: &MlpParams| {
            let tape = Tape::new();
            let vars = m.register(&tape);
            let loss = m.forward_tape(&vars, tape.leaf(x.clone())).unwrap().cross_entropy(&labels).unwrap().value().item();
            loss
        };
        note("classifier ce", fd_error(&clf.mlp, &g, MlpParams::tensors_mut, ce, trial));

        // attack loss wrt the input
        let attack = |xs: &Tensor| {
            let tape = Tape::new();
            let loss = clf.logits_on_tape(tape.leaf(xs.clone())).unwrap().cross_entropy_sum(&labels).unwrap().value().item();
            loss
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let l = clf.logits_on_tape(xv).unwrap().cross_entropy_sum(&labels).unwrap();
        let gx = tape.backward(l).unwrap().wrt(xv);
        note("attack input ce", fd_error(&x, &[gx], single, attack, trial));

        // decoder objectives
        let hidden = random_sizes(&mut rng, 1, 1)[1..].to_vec();
        let hidden = hidden[..hidden.len() - 1].to_vec();
        let hyper = DecoderHyper { hidden, e_dim: rng.random_range(1..=8), ..Default::default() };
        let dec = DecoderParams::init(d, c, &hyper, &mut rng).unwrap();
        let batch = Batch { x0: x.clone(), xbar0: random_tensor(&mut rng, n, d), speakers: labels.clone() };
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(DEFAULT_T_MIN..=1.0)).collect();
        let lambda: Vec<f64> = t.iter().map(|&ti| sched.lambda_at(ti).unwrap()).collect();
        let x_t = random_tensor(&mut rng, n, d);
        let target = random_tensor(&mut rng, n, d);
        let terms = DiffusedTerms { x_t: &x_t, target: &target, lambda: &lambda, t: &t };
        for (name, w_spk) in [("decoder dsm", None), ("decoder dsm + speaker ce", Some(0.7))] {
            let value = |p: &DecoderParams| {
                let tape = Tape::new();
                let vars = p.register(&tape);
                let loss = training_objective(p, &vars, &terms, &batch, &clf, w_spk, &sched).unwrap().total.value().item();
                loss
            };
            let tape = Tape::new();
            let vars = dec.register(&tape);
            let obj = training_objective(&dec, &vars, &terms, &batch, &clf, w_spk, &sched).unwrap();
            let grads = tape.backward(obj.total).unwrap();
            let g: Vec<Tensor> = vars.vars().into_iter().map(|v| grads.wrt(v)).collect();
            note(name, fd_error(&dec, &g, DecoderParams::tensors_mut, value, trial));
        }
    }
    let worst = errors.values().cloned().fold(0.0, f64::max);
    criterion("A1", worst < FD_TOL, format!("max relative error {worst:.2e} (limit {FD_TOL:.0e}) over {errors:?}"));
}

// ---------------------------------------------------------------- A2

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// The mean is held to 1% of `max(|μ|, sd)`: near `t = 1` the mean itself
/// is ~0 and the kernel's spread is the natural scale.
fn mean_tolerance(mu: f64, lambda: f64, frac: f64) -> f64 {
    frac * mu.abs().max(lambda.sqrt())
}

#[test]
fn a2_forward_kernel_matches_closed_form_and_path_simulation() {
    let sched = NoiseSchedule::default();
    let x0 = Tensor::vector(vec![1.0, -2.0]);
    let xbar0 = Tensor::vector(vec![0.0, 0.5]);
    let n = 100_000;
    let times = [0.1, 0.5, 1.0];
    let mut lines = vec![];
    let mut ok = true;
    let mut rng = seeded(21);
    for &t in &times {
        let mu = kernel_mean(&x0, &xbar0, t, &sched).unwrap();
        let lambda = sched.lambda_at(t).unwrap();
        let mut cols: Vec<Vec<f64>> = (0..2).map(|_| Vec::with_capacity(n)).collect();
        for _ in 0..n {
            let draw = forward_sample(&x0, &xbar0, t, DEFAULT_T_MIN, &sched, &mut rng).unwrap();
            cols[0].push(draw.x_t.data()[0]);
            cols[1].push(draw.x_t.data()[1]);
        }
        for (k, col) in cols.iter().enumerate() {
            let (m, v) = moments(col);
            let mu_k = mu.data()[k];
            let good = (m - mu_k).abs() < mean_tolerance(mu_k, lambda, 0.01) && (v - lambda).abs() < 0.01 * lambda;
            ok &= good;
            lines.push(format!("t={t} dim{k}: mean {m:.4}/{mu_k:.4} var {v:.4}/{lambda:.4}"));
        }
    }

    // Euler–Maruyama paths of the forward SDE, 10³ steps on [0, 1]
    let (paths, steps) = (n, 1000);
    let h = 1.0 / steps as f64;
    let (a, b) = (1.0, 0.0);
    let checkpoints: Vec<usize> = times.iter().map(|t| (t / h).round() as usize).collect();
    let mut snaps: Vec<Vec<f64>> = times.iter().map(|_| Vec::with_capacity(paths)).collect();
    let betas: Vec<f64> = (0..steps).map(|i| sched.beta_at(i as f64 * h).unwrap()).collect();
    for _ in 0..paths {
        let mut x = a;
        for (i, &beta) in betas.iter().enumerate() {
            x += 0.5 * beta * (b - x) * h + (beta * h).sqrt() * normal(&mut rng);
            if let Some(c) = checkpoints.iter().position(|&c| c == i + 1) {
                snaps[c].push(x);
            }
        }
    }
    for (c, &t) in times.iter().enumerate() {
        let mu = kernel_mean(&Tensor::vector(vec![a]), &Tensor::vector(vec![b]), t, &sched).unwrap().item();
        let lambda = sched.lambda_at(t).unwrap();
        let (m, v) = moments(&snaps[c]);
        // four standard errors of the Monte-Carlo estimates
        let mean_se = (lambda / paths as f64).sqrt();
        let var_se = lambda * (2.0 / (paths as f64 - 1.0)).sqrt();
        let good = (m - mu).abs() < 4.0 * mean_se && (v - lambda).abs() < 4.0 * var_se;
        ok &= good;
        lines.push(format!("EM t={t}: mean {m:.4}/{mu:.4} var {v:.4}/{lambda:.4}"));
    }
    criterion("A2", ok, lines.join("; "));
}

// ---------------------------------------------------------------- A3

#[test]
fn a3_reverse_sampler_recovers_gaussian_data() {
    let sched = NoiseSchedule::default();
    let (m0, v0, xbar0) = (2.0, 0.25, 0.5);
    let n = 10_000;
    let score = |x: &Tensor, t: f64| {
        let decay = (-sched.noise_integral(t)?).exp();
        let mean = xbar0 + (m0 - xbar0) * decay.sqrt();
        let var = v0 * decay + sched.lambda_at(t)?;
        Ok(x.map(|v| -(v - mean) / var))
    };
    let xb = Tensor::vector(vec![xbar0; n]);
    let cfg = ReverseConfig { n_steps: 100, stochastic: true, t_min: DEFAULT_T_MIN };
    let out = reverse_integrate(score, &xb, &cfg, &sched, &mut seeded(31), None).unwrap();
    let (m, v) = moments(out.data());
    let ok = (m - m0).abs() < 0.05 * m0 && (v - v0).abs() < 0.05 * v0;
    criterion("A3", ok, format!("mean {m:.4} (data {m0}), variance {v:.4} (data {v0})"));
}

// ---------------------------------------------------------------- A4

/// Softmax regression by full-batch gradient descent; utterance accuracy
/// with mean-pooled logits.
fn logistic_oracle_accuracy(ds: &Dataset) -> f64 {
    let train = ds.train_frames().unwrap();
    let (n, d, c) = (train.len(), train.x.cols(), ds.world.n_speakers());
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { train.x.row(i)[j] } else { 1.0 });
    let y = DMatrix::from_fn(n, c, |i, k| if train.speakers[i] == k { 1.0 } else { 0.0 });
    let mut w = DMatrix::<f64>::zeros(d + 1, c);
    for _ in 0..500 {
        let mut p = &x * &w;
        for mut row in p.row_iter_mut() {
            let m = row.max();
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s = row.sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        w -= x.transpose() * (p - &y) * (0.5 / n as f64);
    }
    let hits = ds
        .test
        .iter()
        .filter(|u| {
            let f = u.x_matrix().unwrap();
            let xf = DMatrix::from_fn(f.rows(), d + 1, |i, j| if j < d { f.row(i)[j] } else { 1.0 });
            let pooled: Vec<f64> = (&xf * &w).row_mean().iter().copied().collect();
            argmax(&pooled) == u.speaker_id
        })
        .count();
    hits as f64 / ds.test.len() as f64
}

#[test]
fn a4_classifier_reaches_held_out_accuracy() {
    let dir = TempDir::new().unwrap();
    run_cli(&["world"], dir.path());
    run_cli(&["train-classifier"], dir.path());
    let ds = Dataset::from_jsonl(&fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap()).unwrap();
    let ck = Checkpoint::from_json(&fs::read_to_string(dir.path().join("classifier.ckpt.json")).unwrap()).unwrap();
    let clf = ClassifierParams::from_checkpoint(&ck).unwrap();
    let acc = evaluate_classifier(&clf, &ds.test).unwrap().utterance_accuracy;
    let oracle = logistic_oracle_accuracy(&ds);
    criterion(
        "A4",
        acc >= 0.95 && oracle >= 0.95,
        format!("classifier utterance accuracy {acc:.4}, logistic oracle {oracle:.4} (both need >= 0.95)"),
    );
}

// ---------------------------------------------------------- A5 / A6 / A7

struct Pipeline {
    _dirs: Vec<TempDir>,
    outs: Vec<PathBuf>,
    report: EvalReport,
}

fn pipeline() -> &'static Pipeline {
    static CELL: OnceLock<Pipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut dirs = vec![];
        let mut outs = vec![];
        let mut rows = vec![];
        let mut hash = String::new();
        for seed in SEEDS {
            let dir = TempDir::new().unwrap();
            let out = dir.path().join("run");
            run_cli(&["all", "--seed", &seed.to_string()], &out);
            let report = EvalReport::from_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
            hash = report.config_hash.clone();
            rows.extend(report.rows);
            outs.push(out);
            dirs.push(dir);
        }
        let report = diffattack_core::bench::build_report(&hash, rows).unwrap();
        println!("{}", report.to_markdown());
        Pipeline { _dirs: dirs, outs, report }
    })
}

#[test]
fn a5_attack_success_ordering() {
    let p = pipeline();
    let acc = |m| 100.0 * p.report.median(m, |r| r.acc);
    let (v, s, a, d) =
        (acc(MethodId::Vanilla), acc(MethodId::SpkConstraint), acc(MethodId::AdvConstraint), acc(MethodId::DirectPerturb));
    let gap = a - v;
    let ok = v < s && s < a && a <= d && gap >= 15.0;
    criterion(
        "A5",
        ok,
        format!("median acc % vanilla {v:.2}, spk {s:.2}, adv {a:.2}, direct {d:.2}; adv - vanilla {gap:.2} points (need >= 15)"),
    );
}

#[test]
fn a6_adversarial_training_beats_direct_perturbation_on_quality() {
    let p = pipeline();
    let adv = p.report.median(MethodId::AdvConstraint, |r| r.frechet_to_target);
    let direct = p.report.median(MethodId::DirectPerturb, |r| r.frechet_to_target);
    criterion("A6", adv <= direct, format!("median Fréchet to target: adv {adv:.4}, direct {direct:.4}"));
}

#[test]
fn a7_perturbations_stay_within_budget() {
    let p = pipeline();
    let cfg: Value = serde_json::from_str(&fs::read_to_string(DEFAULT_CONFIG).unwrap()).unwrap();
    let pgd: PgdConfig = serde_json::from_value(cfg["pgd"].clone()).unwrap();
    let mut total = BudgetStats::default();
    for out in &p.outs {
        let eval: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        let budgets: BTreeMap<String, BudgetStats> = serde_json::from_value(eval["budget"].clone()).unwrap();
        budgets.values().for_each(|b| total.merge(b));
        let ck: Value = serde_json::from_str(&fs::read_to_string(out.join("decoder-adv.ckpt.json")).unwrap()).unwrap();
        let training: BudgetStats = serde_json::from_value(ck["meta"]["training"]["budget"].clone()).unwrap();
        total.merge(&training);
    }
    let ok = total.calls > 0 && total.violations == 0 && total.max_norm <= pgd.epsilon;
    criterion(
        "A7",
        ok,
        format!("{} PGD calls, largest norm {} vs epsilon {}, {} violations", total.calls, total.max_norm, pgd.epsilon, total.violations),
    );
}

// ---------------------------------------------------------------- A8

#[test]
fn a8_degenerate_gate_is_bit_identical_to_vanilla() {
    let sched = NoiseSchedule::default();
    let ds = make_dataset(&generate_world(&WorldConfig::default()).unwrap(), 20, 0.75, &mut seeded(1)).unwrap();
    let classifier = diffattack_core::classifier::train_classifier(
        &ds,
        &Default::default(),
        &sched,
        DEFAULT_T_MIN,
        &mut seeded(2),
    )
    .unwrap()
    .params;
    let hyper = DecoderHyper { steps: 300, ..Default::default() };
    let train = |clf: &dyn SpeakerClassifier, v: &TrainVariant| {
        train_decoder(&ds, clf, v, &hyper, &sched, &mut seeded(5)).unwrap().params.fingerprint()
    };
    let vanilla = train(&classifier, &TrainVariant::Vanilla);
    let zero = PgdConfig { epsilon: 0.0, ..PgdConfig::default() };
    let eps0 = train(&classifier, &TrainVariant::AdvConstraint { pgd: zero, w_adv: 1.0 });
    let stub = AlwaysTarget { n_classes: ds.world.n_speakers() };
    let always = train(&stub, &TrainVariant::AdvConstraint { pgd: PgdConfig::default(), w_adv: 1.0 });
    criterion(
        "A8",
        eps0 == vanilla && always == vanilla,
        format!("vanilla {}, epsilon=0 {}, always-target stub {}", &vanilla[..16], &eps0[..16], &always[..16]),
    );
}

// ---------------------------------------------------------------- A9

#[test]
fn a9_reports_are_byte_identical_across_runs_and_thread_counts() {
    let p = pipeline();
    let first = fs::read(p.outs[0].join("report.csv")).unwrap();
    let mut same = vec![];
    for threads in ["1", "3"] {
        let dir = TempDir::new().unwrap();
        run_cli(&["all", "--seed", "0", "--threads", threads], dir.path());
        same.push(fs::read(dir.path().join("report.csv")).unwrap() == first);
    }
    criterion("A9", same.iter().all(|s| *s), format!("rerun identical: {}, 3 threads identical: {}", same[0], same[1]));
}
