//! Targeted projected gradient descent against a [`SpeakerClassifier`].
//!
//! Starting from `δ = 0`, each iteration stops early if `x + δ` is already
//! classified as the target, otherwise steps against the gradient of the
//! target cross-entropy and projects back onto the `ε`-ball.

use serde::{Deserialize, Serialize};

use crate::classifier::{check_labels, SpeakerClassifier};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdNorm {
    /// `‖·‖∞`, signed-gradient steps.
    MaxNorm,
    /// `‖·‖₂`, normalized-gradient steps.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub n_iters: usize,
    pub norm: PgdNorm,
}

impl PgdConfig {
    /// `ε = ½·offset_scale`, `α = ε/4`, ten iterations, max-norm.
    pub fn for_offset_scale(offset_scale: f64) -> Self {
        let epsilon = 0.5 * offset_scale;
        Self { epsilon, alpha: epsilon / 4.0, n_iters: 10, norm: PgdNorm::MaxNorm }
    }

    /// `ε = 0` is accepted: it pins `δ` to zero, which makes the adversarial
    /// variant collapse onto vanilla training.
    pub fn invalid_fields(&self) -> Vec<&'static str> {
        let mut bad = vec![];
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            bad.push("epsilon");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad.push("alpha");
        }
        if self.n_iters < 1 {
            bad.push("n_iters");
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_fields();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid pgd config fields: {}", bad.join(", "))))
        }
    }
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self::for_offset_scale(1.0)
    }
}

pub fn perturbation_norm(delta: &[f64], norm: PgdNorm) -> f64 {
    match norm {
        PgdNorm::MaxNorm => delta.iter().fold(0.0, |m, v| m.max(v.abs())),
        PgdNorm::Euclidean => delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

fn project(delta: &mut [f64], cfg: &PgdConfig) {
    let eps = cfg.epsilon;
    match cfg.norm {
        PgdNorm::MaxNorm => {
            for v in delta.iter_mut() {
                *v = v.clamp(-eps, eps);
            }
        }
        PgdNorm::Euclidean => {
            let n = perturbation_norm(delta, PgdNorm::Euclidean);
            if n > eps {
                let f = if n > 0.0 { eps / n } else { 0.0 };
                delta.iter_mut().for_each(|v| *v *= f);
                // rounding can leave the norm a few ulps above eps
                while perturbation_norm(delta, PgdNorm::Euclidean) > eps {
                    delta.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdOutcome {
    pub delta: Vec<f64>,
    /// Gradient steps taken before stopping.
    pub iterations: usize,
    /// Whether `x + δ` is classified as the target.
    pub success: bool,
}

/// Attacks every row of `xs` towards its own entry of `targets`. Rows are
/// independent: the result for a row equals a single-row call on it.
pub fn pgd_attack_batch<C: SpeakerClassifier + ?Sized>(
    classifier: &C,
    xs: &Tensor,
    targets: &[usize],
    cfg: &PgdConfig,
) -> Result<Vec<PgdOutcome>> {
    cfg.validate()?;
    let xs = xs.as_matrix();
    let (n, d) = (xs.rows(), xs.cols());
    if targets.len() != n {
        return Err(Error::shape("pgd_attack", format!("{} targets for {n} rows", targets.len())));
    }
    check_labels(targets, classifier.n_classes())?;

    let mut out: Vec<PgdOutcome> =
        (0..n).map(|_| PgdOutcome { delta: vec![0.0; d], iterations: 0, success: false }).collect();
    let mut active: Vec<usize> = (0..n).collect();
    let adv_rows = |rows: &[usize], out: &[PgdOutcome]| -> Tensor {
        let mut m = xs.select_rows(rows);
        for (r, &i) in rows.iter().enumerate() {
            for (v, dv) in m.row_mut(r).iter_mut().zip(&out[i].delta) {
                *v += dv;
            }
        }
        m
    };

    for _ in 0..cfg.n_iters {
        if active.is_empty() {
            break;
        }
        let current = adv_rows(&active, &out);
        let active_targets: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        let hits = classifier.hits(&current, &active_targets)?;
        let mut still = Vec::with_capacity(active.len());
        let mut still_rows = Vec::with_capacity(active.len());
        for (r, (&i, hit)) in active.iter().zip(hits).enumerate() {
            if hit {
                out[i].success = true;
            } else {
                still.push(i);
                still_rows.push(r);
            }
        }
        if still.is_empty() {
            active.clear();
            break;
        }
        let input = current.select_rows(&still_rows);
        let labels: Vec<usize> = still.iter().map(|&i| targets[i]).collect();
        let tape = Tape::new();
        let x = tape.leaf(input);
        let loss = classifier.logits_on_tape(x)?.cross_entropy_sum(&labels)?;
        let grad = tape.backward(loss)?.wrt(x);
        for (r, &i) in still.iter().enumerate() {
            let g = grad.row(r);
            let delta = &mut out[i].delta;
            match cfg.norm {
                PgdNorm::MaxNorm => {
                    for (dv, &gv) in delta.iter_mut().zip(g) {
                        let s = if gv > 0.0 { 1.0 } else if gv < 0.0 { -1.0 } else { 0.0 };
                        *dv -= cfg.alpha * s;
                    }
                }
                PgdNorm::Euclidean => {
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn > 0.0 {
                        for (dv, &gv) in delta.iter_mut().zip(g) {
                            *dv -= cfg.alpha * gv / gn;
                        }
                    }
                }
            }
            project(delta, cfg);
            out[i].iterations += 1;
        }
        active = still;
    }

    if !active.is_empty() {
        let current = adv_rows(&active, &out);
        let active_targets: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        for (&i, hit) in active.iter().zip(classifier.hits(&current, &active_targets)?) {
            out[i].success = hit;
        }
    }
    Ok(out)
}

pub fn pgd_attack<C: SpeakerClassifier + ?Sized>(
    classifier: &C,
    x: &Tensor,
    y_prime: usize,
    cfg: &PgdConfig,
) -> Result<PgdOutcome> {
    let x = x.as_matrix();
    if x.rows() != 1 {
        return Err(Error::shape("pgd_attack", "expects a single frame"));
    }
    Ok(pgd_attack_batch(classifier, &x, &[y_prime], cfg)?.remove(0))
}

/// Running record of perturbation sizes against their budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetStats {
    pub calls: usize,
    pub max_norm: f64,
    pub violations: usize,
}

impl BudgetStats {
    pub fn record(&mut self, delta: &[f64], cfg: &PgdConfig) {
        let n = perturbation_norm(delta, cfg.norm);
        self.calls += 1;
        self.max_norm = self.max_norm.max(n);
        if n > cfg.epsilon {
            self.violations += 1;
        }
    }

    pub fn merge(&mut self, other: &BudgetStats) {
        self.calls += other.calls;
        self.max_norm = self.max_norm.max(other.max_norm);
        self.violations += other.violations;
    }
}
