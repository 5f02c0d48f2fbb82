//! Score network `s_θ(x_t, x̄₀, e_spk, t)` with a learned speaker-embedding
//! table, its three training regimes and the conversion routine.
//!
//! The network predicts the standardized noise `ε̂`; the score is
//! `s_θ = −ε̂ / √λ_t`. All losses are written in terms of `s_θ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{activations_from_meta, mlp_from_tensors, mlp_meta, params_fingerprint, Checkpoint};
use crate::classifier::SpeakerClassifier;
use crate::diffusion::{analytic_score, forward_sample, reverse_integrate, NoiseSchedule, ReverseConfig};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamConfig, AdamState, MlpParams, MlpVars, Tape, Tensor, Var};
use crate::pgd::{pgd_attack_batch, BudgetStats, PgdConfig};
use crate::rng::{normal, seeded};
use crate::train::{check_loss, minibatch, should_log};
use crate::world::{Dataset, FrameSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderHyper {
    pub hidden: Vec<usize>,
    pub e_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_min: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl Default for DecoderHyper {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            e_dim: 8,
            steps: 3000,
            batch_size: 64,
            lr: 2e-3,
            t_min: crate::diffusion::DEFAULT_T_MIN,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainVariant {
    Vanilla,
    SpkConstraint { w_spk: f64 },
    AdvConstraint { pgd: PgdConfig, w_adv: f64 },
}

impl TrainVariant {
    pub fn name(&self) -> &'static str {
        match self {
            TrainVariant::Vanilla => "vanilla",
            TrainVariant::SpkConstraint { .. } => "spk",
            TrainVariant::AdvConstraint { .. } => "adv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TrainVariant::Vanilla => Ok(()),
            TrainVariant::SpkConstraint { w_spk } if *w_spk >= 0.0 => Ok(()),
            TrainVariant::AdvConstraint { pgd, w_adv } if *w_adv >= 0.0 => pgd.validate(),
            _ => Err(Error::contract("variant weights must be non-negative")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub score_net: MlpParams,
    /// `[n_speakers, e_dim]`.
    pub embeddings: Tensor,
}

/// Tape handles for [`DecoderParams`].
pub struct DecoderVars<'t> {
    pub net: MlpVars<'t>,
    pub embeddings: Var<'t>,
}

impl<'t> DecoderVars<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = self.net.vars();
        v.push(self.embeddings);
        v
    }
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, n_speakers: usize, hyper: &DecoderHyper, rng: &mut R) -> Result<Self> {
        let input = 2 * feature_dim + hyper.e_dim + 2;
        let sizes: Vec<usize> =
            std::iter::once(input).chain(hyper.hidden.iter().copied()).chain([feature_dim]).collect();
        let score_net = MlpParams::init(&sizes, rng)?;
        let embeddings = Tensor::matrix(
            n_speakers,
            hyper.e_dim,
            (0..n_speakers * hyper.e_dim).map(|_| 0.1 * normal(rng)).collect(),
        )?;
        Ok(Self { score_net, embeddings })
    }

    pub fn feature_dim(&self) -> usize {
        self.score_net.out_dim()
    }

    pub fn n_speakers(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn e_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.score_net.tensors();
        v.push(&self.embeddings);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.score_net.tensors_mut();
        v.push(&mut self.embeddings);
        v
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> DecoderVars<'t> {
        DecoderVars { net: self.score_net.register(tape), embeddings: tape.leaf(self.embeddings.clone()) }
    }

    /// SHA-256 over parameter shapes and values.
    pub fn fingerprint(&self) -> String {
        params_fingerprint(&self.tensors())
    }
}

struct ScoreInputs {
    time_features: Tensor,
    inv_sd: Vec<f64>,
}

fn score_inputs(
    params: &DecoderParams,
    x_t: &Tensor,
    xbar0: &Tensor,
    speakers: &[usize],
    t: &[f64],
    sched: &NoiseSchedule,
) -> Result<ScoreInputs> {
    let n = x_t.rows();
    let d = params.feature_dim();
    if x_t.shape() != [n, d] || xbar0.shape() != [n, d] || speakers.len() != n || t.len() != n {
        return Err(Error::shape(
            "score_forward",
            format!(
                "x_t {:?}, xbar0 {:?}, {} speakers, {} times for feature dim {d}",
                x_t.shape(),
                xbar0.shape(),
                speakers.len(),
                t.len()
            ),
        ));
    }
    if let Some(&s) = speakers.iter().find(|&&s| s >= params.n_speakers()) {
        return Err(Error::Lookup { kind: "speaker", id: s });
    }
    let mut time_features = Vec::with_capacity(2 * n);
    let mut inv_sd = Vec::with_capacity(n);
    for &ti in t {
        let lambda = sched.lambda_at(ti)?;
        if !(lambda > 0.0) {
            return Err(Error::contract(format!("score requested at t = {ti} where the kernel variance vanishes")));
        }
        time_features.extend([ti, lambda]);
        inv_sd.push(-1.0 / lambda.sqrt());
    }
    Ok(ScoreInputs { time_features: Tensor::matrix(n, 2, time_features)?, inv_sd })
}

/// Score estimate for a batch of rows. `x_t` and `xbar0` are `[n, d]`.
pub fn score_forward(
    params: &DecoderParams,
    x_t: &Tensor,
    xbar0: &Tensor,
    speakers: &[usize],
    t: &[f64],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let inputs = score_inputs(params, x_t, xbar0, speakers, t, sched)?;
    let emb = params.embeddings.select_rows(speakers);
    let features = Tensor::concat_cols(&[x_t, xbar0, &emb, &inputs.time_features])?;
    params.score_net.forward(&features)?.scale_rows(&inputs.inv_sd)
}

/// Taped version of [`score_forward`]; `x_t` may itself depend on other nodes.
pub fn score_forward_tape<'t>(
    params: &DecoderParams,
    vars: &DecoderVars<'t>,
    x_t: Var<'t>,
    xbar0: &Tensor,
    speakers: &[usize],
    t: &[f64],
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let tape = x_t.tape();
    let inputs = score_inputs(params, &x_t.value(), xbar0, speakers, t, sched)?;
    let emb = vars.embeddings.gather_rows(speakers)?;
    let features = Var::concat_cols(&[x_t, tape.leaf(xbar0.clone()), emb, tape.leaf(inputs.time_features)])?;
    params.score_net.forward_tape(&vars.net, features)?.scale_rows(&inputs.inv_sd)
}

/// Training rows: clean frames, their averages and speakers.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor,
    pub xbar0: Tensor,
    pub speakers: Vec<usize>,
}

impl Batch {
    pub fn from_frames(frames: &FrameSet, idx: &[usize]) -> Self {
        Self {
            x0: frames.x.select_rows(idx),
            xbar0: frames.xbar0.select_rows(idx),
            speakers: idx.iter().map(|&i| frames.speakers[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Forward-diffused batch: one `t ~ U[t_min, 1]` and kernel draw per row.
struct DiffusedBatch {
    t: Vec<f64>,
    lambda: Vec<f64>,
    x_t: Tensor,
    mu_t: Tensor,
    true_score: Tensor,
}

fn diffuse<R: Rng + ?Sized>(batch: &Batch, sched: &NoiseSchedule, t_min: f64, rng: &mut R) -> Result<DiffusedBatch> {
    let n = batch.len();
    let d = batch.x0.cols();
    let (mut t, mut lambda) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut x_t, mut mu_t, mut score) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for i in 0..n {
        let ti = rng.random_range(t_min..=1.0);
        let draw = forward_sample(&batch.x0.row_tensor(i), &batch.xbar0.row_tensor(i), ti, t_min, sched, rng)?;
        t.push(ti);
        lambda.push(draw.lambda_t);
        x_t.extend_from_slice(draw.x_t.data());
        mu_t.extend_from_slice(draw.mu_t.data());
        score.extend_from_slice(draw.true_score.data());
    }
    Ok(DiffusedBatch {
        t,
        lambda,
        x_t: Tensor::matrix(n, d, x_t)?,
        mu_t: Tensor::matrix(n, d, mu_t)?,
        true_score: Tensor::matrix(n, d, score)?,
    })
}

/// `mean_i λ_i ‖a_i − b_i‖²`.
fn weighted_sq_error(a: &Tensor, b: &Tensor, lambda: &[f64]) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok((0..diff.rows()).map(|i| lambda[i] * diff.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        / diff.rows() as f64)
}

/// Weighted denoising score-matching loss on one draw of times and noise.
pub fn dsm_loss<R: Rng + ?Sized>(
    params: &DecoderParams,
    batch: &Batch,
    sched: &NoiseSchedule,
    t_min: f64,
    rng: &mut R,
) -> Result<f64> {
    let draw = diffuse(batch, sched, t_min, rng)?;
    let s = score_forward(params, &draw.x_t, &batch.xbar0, &batch.speakers, &draw.t, sched)?;
    weighted_sq_error(&s, &draw.true_score, &draw.lambda)
}

/// DSM loss with an arbitrary score function in place of the network; used
/// to check the loss against known scores.
pub fn dsm_loss_with<F, R>(score_fn: F, batch: &Batch, sched: &NoiseSchedule, t_min: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let draw = diffuse(batch, sched, t_min, rng)?;
    let s = score_fn(&draw.x_t, &draw.mu_t, &draw.lambda)?;
    weighted_sq_error(&s, &draw.true_score, &draw.lambda)
}

/// Fixed draws a training objective is evaluated on: noisy rows, the
/// regression target for the score, and per-row `λ_t` and `t`.
pub struct DiffusedTerms<'a> {
    pub x_t: &'a Tensor,
    pub target: &'a Tensor,
    pub lambda: &'a [f64],
    pub t: &'a [f64],
}

pub struct Objective<'t> {
    pub dsm: Var<'t>,
    pub spk: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Differentiable part of the decoder objective: `mean_i λ_i ‖s_θ − target‖²`,
/// plus `w_spk · CE(f(x_t + λ_t s_θ), y)` when `w_spk` is given.
pub fn training_objective<'t, C: SpeakerClassifier + ?Sized>(
    params: &DecoderParams,
    vars: &DecoderVars<'t>,
    terms: &DiffusedTerms<'_>,
    batch: &Batch,
    classifier: &C,
    w_spk: Option<f64>,
    sched: &NoiseSchedule,
) -> Result<Objective<'t>> {
    let tape = vars.embeddings.tape();
    let x_t = tape.leaf(terms.x_t.clone());
    let s = score_forward_tape(params, vars, x_t, &batch.xbar0, &batch.speakers, terms.t, sched)?;
    let dsm = s.sub(tape.leaf(terms.target.clone()))?.square().scale_rows(terms.lambda)?.sum().scale(1.0 / batch.len() as f64);
    let Some(w_spk) = w_spk else {
        return Ok(Objective { dsm, spk: None, total: dsm });
    };
    let mu_hat = x_t.add(s.scale_rows(terms.lambda)?)?;
    let ce = classifier.logits_on_tape(mu_hat)?.cross_entropy(&batch.speakers)?;
    Ok(Objective { dsm, spk: Some(ce), total: dsm.add(ce.scale(w_spk))? })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Total objective (DSM + constraint terms).
    pub loss: f64,
    pub dsm_loss: f64,
    /// Speaker cross-entropy on the model-implied kernel mean.
    pub spk_loss: Option<f64>,
    /// Mean `‖δ*‖²` over the batch (zero for rows the gate let through).
    pub adv_loss: Option<f64>,
    /// Fraction of rows the gate sent to the adversarial branch.
    pub gate_fire: Option<f64>,
    pub budget: BudgetStats,
}

/// One optimizer step of the chosen regime.
///
/// * vanilla: weighted DSM loss.
/// * speaker constraint: adds `w_spk · CE(f(x_t + λ_t s_θ), y)`.
/// * adversarial constraint: rows whose noisy `x_t` the classifier already
///   assigns to their own speaker keep the plain DSM target. For the others a
///   PGD perturbation `δ*` towards that speaker shifts the regression target
///   to the score of `Normal(μ_t + δ*, λ_t)`; `w_adv · ‖δ*‖²` is logged as
///   the adversarial loss.
pub fn gated_training_step<C, R>(
    params: &mut DecoderParams,
    batch: &Batch,
    classifier: &C,
    variant: &TrainVariant,
    sched: &NoiseSchedule,
    t_min: f64,
    opt: &mut AdamState,
    rng: &mut R,
) -> Result<StepMetrics>
where
    C: SpeakerClassifier + ?Sized,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let draw = diffuse(batch, sched, t_min, rng)?;
    let mut metrics = StepMetrics::default();

    let mut target = draw.true_score.clone();
    let mut constant_term = 0.0;
    if let TrainVariant::AdvConstraint { pgd, w_adv } = variant {
        let hits = classifier.hits(&draw.x_t, &batch.speakers)?;
        let fired: Vec<usize> = (0..batch.len()).filter(|&i| !hits[i]).collect();
        let mut sq = 0.0;
        if !fired.is_empty() {
            let labels: Vec<usize> = fired.iter().map(|&i| batch.speakers[i]).collect();
            let outcomes = pgd_attack_batch(classifier, &draw.x_t.select_rows(&fired), &labels, pgd)?;
            for (&i, out) in fired.iter().zip(&outcomes) {
                metrics.budget.record(&out.delta, pgd);
                let shifted_mean = Tensor::vector(draw.mu_t.row(i).iter().zip(&out.delta).map(|(m, d)| m + d).collect());
                let shifted = analytic_score(&Tensor::vector(draw.x_t.row(i).to_vec()), &shifted_mean, draw.lambda[i])?;
                target.row_mut(i).copy_from_slice(shifted.data());
                sq += out.delta.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let adv = sq / batch.len() as f64;
        constant_term = w_adv * adv;
        metrics.adv_loss = Some(adv);
        metrics.gate_fire = Some(fired.len() as f64 / batch.len() as f64);
    }

    let tape = Tape::new();
    let vars = params.register(&tape);
    let spk = match variant {
        TrainVariant::SpkConstraint { w_spk } => Some(*w_spk),
        _ => None,
    };
    let terms = DiffusedTerms { x_t: &draw.x_t, target: &target, lambda: &draw.lambda, t: &draw.t };
    let objective = training_objective(params, &vars, &terms, batch, classifier, spk, sched)?;
    metrics.dsm_loss = objective.dsm.value().item();
    metrics.spk_loss = objective.spk.map(|ce| ce.value().item());
    let objective = objective.total;
    let objective_value = objective.value().item();
    metrics.loss = objective_value + constant_term;
    check_loss(metrics.loss, "gated_training_step", opt.step as usize)?;

    let grads = tape.backward(objective)?;
    let g: Vec<Tensor> = vars.vars().into_iter().map(|v| grads.wrt(v)).collect();
    adam_step(&mut params.tensors_mut(), &g, opt)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLogPoint {
    pub step: usize,
    pub loss: f64,
    pub dsm_loss: f64,
    pub spk_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub gate_fire: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DecoderTraining {
    pub params: DecoderParams,
    pub history: Vec<DecoderLogPoint>,
    pub budget: BudgetStats,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Fixed-seed DSM loss over every frame of `frames`; comparable across checkpoints.
pub fn validation_loss(
    params: &DecoderParams,
    frames: &FrameSet,
    sched: &NoiseSchedule,
    t_min: f64,
    seed: u64,
) -> Result<f64> {
    let idx: Vec<usize> = (0..frames.len()).collect();
    dsm_loss(params, &Batch::from_frames(frames, &idx), sched, t_min, &mut seeded(seed))
}

const VALIDATION_SEED: u64 = 0x5eed;

/// Interval means of the step metrics are logged every `log_every` steps.
pub fn train_decoder<C, R>(
    dataset: &Dataset,
    classifier: &C,
    variant: &TrainVariant,
    hyper: &DecoderHyper,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DecoderTraining>
where
    C: SpeakerClassifier + ?Sized,
    R: Rng + ?Sized,
{
    variant.validate()?;
    sched.validate()?;
    let train = dataset.train_frames()?;
    let test = dataset.test_frames()?;
    if train.is_empty() || hyper.batch_size == 0 {
        return Err(Error::contract("decoder training needs frames and a positive batch size"));
    }
    let mut params = DecoderParams::init(dataset.world.feature_dim(), dataset.world.n_speakers(), hyper, rng)?;
    let mut opt = AdamState::new(AdamConfig::with_lr(hyper.lr), &params.tensors());
    let initial_val_loss = validation_loss(&params, &test, sched, hyper.t_min, VALIDATION_SEED)?;

    let mut history = vec![];
    let mut budget = BudgetStats::default();
    let mut acc: Vec<StepMetrics> = vec![];
    for step in 0..hyper.steps {
        let idx = minibatch(rng, train.len(), hyper.batch_size);
        let batch = Batch::from_frames(&train, &idx);
        let m = gated_training_step(&mut params, &batch, classifier, variant, sched, hyper.t_min, &mut opt, rng)?;
        budget.merge(&m.budget);
        acc.push(m);
        if should_log(step, hyper.log_every, hyper.steps) {
            history.push(summarize(step, &acc));
            acc.clear();
        }
    }
    let final_val_loss = validation_loss(&params, &test, sched, hyper.t_min, VALIDATION_SEED)?;
    check_loss(final_val_loss, "train_decoder", hyper.steps)?;
    Ok(DecoderTraining { params, history, budget, initial_val_loss, final_val_loss })
}

fn summarize(step: usize, acc: &[StepMetrics]) -> DecoderLogPoint {
    let n = acc.len() as f64;
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| acc.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&StepMetrics) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = acc.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    DecoderLogPoint {
        step,
        loss: mean(&|m| m.loss),
        dsm_loss: mean(&|m| m.dsm_loss),
        spk_loss: mean_opt(&|m| m.spk_loss),
        adv_loss: mean_opt(&|m| m.adv_loss),
        gate_fire: mean_opt(&|m| m.gate_fire),
    }
}

/// Voice conversion of a set of source frames to `target`: encode to the
/// speaker-independent average, start from `Normal(x̄₀, I)` and integrate the
/// reverse SDE with the decoder's score conditioned on the target speaker.
pub fn convert<R: Rng + ?Sized>(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    x_src: &Tensor,
    target: usize,
    reverse: &ReverseConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if target >= decoder.n_speakers() {
        return Err(Error::Lookup { kind: "speaker", id: target });
    }
    let x_src = x_src.as_matrix();
    let xbar0 = encode(encoder, &x_src)?;
    let n = xbar0.rows();
    let speakers = vec![target; n];
    let x_init = xbar0.map(|m| m + normal(rng));
    reverse_integrate(
        |x, t| score_forward(decoder, x, &xbar0, &speakers, &vec![t; n], sched),
        &xbar0,
        reverse,
        sched,
        rng,
        Some(x_init),
    )
}

/// Provenance stored alongside decoder weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderManifest {
    pub variant: TrainVariant,
    pub schedule: NoiseSchedule,
    pub t_min: f64,
    pub world_fingerprint: String,
}

impl DecoderParams {
    pub fn to_checkpoint(&self, manifest: &DecoderManifest) -> Checkpoint {
        Checkpoint::new(
            "decoder",
            serde_json::json!({
                "score_net": mlp_meta(&self.score_net),
                "manifest": manifest,
            }),
            self.tensors().into_iter().cloned().collect(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, DecoderManifest)> {
        ck.expect_module("decoder")?;
        let manifest: DecoderManifest = serde_json::from_value(ck.meta["manifest"].clone())
            .map_err(|e| Error::format(1, format!("field `meta.manifest`: {e}")))?;
        let (embeddings, net) = ck
            .tensors
            .split_last()
            .ok_or_else(|| Error::format(1, "field `tensors`: empty decoder checkpoint"))?;
        let score_net = mlp_from_tensors(net, activations_from_meta(&ck.meta, "score_net")?)?;
        if embeddings.shape().len() != 2 {
            return Err(Error::format(1, "field `tensors`: embedding table must be a matrix"));
        }
        Ok((Self { score_net, embeddings: embeddings.clone() }, manifest))
    }
}
