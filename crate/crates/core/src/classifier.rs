//! Speaker classifier: softmax MLP over frames. The same instance is the
//! gate inside adversarial training and the victim at attack time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{activations_from_meta, mlp_from_tensors, mlp_meta, Checkpoint};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::{adam_step, argmax, AdamConfig, AdamState, MlpParams, Tape, Tensor, Var};
use crate::train::{check_loss, minibatch, should_log, LossPoint};
use crate::world::{Dataset, Utterance};

/// Anything that maps frames to speaker logits and can be differentiated through.
pub trait SpeakerClassifier: Sync {
    fn n_classes(&self) -> usize;

    /// Logits for an `[n, d]` matrix (or a single `[d]` frame).
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Same as [`Self::logits`] but recorded on `x`'s tape. Parameters enter the
    /// tape as constants.
    fn logits_on_tape<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;

    /// Row-wise gate: does the predicted speaker of row `i` equal `targets[i]`?
    fn hits(&self, x: &Tensor, targets: &[usize]) -> Result<Vec<bool>> {
        let x = x.as_matrix();
        if targets.len() != x.rows() {
            return Err(Error::shape("hits", format!("{} targets for {} rows", targets.len(), x.rows())));
        }
        check_labels(targets, self.n_classes())?;
        let logits = self.logits(&x)?;
        Ok(logits.argmax_rows().iter().zip(targets).map(|(p, t)| p == t).collect())
    }
}

pub(crate) fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= n_classes) {
        Some(&y) => Err(Error::contract(format!("label {y} out of range for {n_classes} speakers"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub mlp: MlpParams,
}

impl SpeakerClassifier for ClassifierParams {
    fn n_classes(&self) -> usize {
        self.mlp.out_dim()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }

    fn logits_on_tape<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let vars = self.mlp.register(x.tape());
        self.mlp.forward_tape(&vars, x)
    }
}

/// Gate stub that claims every input already belongs to the requested
/// speaker. Its logits are all zero.
#[derive(Clone, Copy, Debug)]
pub struct AlwaysTarget {
    pub n_classes: usize,
}

impl SpeakerClassifier for AlwaysTarget {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.as_matrix();
        Ok(Tensor::zeros(&[x.rows(), self.n_classes]))
    }

    fn logits_on_tape<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let zeros = x.tape().leaf(Tensor::zeros(&[x.value().cols(), self.n_classes]));
        x.matmul(zeros)
    }

    fn hits(&self, x: &Tensor, targets: &[usize]) -> Result<Vec<bool>> {
        if targets.len() != x.rows() {
            return Err(Error::shape("hits", format!("{} targets for {} rows", targets.len(), x.rows())));
        }
        Ok(vec![true; targets.len()])
    }
}

pub fn classify(params: &ClassifierParams, x: &Tensor) -> Result<Tensor> {
    params.logits(x)
}

/// True iff the classifier's top speaker for `x` is `y_prime` (ties go to the lowest index).
pub fn is_target<C: SpeakerClassifier + ?Sized>(classifier: &C, x: &Tensor, y_prime: usize) -> Result<bool> {
    Ok(classifier.hits(&x.as_matrix(), &[y_prime])?[0])
}

/// Utterance-level decision from mean-pooled frame logits.
pub fn predict_utterance<C: SpeakerClassifier + ?Sized>(classifier: &C, frames: &Tensor) -> Result<usize> {
    let logits = classifier.logits(&frames.as_matrix())?;
    Ok(argmax(logits.mean_rows().data()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierHyper {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Also train on forward-diffused frames at uniformly drawn times.
    #[serde(default)]
    pub noise_augment: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 1500, batch_size: 64, lr: 3e-3, noise_augment: false, log_every: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub frame_accuracy: f64,
    pub utterance_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierTraining {
    pub params: ClassifierParams,
    pub loss_history: Vec<LossPoint>,
    pub report: AccuracyReport,
}

pub fn evaluate_classifier<C: SpeakerClassifier + ?Sized>(classifier: &C, utts: &[Utterance]) -> Result<AccuracyReport> {
    let (mut frame_hits, mut frames, mut utt_hits) = (0usize, 0usize, 0usize);
    for u in utts {
        let x = u.x_matrix()?;
        let logits = classifier.logits(&x)?;
        frame_hits += logits.argmax_rows().iter().filter(|&&p| p == u.speaker_id).count();
        frames += x.rows();
        if argmax(logits.mean_rows().data()) == u.speaker_id {
            utt_hits += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AccuracyReport { frame_accuracy: ratio(frame_hits, frames), utterance_accuracy: ratio(utt_hits, utts.len()) })
}

/// Cross-entropy training on frames. With `noise_augment`, every second
/// batch row is replaced by a forward-diffused copy at `t ~ U[t_min, 1]`.
pub fn train_classifier<R: Rng + ?Sized>(
    dataset: &Dataset,
    hyper: &ClassifierHyper,
    sched: &NoiseSchedule,
    t_min: f64,
    rng: &mut R,
) -> Result<ClassifierTraining> {
    let train = dataset.train_frames()?;
    if train.is_empty() || hyper.batch_size == 0 {
        return Err(Error::contract("classifier training needs frames and a positive batch size"));
    }
    let n_classes = dataset.world.n_speakers();
    check_labels(&train.speakers, n_classes)?;
    let d = dataset.world.feature_dim();
    let sizes: Vec<usize> = std::iter::once(d).chain(hyper.hidden.iter().copied()).chain([n_classes]).collect();
    let mut params = ClassifierParams { mlp: MlpParams::init(&sizes, rng)? };
    let mut opt = AdamState::new(AdamConfig::with_lr(hyper.lr), &params.mlp.tensors());

    let mut loss_history = vec![];
    for step in 0..hyper.steps {
        let idx = minibatch(rng, train.len(), hyper.batch_size);
        let mut xb = train.x.select_rows(&idx);
        if hyper.noise_augment {
            for (r, &i) in idx.iter().enumerate().filter(|(r, _)| r % 2 == 1) {
                let t = rng.random_range(t_min..=1.0);
                let draw = forward_sample(&train.x.row_tensor(i), &train.xbar0.row_tensor(i), t, t_min, sched, rng)?;
                xb.row_mut(r).copy_from_slice(draw.x_t.data());
            }
        }
        let labels: Vec<usize> = idx.iter().map(|&i| train.speakers[i]).collect();
        let tape = Tape::new();
        let vars = params.mlp.register(&tape);
        let logits = params.mlp.forward_tape(&vars, tape.leaf(xb))?;
        let loss = logits.cross_entropy(&labels)?;
        let loss_value = loss.value().item();
        check_loss(loss_value, "train_classifier", step)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.vars().into_iter().map(|v| grads.wrt(v)).collect();
        adam_step(&mut params.mlp.tensors_mut(), &g, &mut opt)?;
        if should_log(step, hyper.log_every, hyper.steps) {
            loss_history.push(LossPoint { step, loss: loss_value });
        }
    }
    let report = evaluate_classifier(&params, &dataset.test)?;
    Ok(ClassifierTraining { params, loss_history, report })
}

impl ClassifierParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "classifier",
            serde_json::json!({ "mlp": mlp_meta(&self.mlp) }),
            self.mlp.tensors().into_iter().cloned().collect(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module("classifier")?;
        Ok(Self { mlp: mlp_from_tensors(&ck.tensors, activations_from_meta(&ck.meta, "mlp")?)? })
    }
}
