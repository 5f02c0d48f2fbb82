//! Content encoder: regresses the speaker-independent average `x̄₀` from an
//! observed frame `x` by minimizing the mean squared error. Trained on its
//! own, before and independently of the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{activations_from_meta, mlp_from_tensors, mlp_meta, Checkpoint};
use crate::error::{Error, Result};
use crate::grad::{adam_step, mse, AdamConfig, AdamState, MlpParams, Tape, Tensor};
use crate::train::{check_loss, minibatch, should_log, LossPoint};
use crate::world::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHyper {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl Default for EncoderHyper {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 3000, batch_size: 64, lr: 3e-3, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct EncoderTraining {
    pub params: EncoderParams,
    pub loss_history: Vec<LossPoint>,
    pub initial_loss: f64,
    pub heldout_loss: f64,
}

pub fn encode(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    params.mlp.forward(x)
}

pub fn train_encoder<R: Rng + ?Sized>(dataset: &Dataset, hyper: &EncoderHyper, rng: &mut R) -> Result<EncoderTraining> {
    let train = dataset.train_frames()?;
    if train.is_empty() {
        return Err(Error::contract("encoder training needs a nonempty dataset"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let d = dataset.world.feature_dim();
    let sizes: Vec<usize> = std::iter::once(d).chain(hyper.hidden.iter().copied()).chain([d]).collect();
    let mut params = EncoderParams { mlp: MlpParams::init(&sizes, rng)? };
    let mut opt = AdamState::new(AdamConfig::with_lr(hyper.lr), &params.mlp.tensors());

    let initial_loss = mse(&encode(&params, &train.x)?, &train.xbar0)?;
    let mut loss_history = vec![];
    for step in 0..hyper.steps {
        let idx = minibatch(rng, train.len(), hyper.batch_size);
        let (xb, yb) = (train.x.select_rows(&idx), train.xbar0.select_rows(&idx));
        let tape = Tape::new();
        let vars = params.mlp.register(&tape);
        let pred = params.mlp.forward_tape(&vars, tape.leaf(xb))?;
        let loss = pred.mse(tape.leaf(yb))?;
        let loss_value = loss.value().item();
        check_loss(loss_value, "train_encoder", step)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.vars().into_iter().map(|v| grads.wrt(v)).collect();
        adam_step(&mut params.mlp.tensors_mut(), &g, &mut opt)?;
        if should_log(step, hyper.log_every, hyper.steps) {
            loss_history.push(LossPoint { step, loss: loss_value });
        }
    }

    let test = dataset.test_frames()?;
    let heldout_loss = mse(&encode(&params, &test.x)?, &test.xbar0)?;
    check_loss(heldout_loss, "train_encoder", hyper.steps)?;
    Ok(EncoderTraining { params, loss_history, initial_loss, heldout_loss })
}

impl EncoderParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "encoder",
            serde_json::json!({ "mlp": mlp_meta(&self.mlp) }),
            self.mlp.tensors().into_iter().cloned().collect(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module("encoder")?;
        Ok(Self { mlp: mlp_from_tensors(&ck.tensors, activations_from_meta(&ck.meta, "mlp")?)? })
    }
}
