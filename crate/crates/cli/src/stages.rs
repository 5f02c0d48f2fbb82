//! Pipeline stages. Each stage verifies its inputs' manifests, skips itself
//! when its own manifest is current, and otherwise writes its artifact and
//! a fresh manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffattack_core::bench::{
    build_report, frames_by_speaker, protocol_pairs, run_methods, summarize_run, AttackPair, BenchConfig,
    BenchModels, EvalReport, Generated, MethodId, MethodMetrics, MethodRun,
};
use diffattack_core::checkpoint::Checkpoint;
use diffattack_core::classifier::{train_classifier, AccuracyReport, ClassifierParams};
use diffattack_core::codec::{Dec17, Dec17Rows};
use diffattack_core::decoder::{train_decoder, DecoderManifest, DecoderParams};
use diffattack_core::encoder::{train_encoder, EncoderParams};
use diffattack_core::grad::Tensor;
use diffattack_core::pgd::BudgetStats;
use diffattack_core::rng::{seeded, sub_seed};
use diffattack_core::world::{generate_world, make_dataset, Dataset};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, VariantKind};
use crate::error::{CliError, CliResult};
use crate::manifest::{is_fresh, verified_input, write_artifact, Manifest, MANIFEST_FORMAT_VERSION};

pub const DATASET: &str = "dataset.jsonl";
pub const ENCODER: &str = "encoder.ckpt.json";
pub const CLASSIFIER: &str = "classifier.ckpt.json";
pub const ATTACK: &str = "attack.json";
pub const EVAL: &str = "eval.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
const RESULT_FORMAT_VERSION: u32 = 1;

pub fn decoder_artifact(kind: VariantKind) -> String {
    format!("decoder-{}.ckpt.json", kind.as_str())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Wrote,
    UpToDate,
}

pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    config_hash: String,
}

type Inputs = BTreeMap<String, String>;

impl Run {
    pub fn new(config: RunConfig, out: &Path) -> CliResult<Self> {
        config.validate()?;
        fs::create_dir_all(out).map_err(|e| CliError::Artifact(format!("{}: {e}", out.display())))?;
        let config_hash = config.hash();
        Ok(Self { config, out: out.to_path_buf(), config_hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Stage seeds: run seed XOR a hash of the stage tag.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        sub_seed(self.config.seed, tag)
    }

    fn input(&self, inputs: &mut Inputs, artifact: &str, stage: &str, producer: &str) -> CliResult<()> {
        let sha = verified_input(&self.out, artifact, &self.config.stage_hash(stage), producer)?;
        inputs.insert(artifact.to_string(), sha);
        Ok(())
    }

    fn dataset_input(&self, inputs: &mut Inputs) -> CliResult<()> {
        self.input(inputs, DATASET, "world", "world")
    }

    fn finish(&self, stage: &str, artifact: &str, seed_tag: &str, inputs: Inputs, bytes: &[u8]) -> CliResult<Outcome> {
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            stage: stage.to_string(),
            artifact: artifact.to_string(),
            config_hash: self.config_hash.clone(),
            stage_hash: self.config.stage_hash(stage),
            seed: self.config.seed,
            stage_seed: self.stage_seed(seed_tag),
            inputs,
            output_sha256: String::new(),
        };
        write_artifact(&self.out, artifact, bytes, manifest)?;
        eprintln!("{stage}: wrote {}", self.out.join(artifact).display());
        Ok(Outcome::Wrote)
    }

    fn up_to_date(&self, stage: &str, artifact: &str, inputs: &Inputs) -> bool {
        let fresh = is_fresh(&self.out, artifact, &self.config.stage_hash(stage), inputs);
        if fresh {
            eprintln!("{stage}: {artifact} is up to date");
        }
        fresh
    }

    fn load_dataset(&self) -> CliResult<Dataset> {
        diffattack_core::world::load_dataset(&self.out.join(DATASET)).map_err(CliError::stage("load dataset"))
    }

    fn load_checkpoint(&self, artifact: &str) -> CliResult<Checkpoint> {
        Checkpoint::load(&self.out.join(artifact)).map_err(CliError::stage("load checkpoint"))
    }

    pub fn world(&self) -> CliResult<Outcome> {
        let inputs = Inputs::new();
        if self.up_to_date("world", DATASET, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let st = CliError::stage("world");
        let cfg = &self.config;
        let world_cfg = diffattack_core::world::WorldConfig { seed: self.stage_seed("world"), ..cfg.world.clone() };
        let world = generate_world(&world_cfg).map_err(&st)?;
        let mut rng = seeded(self.stage_seed("dataset"));
        let dataset =
            make_dataset(&world, cfg.dataset.utterances_per_speaker, cfg.dataset.split, &mut rng).map_err(&st)?;
        self.finish("world", DATASET, "world", inputs, dataset.to_jsonl().as_bytes())
    }

    pub fn train_encoder(&self) -> CliResult<Outcome> {
        let mut inputs = Inputs::new();
        self.dataset_input(&mut inputs)?;
        if self.up_to_date("encoder", ENCODER, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let dataset = self.load_dataset()?;
        let mut rng = seeded(self.stage_seed("encoder"));
        let trained = train_encoder(&dataset, &self.config.encoder, &mut rng).map_err(CliError::stage("train-encoder"))?;
        eprintln!("train-encoder: loss {:.5} -> held-out {:.5}", trained.initial_loss, trained.heldout_loss);
        let mut ck = trained.params.to_checkpoint();
        ck.meta["training"] = json!({ "loss_history": trained.loss_history, "heldout_loss": trained.heldout_loss });
        self.finish("encoder", ENCODER, "encoder", inputs, ck.to_json().as_bytes())
    }

    pub fn train_classifier(&self) -> CliResult<Outcome> {
        let mut inputs = Inputs::new();
        self.dataset_input(&mut inputs)?;
        if self.up_to_date("classifier", CLASSIFIER, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let dataset = self.load_dataset()?;
        let mut rng = seeded(self.stage_seed("classifier"));
        let cfg = &self.config;
        let trained = train_classifier(&dataset, &cfg.classifier, &cfg.schedule, cfg.decoder.t_min, &mut rng)
            .map_err(CliError::stage("train-classifier"))?;
        eprintln!(
            "train-classifier: held-out frame accuracy {:.4}, utterance accuracy {:.4}",
            trained.report.frame_accuracy, trained.report.utterance_accuracy
        );
        let mut ck = trained.params.to_checkpoint();
        ck.meta["training"] = json!({ "loss_history": trained.loss_history, "report": trained.report });
        self.finish("classifier", CLASSIFIER, "classifier", inputs, ck.to_json().as_bytes())
    }

    /// All variants share the `decoder` seed, so they start from the same
    /// initialization and see the same minibatches and noise.
    pub fn train_decoder(&self, kind: VariantKind) -> CliResult<Outcome> {
        let stage = format!("decoder-{}", kind.as_str());
        let artifact = decoder_artifact(kind);
        let mut inputs = Inputs::new();
        self.dataset_input(&mut inputs)?;
        self.input(&mut inputs, CLASSIFIER, "classifier", "train-classifier")?;
        if self.up_to_date(&stage, &artifact, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let dataset = self.load_dataset()?;
        let st = CliError::stage("train-decoder");
        let classifier = ClassifierParams::from_checkpoint(&self.load_checkpoint(CLASSIFIER)?).map_err(&st)?;
        let cfg = &self.config;
        let variant = cfg.variant(kind);
        let mut rng = seeded(self.stage_seed("decoder"));
        let trained = train_decoder(&dataset, &classifier, &variant, &cfg.decoder, &cfg.schedule, &mut rng).map_err(&st)?;
        eprintln!(
            "train-decoder {}: validation loss {:.4} -> {:.4}, {} attack calls, max |delta| {:.4}",
            kind.as_str(),
            trained.initial_val_loss,
            trained.final_val_loss,
            trained.budget.calls,
            trained.budget.max_norm
        );
        let manifest = DecoderManifest {
            variant,
            schedule: cfg.schedule,
            t_min: cfg.decoder.t_min,
            world_fingerprint: dataset.world_fingerprint(),
        };
        let mut ck = trained.params.to_checkpoint(&manifest);
        ck.meta["training"] = json!({
            "history": trained.history,
            "budget": trained.budget,
            "initial_val_loss": trained.initial_val_loss,
            "final_val_loss": trained.final_val_loss,
        });
        self.finish(&stage, &artifact, "decoder", inputs, ck.to_json().as_bytes())
    }

    fn load_decoder(&self, kind: VariantKind, dataset: &Dataset) -> CliResult<DecoderParams> {
        let artifact = decoder_artifact(kind);
        let (params, manifest) = DecoderParams::from_checkpoint(&self.load_checkpoint(&artifact)?)
            .map_err(CliError::stage("load decoder"))?;
        if manifest.world_fingerprint != dataset.world_fingerprint() {
            return Err(CliError::Artifact(format!("{artifact} was trained on a different world than {DATASET}")));
        }
        if manifest.variant != self.config.variant(kind) {
            return Err(CliError::Artifact(format!("{artifact} holds a different training variant")));
        }
        Ok(params)
    }

    pub fn attack(&self) -> CliResult<Outcome> {
        let mut inputs = Inputs::new();
        self.dataset_input(&mut inputs)?;
        self.input(&mut inputs, ENCODER, "encoder", "train-encoder")?;
        self.input(&mut inputs, CLASSIFIER, "classifier", "train-classifier")?;
        for kind in VariantKind::ALL {
            self.input(&mut inputs, &decoder_artifact(kind), &format!("decoder-{}", kind.as_str()), "train-decoder")?;
        }
        if self.up_to_date("attack", ATTACK, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let dataset = self.load_dataset()?;
        let st = CliError::stage("attack");
        let encoder = EncoderParams::from_checkpoint(&self.load_checkpoint(ENCODER)?).map_err(&st)?;
        let classifier = ClassifierParams::from_checkpoint(&self.load_checkpoint(CLASSIFIER)?).map_err(&st)?;
        let [vanilla, spk, adv] = VariantKind::ALL.map(|k| self.load_decoder(k, &dataset));
        let (vanilla, spk, adv) = (vanilla?, spk?, adv?);
        let models = BenchModels { encoder: &encoder, vanilla: &vanilla, spk: Some(&spk), adv: Some(&adv), classifier: &classifier };
        let cfg = &self.config;
        let pairs = protocol_pairs(&dataset.test, dataset.world.n_speakers(), cfg.eval.targets_per_source);
        let bench = BenchConfig {
            reverse: cfg.reverse,
            schedule: cfg.schedule,
            pgd: cfg.pgd,
            seed: self.stage_seed("attack"),
        };
        let runs = run_methods(&MethodId::ALL, &models, &dataset.test, &pairs, &bench).map_err(&st)?;
        let text = attack_to_json(&runs);
        self.finish("attack", ATTACK, "attack", inputs, text.as_bytes())
    }

    pub fn eval(&self) -> CliResult<Outcome> {
        let mut inputs = Inputs::new();
        self.dataset_input(&mut inputs)?;
        self.input(&mut inputs, CLASSIFIER, "classifier", "train-classifier")?;
        self.input(&mut inputs, ATTACK, "attack", "attack")?;
        if self.up_to_date("eval", EVAL, &inputs) {
            return Ok(Outcome::UpToDate);
        }
        let st = CliError::stage("eval");
        let dataset = self.load_dataset()?;
        let classifier = ClassifierParams::from_checkpoint(&self.load_checkpoint(CLASSIFIER)?).map_err(&st)?;
        let accuracy = diffattack_core::classifier::evaluate_classifier(&classifier, &dataset.test).map_err(&st)?;
        let text = fs::read_to_string(self.out.join(ATTACK)).map_err(|e| CliError::Artifact(format!("{ATTACK}: {e}")))?;
        let runs = attack_from_json(&text)?;
        let real = frames_by_speaker(dataset.all_utterances()).map_err(&st)?;
        let metrics = runs
            .iter()
            .map(|r| summarize_run(r, &real, self.config.seed))
            .collect::<diffattack_core::Result<Vec<_>>>()
            .map_err(&st)?;
        let result = EvalResult {
            format_version: RESULT_FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            classifier_accuracy: accuracy,
            budget: runs.iter().map(|r| (r.method, r.budget)).collect(),
            metrics,
        };
        let mut text = serde_json::to_string_pretty(&result).expect("eval result serializes");
        text.push('\n');
        self.finish("eval", EVAL, "eval", inputs, text.as_bytes())
    }

    pub fn report(&self) -> CliResult<Outcome> {
        let mut inputs = Inputs::new();
        self.input(&mut inputs, EVAL, "eval", "eval")?;
        if self.up_to_date("report", REPORT_CSV, &inputs) && self.out.join(REPORT_MD).exists() {
            return Ok(Outcome::UpToDate);
        }
        let result = self.load_eval()?;
        let report = build_report(&self.config_hash, result.metrics).map_err(CliError::stage("report"))?;
        let md = format!("# Attack success and quality\n\n{}", report.to_markdown());
        fs::write(self.out.join(REPORT_MD), &md).map_err(|e| CliError::Artifact(format!("{REPORT_MD}: {e}")))?;
        let csv = report.to_csv().map_err(CliError::stage("report"))?;
        print!("{md}");
        self.finish("report", REPORT_CSV, "report", inputs, csv.as_bytes())
    }

    pub fn load_eval(&self) -> CliResult<EvalResult> {
        let text = fs::read_to_string(self.out.join(EVAL)).map_err(|e| CliError::Artifact(format!("{EVAL}: {e}")))?;
        let result: EvalResult =
            serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{EVAL}: {e}")))?;
        if result.format_version != RESULT_FORMAT_VERSION {
            return Err(CliError::Artifact(format!("{EVAL}: format_version {}", result.format_version)));
        }
        Ok(result)
    }

    pub fn load_report(&self) -> CliResult<EvalReport> {
        let text =
            fs::read_to_string(self.out.join(REPORT_CSV)).map_err(|e| CliError::Artifact(format!("{REPORT_CSV}: {e}")))?;
        EvalReport::from_csv(&text).map_err(CliError::stage("load report"))
    }

    pub fn all(&self) -> CliResult<()> {
        self.world()?;
        self.train_encoder()?;
        self.train_classifier()?;
        for kind in VariantKind::ALL {
            self.train_decoder(kind)?;
        }
        self.attack()?;
        self.eval()?;
        self.report()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub format_version: u32,
    pub config_hash: String,
    pub classifier_accuracy: AccuracyReport,
    pub budget: BTreeMap<MethodId, BudgetStats>,
    pub metrics: Vec<MethodMetrics>,
}

#[derive(Serialize)]
struct GeneratedOut<'a> {
    pair: AttackPair,
    prediction: usize,
    frames: Dec17Rows<'a>,
    perturb_l2: Dec17<'a>,
    perturb_linf: Dec17<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedIn {
    pair: AttackPair,
    prediction: usize,
    frames: Vec<Vec<f64>>,
    perturb_l2: Vec<f64>,
    perturb_linf: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodRunIn {
    method: MethodId,
    budget: BudgetStats,
    outputs: Vec<GeneratedIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackIn {
    format_version: u32,
    runs: Vec<MethodRunIn>,
}

fn attack_to_json(runs: &[MethodRun]) -> String {
    let rows: Vec<Vec<Vec<Vec<f64>>>> = runs
        .iter()
        .map(|r| r.outputs.iter().map(|g| (0..g.frames.rows()).map(|i| g.frames.row(i).to_vec()).collect()).collect())
        .collect();
    let body: Vec<serde_json::Value> = runs
        .iter()
        .zip(&rows)
        .map(|(r, frames)| {
            let outputs: Vec<GeneratedOut> = r
                .outputs
                .iter()
                .zip(frames)
                .map(|(g, f)| GeneratedOut {
                    pair: g.pair,
                    prediction: g.prediction,
                    frames: Dec17Rows(f),
                    perturb_l2: Dec17(&g.perturb_l2),
                    perturb_linf: Dec17(&g.perturb_linf),
                })
                .collect();
            json!({ "method": r.method, "budget": r.budget, "outputs": outputs })
        })
        .collect();
    let mut text = serde_json::to_string(&json!({ "format_version": RESULT_FORMAT_VERSION, "runs": body }))
        .expect("attack output serializes");
    text.push('\n');
    text
}

fn attack_from_json(text: &str) -> CliResult<Vec<MethodRun>> {
    let raw: AttackIn = serde_json::from_str(text).map_err(|e| CliError::Artifact(format!("{ATTACK}: {e}")))?;
    if raw.format_version != RESULT_FORMAT_VERSION {
        return Err(CliError::Artifact(format!("{ATTACK}: format_version {}", raw.format_version)));
    }
    raw.runs
        .into_iter()
        .map(|r| {
            let outputs = r
                .outputs
                .into_iter()
                .map(|g| {
                    let rows: Vec<&[f64]> = g.frames.iter().map(|v| &v[..]).collect();
                    let frames = Tensor::from_rows(&rows).map_err(|e| CliError::Artifact(format!("{ATTACK}: {e}")))?;
                    Ok(Generated {
                        pair: g.pair,
                        frames,
                        prediction: g.prediction,
                        perturb_l2: g.perturb_l2,
                        perturb_linf: g.perturb_linf,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(MethodRun { method: r.method, outputs, budget: r.budget })
        })
        .collect()
}
