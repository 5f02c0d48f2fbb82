//! The single JSON run configuration.

use std::path::Path;

use diffattack_core::classifier::ClassifierHyper;
use diffattack_core::codec::sha256_hex;
use diffattack_core::decoder::{DecoderHyper, TrainVariant};
use diffattack_core::diffusion::{NoiseSchedule, ReverseConfig};
use diffattack_core::encoder::EncoderHyper;
use diffattack_core::pgd::PgdConfig;
use diffattack_core::world::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub utterances_per_speaker: usize,
    pub split: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpkConstraintConfig {
    pub w_spk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvConstraintConfig {
    pub w_adv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Targets per source utterance; all other speakers when absent.
    #[serde(default)]
    pub targets_per_source: Option<usize>,
}

/// `pgd` is shared by adversarial training and the post-hoc perturbation so
/// both run at the same budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub schedule: NoiseSchedule,
    pub encoder: EncoderHyper,
    pub classifier: ClassifierHyper,
    pub decoder: DecoderHyper,
    pub spk_constraint: SpkConstraintConfig,
    pub adv_constraint: AdvConstraintConfig,
    pub pgd: PgdConfig,
    pub reverse: ReverseConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum VariantKind {
    Vanilla,
    Spk,
    Adv,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Vanilla, VariantKind::Spk, VariantKind::Adv];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Vanilla => "vanilla",
            VariantKind::Spk => "spk",
            VariantKind::Adv => "adv",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 0,
            pgd: PgdConfig::for_offset_scale(world.offset_scale),
            world,
            dataset: DatasetConfig { utterances_per_speaker: 40, split: 0.75 },
            schedule: NoiseSchedule::default(),
            encoder: EncoderHyper { steps: 2000, ..Default::default() },
            classifier: ClassifierHyper::default(),
            decoder: DecoderHyper::default(),
            spk_constraint: SpkConstraintConfig { w_spk: 1.0 },
            adv_constraint: AdvConstraintConfig { w_adv: 1.0 },
            reverse: ReverseConfig::default(),
            eval: EvalConfig { targets_per_source: None },
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Dotted paths of every field that violates its constraint.
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad: Vec<String> = self.world.invalid_fields().into_iter().map(|f| format!("world.{f}")).collect();
        let mut check = |ok: bool, name: &str| {
            if !ok {
                bad.push(name.to_string());
            }
        };
        check(self.dataset.utterances_per_speaker >= 2, "dataset.utterances_per_speaker");
        check(self.dataset.split > 0.0 && self.dataset.split < 1.0, "dataset.split");
        let (b0, b1) = (self.schedule.beta0, self.schedule.beta1);
        check(positive(b0), "schedule.beta0");
        check(b1.is_finite() && b1 >= b0, "schedule.beta1");
        check(self.encoder.steps >= 1, "encoder.steps");
        check(self.encoder.batch_size >= 1, "encoder.batch_size");
        check(positive(self.encoder.lr), "encoder.lr");
        check(self.classifier.steps >= 1, "classifier.steps");
        check(self.classifier.batch_size >= 1, "classifier.batch_size");
        check(positive(self.classifier.lr), "classifier.lr");
        check(self.decoder.steps >= 1, "decoder.steps");
        check(self.decoder.batch_size >= 1, "decoder.batch_size");
        check(self.decoder.e_dim >= 1, "decoder.e_dim");
        check(positive(self.decoder.lr), "decoder.lr");
        check(self.decoder.t_min > 0.0 && self.decoder.t_min < 1.0, "decoder.t_min");
        check(self.spk_constraint.w_spk >= 0.0 && self.spk_constraint.w_spk.is_finite(), "spk_constraint.w_spk");
        check(self.adv_constraint.w_adv >= 0.0 && self.adv_constraint.w_adv.is_finite(), "adv_constraint.w_adv");
        check(self.reverse.n_steps >= 1, "reverse.n_steps");
        check(self.reverse.t_min > 0.0 && self.reverse.t_min < 1.0, "reverse.t_min");
        let s = self.world.n_speakers;
        let k = self.eval.targets_per_source.unwrap_or(s.saturating_sub(1));
        check(k >= 1 && k < s.max(1), "eval.targets_per_source");

        // Fréchet statistics need more frames than dimensions per speaker group.
        let d = self.world.feature_dim;
        let fpu = self.world.frames_per_utterance;
        let ups = self.dataset.utterances_per_speaker;
        check(ups * fpu > d, "dataset.utterances_per_speaker");
        let n_test = ups.saturating_sub(((self.dataset.split * ups as f64).round() as usize).clamp(1, ups.max(2) - 1));
        check(k * n_test * fpu > d, "eval.targets_per_source");
        bad.extend(self.pgd.invalid_fields().into_iter().map(|f| format!("pgd.{f}")));
        bad.sort();
        bad.dedup();
        bad
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = self.invalid_fields();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("invalid fields: {}", bad.join(", "))))
        }
    }

    pub fn variant(&self, kind: VariantKind) -> TrainVariant {
        match kind {
            VariantKind::Vanilla => TrainVariant::Vanilla,
            VariantKind::Spk => TrainVariant::SpkConstraint { w_spk: self.spk_constraint.w_spk },
            VariantKind::Adv => TrainVariant::AdvConstraint { pgd: self.pgd, w_adv: self.adv_constraint.w_adv },
        }
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the sections an artifact depends on, so that editing e.g.
    /// the evaluation protocol does not invalidate trained models.
    pub fn stage_hash(&self, stage: &str) -> String {
        let world = json!({ "seed": self.seed, "world": self.world, "dataset": self.dataset });
        let classifier = json!({ "world": world, "classifier": self.classifier, "schedule": self.schedule,
            "t_min": self.decoder.t_min });
        let decoder = |kind: VariantKind| {
            json!({ "world": world, "classifier": classifier, "decoder": self.decoder,
                "variant": self.variant(kind), "schedule": self.schedule })
        };
        let value = match stage {
            "world" => world,
            "encoder" => json!({ "world": world, "encoder": self.encoder }),
            "classifier" => classifier,
            "decoder-vanilla" => decoder(VariantKind::Vanilla),
            "decoder-spk" => decoder(VariantKind::Spk),
            "decoder-adv" => decoder(VariantKind::Adv),
            _ => serde_json::to_value(self).expect("config serializes"),
        };
        sha256_hex(format!("{stage}:{value}").as_bytes())
    }
}
