//! Versioned JSON checkpoints for parameter tensors.
//!
//! Layout: `{format_version, module, shapes, meta, tensors}`. Tensors are
//! flat row-major arrays in 17-digit decimal, so identical parameters always
//! produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{sha256_hex, Dec17};
use crate::error::{Error, Result};
use crate::grad::{Activation, Linear, MlpParams, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    module: &'a str,
    shapes: Vec<&'a [usize]>,
    meta: &'a Value,
    tensors: Vec<Dec17<'a>>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format_version: u32,
    module: String,
    shapes: Vec<Vec<usize>>,
    #[serde(default)]
    meta: Value,
    tensors: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(module: impl Into<String>, meta: Value, tensors: Vec<Tensor>) -> Self {
        Self { module: module.into(), meta, tensors }
    }

    pub fn to_json(&self) -> String {
        let out = CheckpointOut {
            format_version: CHECKPOINT_FORMAT_VERSION,
            module: &self.module,
            shapes: self.tensors.iter().map(|t| t.shape()).collect(),
            meta: &self.meta,
            tensors: self.tensors.iter().map(|t| Dec17(t.data())).collect(),
        };
        let mut s = serde_json::to_string(&out).expect("checkpoint serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CheckpointIn =
            serde_json::from_str(text).map_err(|e| Error::format(e.line(), e.to_string()))?;
        if raw.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                1,
                format!(
                    "format_version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                    raw.format_version
                ),
            ));
        }
        if raw.shapes.len() != raw.tensors.len() {
            return Err(Error::format(1, "field `shapes` and `tensors` differ in length"));
        }
        let tensors = raw
            .shapes
            .into_iter()
            .zip(raw.tensors)
            .enumerate()
            .map(|(i, (shape, data))| {
                Tensor::new(shape, data).map_err(|e| Error::format(1, format!("tensors[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { module: raw.module, meta: raw.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn expect_module(&self, module: &str) -> Result<()> {
        if self.module != module {
            return Err(Error::format(
                1,
                format!("field `module`: expected {module:?}, found {:?}", self.module),
            ));
        }
        Ok(())
    }
}

/// SHA-256 over shapes and raw little-endian values of a parameter list.
pub fn params_fingerprint(tensors: &[&Tensor]) -> String {
    let mut bytes = Vec::new();
    for t in tensors {
        bytes.extend((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            bytes.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

pub(crate) fn mlp_meta(mlp: &MlpParams) -> Value {
    serde_json::json!({ "sizes": mlp.sizes(), "activations": mlp.activations })
}

/// Rebuilds an MLP from consecutive (weight, bias) tensors.
pub(crate) fn mlp_from_tensors(tensors: &[Tensor], activations: Vec<Activation>) -> Result<MlpParams> {
    if !tensors.len().is_multiple_of(2) {
        return Err(Error::format(1, "odd number of MLP tensors"));
    }
    let layers = tensors
        .chunks(2)
        .map(|p| Linear { weight: p[0].clone(), bias: p[1].clone() })
        .collect();
    MlpParams::from_layers(layers, activations).map_err(|e| Error::format(1, e.to_string()))
}

pub(crate) fn activations_from_meta(meta: &Value, key: &str) -> Result<Vec<Activation>> {
    serde_json::from_value(meta[key]["activations"].clone())
        .map_err(|e| Error::format(1, format!("field `meta.{key}.activations`: {e}")))
}
