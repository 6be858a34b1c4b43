//! Self-describing JSON checkpoints: model dimensions, vocabularies and
//! every parameter tensor by name. Floats are written in shortest
//! round-trip form, so loading restores parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "sentispan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    words: Vec<String>,
    chars: Vec<char>,
    tensors: Vec<Tensor>,
}

pub fn to_json(model: &Model) -> Result<String> {
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        words: model.vocab.words().to_vec(),
        chars: model.vocab.chars().to_vec(),
        tensors: model
            .params
            .named()
            .into_iter()
            .map(|(name, p)| Tensor {
                name,
                rows: p.rows,
                cols: p.cols,
                values: p.value.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Model> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.format != FORMAT || ck.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    ck.config.validate()?;
    let vocab = Vocabulary::from_lists(ck.words, ck.chars)?;
    let mut params = ModelParams::zeros(&ck.config, vocab.num_words(), vocab.num_chars());
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != ck.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            ck.tensors.len()
        )));
    }
    for ((name, slot), t) in names.iter().zip(params.params_mut()).zip(ck.tensors) {
        if *name != t.name || slot.rows != t.rows || slot.cols != t.cols || t.values.len() != t.rows * t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({}x{}) does not fit {} ({}x{})",
                t.name, t.rows, t.cols, name, slot.rows, slot.cols
            )));
        }
        slot.value = t.values;
    }
    Ok(Model::new(ck.config, vocab, params))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_json(&std::fs::read_to_string(path)?)
}
