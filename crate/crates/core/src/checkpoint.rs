//! Versioned checkpoint container: model config, both vocabularies, and the
//! named parameter arrays, as JSON.
//!
//! Parameters are stored as `f64`; JSON floats round-trip bit-exactly via
//! the shortest-representation encoder, so save → load reproduces every
//! parameter bit for `f64` states (and exactly recovers `f32` states, since
//! `f32 → f64` is lossless).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    params: Vec<NamedTensor>,
}

/// Serialize a model plus its vocabularies.
pub fn save<T: Scalar>(
    path: &Path,
    state: &ModelState<T>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Result<()> {
    let mut params = Vec::new();
    state.visit_params(&mut |name, tensor| {
        params.push(NamedTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.to_f64_vec(),
        });
    });
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: state.config,
        src_vocab: src_vocab.clone(),
        tgt_vocab: tgt_vocab.clone(),
        params,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::data(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, json)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Load a checkpoint saved by [`save`], returning the rebuilt model and the
/// two vocabularies.
pub fn load<T: Scalar>(path: &Path) -> Result<(ModelState<T>, Vocab, Vocab)> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("malformed checkpoint {}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut state = ModelState::<T>::init(file.config, 0)?;
    let mut cursor = 0usize;
    let mut failure: Option<Error> = None;
    state.visit_params_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some(stored) = file.params.get(cursor) else {
            failure = Some(Error::data("checkpoint is missing parameter arrays"));
            return;
        };
        if stored.name != name || stored.shape != tensor.shape() {
            failure = Some(Error::data(format!(
                "checkpoint parameter {cursor} is '{}' {:?}, expected '{name}' {:?}",
                stored.name,
                stored.shape,
                tensor.shape()
            )));
            return;
        }
        match Tensor::<T>::from_f64_slice(stored.shape.clone(), &stored.data) {
            Ok(t) => *tensor = t,
            Err(e) => failure = Some(e),
        }
        cursor += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cursor != file.params.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} parameter arrays, model expects {cursor}",
            file.params.len()
        )));
    }
    Ok((state, file.src_vocab, file.tgt_vocab))
}
