//! Checkpoint directory: `checkpoint.json` metadata, `checkpoint.rihm`
//! parameters and `optimizer.rihm` Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::io::{load_container, save_container};
use crate::numerics::Tensor;
use crate::text::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "checkpoint.json";
const PARAMS: &str = "checkpoint.rihm";
const OPTIMIZER: &str = "optimizer.rihm";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    epoch: usize,
    adam_step: u64,
    vocab_size: usize,
    model: ModelConfig,
    vocab: Vocabulary,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub state: TrainState,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if ck.vocab.len() != ck.model.vocab_size {
        return Err(Error::Dimension(format!(
            "vocabulary of {} tokens for a model of {}",
            ck.vocab.len(),
            ck.model.vocab_size
        )));
    }
    let meta = Meta {
        version: CHECKPOINT_VERSION,
        epoch: ck.state.epoch,
        adam_step: ck.state.adam.step,
        vocab_size: ck.model.vocab_size,
        model: ck.model.cfg.clone(),
        vocab: ck.vocab.clone(),
    };
    let path = dir.join(META);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    save_container(dir.join(PARAMS), &ck.model.params.named_values())?;
    let mut moments: Vec<(String, Tensor)> = Vec::new();
    for id in ck.model.params.ids() {
        let name = ck.model.params.name(id);
        moments.push((format!("m.{name}"), ck.state.adam.m[id.0].clone()));
        moments.push((format!("v.{name}"), ck.state.adam.v[id.0].clone()));
    }
    save_container(dir.join(OPTIMIZER), &moments)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {} unsupported", meta.version)));
    }
    if meta.vocab.len() != meta.vocab_size {
        return Err(Error::Format("vocabulary size disagrees with metadata".into()));
    }
    let mut model = Model::new(meta.model, meta.vocab_size, 0)?;
    model.params.load_named(&load_container(dir.join(PARAMS))?)?;
    let mut adam = Adam::new(&model.params);
    adam.step = meta.adam_step;
    let moments = load_container(dir.join(OPTIMIZER))?;
    if moments.len() != 2 * model.params.len() {
        return Err(Error::Format("optimizer state does not match the model".into()));
    }
    for (name, t) in moments {
        let (slot, pname) = match name.split_once('.') {
            Some(("m", rest)) => (&mut adam.m, rest),
            Some(("v", rest)) => (&mut adam.v, rest),
            _ => return Err(Error::Format(format!("unexpected optimizer entry {name}"))),
        };
        let id = model
            .params
            .get(pname)
            .ok_or_else(|| Error::Format(format!("optimizer entry for unknown parameter {pname}")))?;
        if slot[id.0].shape() != t.shape() {
            return Err(Error::Format(format!("optimizer entry {name} has shape {:?}", t.shape())));
        }
        slot[id.0] = t;
    }
    Ok(Checkpoint { model, vocab: meta.vocab, state: TrainState { adam, epoch: meta.epoch } })
}
