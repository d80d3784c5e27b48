//! Checkpoints are safetensors archives: network parameters as `<role>.<param>`,
//! optimizer moments as `optim.<gen|dis>.<m|v>.<index>`, and the config and
//! counters as JSON in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Adam, Networks, TrainState, Trainer};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::networks::NetRole;
use crate::tensor::Tensor;

const FORMAT: &str = "deshadow-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Counters {
    epoch: usize,
    step: usize,
    gen_opt: Adam,
    dis_opt: Adam,
}

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write `trainer` to `path` (via a temporary file, then rename).
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for role in NetRole::ALL {
        for p in trainer.nets.get(role).params() {
            entries.push((format!("{role}.{}", p.name), p.value.shape().to_vec(), to_bytes(&p.value)));
        }
    }
    for (tag, opt) in [("gen", &trainer.state.gen_opt), ("dis", &trainer.state.dis_opt)] {
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for (k, t) in moments.iter().enumerate() {
                entries.push((format!("optim.{tag}.{kind}.{k}"), t.shape().to_vec(), to_bytes(t)));
            }
        }
    }
    let views = entries
        .iter()
        .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(ck_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let counters = Counters {
        epoch: trainer.state.epoch,
        step: trainer.state.step,
        gen_opt: trainer.state.gen_opt.clone(),
        dis_opt: trainer.state.dis_opt.clone(),
    };
    let metadata = HashMap::from([
        ("format".to_owned(), FORMAT.to_owned()),
        ("config".to_owned(), serde_json::to_string(&trainer.config)?),
        ("state".to_owned(), serde_json::to_string(&counters)?),
    ]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(views, &Some(metadata), &tmp).map_err(ck_err)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_tensor(st: &SafeTensors<'_>, name: &str) -> Result<Tensor<f32>> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(view.shape(), data))
}

/// Restore a trainer, including optimizer state, from `path`.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ck_err)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", field("format")?)));
    }
    let config: Config = serde_json::from_str(field("config")?)?;
    let counters: Counters = serde_json::from_str(field("state")?)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ck_err)?;

    let mut nets = Networks::new(&config.model)?;
    for role in NetRole::ALL {
        for p in nets.get_mut(role).params_mut() {
            let name = format!("{role}.{}", p.name);
            let t = read_tensor(&st, &name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match the configured model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
    }
    let restore = |tag: &str, mut opt: Adam| -> Result<Adam> {
        for kind in ["m", "v"] {
            let mut k = 0;
            let mut out = Vec::new();
            while st.tensor(&format!("optim.{tag}.{kind}.{k}")).is_ok() {
                out.push(read_tensor(&st, &format!("optim.{tag}.{kind}.{k}"))?);
                k += 1;
            }
            if kind == "m" {
                opt.m = out;
            } else {
                opt.v = out;
            }
        }
        if opt.m.len() != opt.v.len() {
            return Err(Error::Checkpoint(format!("optimizer {tag} moments are incomplete")));
        }
        Ok(opt)
    };
    let state = TrainState {
        epoch: counters.epoch,
        step: counters.step,
        gen_opt: restore("gen", counters.gen_opt)?,
        dis_opt: restore("dis", counters.dis_opt)?,
    };
    config.validate()?;
    Ok(Trainer { config, nets, state })
}
