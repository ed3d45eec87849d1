//! Checkpoint directories.
//!
//! A directory holds `ckpt_{step}.bin` files plus a `meta.json` index. Each
//! binary file starts with the magic `CATCKPT1`, then a little-endian `u64`
//! header length, then a JSON header (model config, extensions, step, config
//! hash and the tensor names and shapes), then every tensor's data as
//! little-endian `f32` in header order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use catlab_core::model::{Extensions, ModelConfig, Parameters, Tensor};
use catlab_core::trainer::{config_hash, Checkpoint};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"CATCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    step: usize,
    config_hash: String,
    config: ModelConfig,
    ext: Extensions,
    tensors: Vec<TensorHeader>,
}

/// Index of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub ext: Extensions,
    pub config_hash: String,
    /// Steps with a `ckpt_{step}.bin` file, ascending.
    pub steps: Vec<usize>,
    /// Step of the file to load as "the" model of this directory.
    pub model_step: usize,
    /// Steps averaged into the model file, when it is an average.
    #[serde(default)]
    pub averaged_from: Vec<usize>,
    /// Free-form provenance (how the model was produced).
    #[serde(default)]
    pub note: String,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

pub fn write_checkpoint(path: &Path, params: &Parameters<f32>, step: usize) -> Result<()> {
    let header = Header {
        step,
        config_hash: format!("{:016x}", config_hash(params)),
        config: params.config.clone(),
        ext: params.ext,
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &params.tensors {
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads one checkpoint file, checking the layout and the stored config hash.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    ensure!(
        bytes.len() >= 16 && &bytes[..8] == MAGIC,
        "{}: not a checkpoint file",
        path.display()
    );
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len());
    let Some(data_start) = body else {
        bail!("{}: truncated header", path.display());
    };
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let mut data = bytes[data_start..].chunks_exact(4);
    ensure!(
        data.remainder().is_empty(),
        "{}: data is not a whole number of f32 values",
        path.display()
    );
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        let values: Vec<f32> = data
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ensure!(
            values.len() == n,
            "{}: tensor `{}` is truncated",
            path.display(),
            th.name
        );
        tensors.push(Tensor {
            name: th.name,
            shape: th.shape,
            data: values,
        });
    }
    ensure!(data.next().is_none(), "{}: trailing data", path.display());
    let params = Parameters::from_tensors(header.config, header.ext, tensors)?;
    let ckpt = Checkpoint::new(params, header.step);
    let found = format!("{:016x}", ckpt.config_hash);
    ensure!(
        found == header.config_hash,
        "{}: config hash {} != stored {}",
        path.display(),
        found,
        header.config_hash
    );
    Ok(ckpt)
}

/// Writes `checkpoints` and the model to `dir`. The model goes to
/// `ckpt_{model_step}.bin` unless a checkpoint of that step is already
/// being written.
pub fn save_model_dir(
    dir: &Path,
    model: &Parameters<f32>,
    model_step: usize,
    checkpoints: &[Checkpoint<f32>],
    averaged_from: &[usize],
    note: &str,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut steps = Vec::new();
    for c in checkpoints {
        if c.step != model_step {
            write_checkpoint(&checkpoint_path(dir, c.step), &c.params, c.step)?;
            steps.push(c.step);
        }
    }
    write_checkpoint(&checkpoint_path(dir, model_step), model, model_step)?;
    steps.push(model_step);
    steps.sort_unstable();
    steps.dedup();
    let meta = CheckpointMeta {
        config: model.config.clone(),
        ext: model.ext,
        config_hash: format!("{:016x}", config_hash(model)),
        steps,
        model_step,
        averaged_from: averaged_from.to_vec(),
        note: note.into(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the model file named by `meta.json`.
pub fn load_model_dir(dir: &Path) -> Result<Parameters<f32>> {
    let meta = read_meta(dir)?;
    let ckpt = read_checkpoint(&checkpoint_path(dir, meta.model_step))?;
    ensure!(
        format!("{:016x}", ckpt.config_hash) == meta.config_hash,
        "{}: meta.json config hash does not match the model file",
        dir.display()
    );
    Ok(ckpt.params)
}
