use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, OptimizerState};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::model::{ConSepConfig, ModelParams};

/// Header document inside a checkpoint directory.
pub const HEADER_FILE: &str = "header.json";
/// Little-endian array blob inside a checkpoint directory.
pub const BLOB_FILE: &str = "params.bin";

const FORMAT: &str = "consep-checkpoint";
const VERSION: u32 = 1;

/// Where a training run stands; enough to continue it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProgress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    /// Shuffling generator, positioned after the current epoch's shuffle.
    pub rng: ChaCha8Rng,
    /// Item order of the epoch in progress (empty between epochs).
    pub order: Vec<usize>,
    /// Items of `order` already visited.
    pub cursor: usize,
    /// Loss accumulated over the visited items of the current epoch.
    pub epoch_loss_sum: f64,
    /// Best selection score so far (higher is better).
    pub best_score: Option<f64>,
}

impl TrainingProgress {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5348_5546);
        Self {
            epoch: 0,
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch_loss_sum: 0.0,
            best_score: None,
        }
    }
}

/// Everything persisted for a model: configuration, parameters, optimizer
/// moments and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ConSepConfig,
    pub params: ModelParams<F>,
    pub optimizer: Option<OptimizerState<F>>,
    pub progress: TrainingProgress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    config: ConSepConfig,
    param_count: usize,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    progress: TrainingProgress,
}

const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

/// Writes `ckpt` into directory `dir` (created if needed).
pub fn save_checkpoint<F: Float>(dir: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor<F>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    };
    for (name, t) in ckpt.params.iter() {
        push(name.to_string(), t);
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, t) in &opt.m {
            push(format!("{MOMENT1}{name}"), t);
        }
        for (name, t) in &opt.v {
            push(format!("{MOMENT2}{name}"), t);
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: F::DTYPE.into(),
        config: ckpt.config.clone(),
        param_count: ckpt.params.numel(),
        tensors: entries,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
        progress: ckpt.progress.clone(),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    let header_path = dir.join(HEADER_FILE);
    std::fs::write(&header_path, text + "\n").map_err(|e| Error::io(&header_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

fn decode(bytes: &[u8], dtype: &str) -> Result<Vec<f64>> {
    match dtype {
        "f32" => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::read_le(c).as_f64())
            .collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(f64::read_le).collect()),
        other => Err(Error::format(format!("unknown checkpoint dtype '{other}'"))),
    }
}

/// Whether `dir` holds a checkpoint header.
pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join(HEADER_FILE).is_file()
}

/// Reads a checkpoint, validating every tensor against the stored
/// configuration. Values are converted to `F` if stored at another precision.
pub fn load_checkpoint<F: Float>(dir: &Path) -> Result<Checkpoint<F>> {
    let header_path = dir.join(HEADER_FILE);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", header_path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::format(format!(
            "{}: not a version {VERSION} checkpoint",
            header_path.display()
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let blob_path = dir.join(BLOB_FILE);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(format!("unknown checkpoint dtype '{other}'"))),
    };
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected * width {
        return Err(Error::format(format!(
            "{}: blob holds {} bytes, header describes {}",
            blob_path.display(),
            bytes.len(),
            expected * width
        )));
    }
    let values = decode(&bytes, &header.dtype)?;

    let mut params = IndexMap::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    let mut next = 0;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.offset != next {
            return Err(Error::format(format!(
                "tensor '{}' is not contiguous",
                entry.name
            )));
        }
        next += len;
        let data = values[entry.offset..entry.offset + len]
            .iter()
            .map(|&x| F::of(x))
            .collect();
        let t = Tensor::new(&entry.shape, data)?;
        let (map, name) = if let Some(n) = entry.name.strip_prefix(MOMENT1) {
            (&mut m, n)
        } else if let Some(n) = entry.name.strip_prefix(MOMENT2) {
            (&mut v, n)
        } else {
            (&mut params, entry.name.as_str())
        };
        if map.insert(name.to_string(), t).is_some() {
            return Err(Error::format(format!(
                "tensor '{}' appears twice",
                entry.name
            )));
        }
    }
    let params = ModelParams::from_tensors(&header.config, params)?;
    if params.numel() != header.param_count {
        return Err(Error::format(format!(
            "header declares {} parameters, tensors hold {}",
            header.param_count,
            params.numel()
        )));
    }
    let optimizer = match header.optimizer {
        Some(h) => {
            let m = ModelParams::from_tensors(&header.config, m)?.into_tensors();
            let v = ModelParams::from_tensors(&header.config, v)?.into_tensors();
            Some(OptimizerState {
                config: h.config,
                step: h.step,
                m,
                v,
            })
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::format("optimizer moments without optimizer header")),
    };
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        progress: header.progress,
    })
}
