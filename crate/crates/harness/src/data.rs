//! Line-delimited JSON datasets and task construction from a config.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use s4dec_core::model::{Example, Target};
use s4dec_core::tasks::{
    concat_longform, gen_continuous_with, gen_copy_task, gen_reverse_task, ContinuousExample, DiscreteExample,
    SinusoidDictionary,
};
use s4dec_core::tensor::Tensor;

use crate::config::{TaskKind, TaskSection};
use crate::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Discrete(Vec<DiscreteExample>),
    Continuous(Vec<ContinuousExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Discrete(d) => d.len(),
            Dataset::Continuous(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrowed training examples.
    pub fn examples(&self) -> Vec<Example<'_>> {
        match self {
            Dataset::Discrete(d) => d
                .iter()
                .map(|e| Example {
                    source: &e.source,
                    target: Target::Tokens(&e.target),
                })
                .collect(),
            Dataset::Continuous(d) => d
                .iter()
                .map(|e| Example {
                    source: &e.source,
                    target: Target::Frames(&e.target),
                })
                .collect(),
        }
    }

    pub fn max_target_len(&self) -> usize {
        match self {
            Dataset::Discrete(d) => d.iter().map(|e| e.inner().len()).max().unwrap_or(0),
            Dataset::Continuous(d) => d.iter().map(|e| e.target.shape()[0]).max().unwrap_or(0),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscreteRecord {
    src: Vec<usize>,
    tgt: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinuousRecord {
    src: Vec<usize>,
    tgt_shape: [usize; 2],
    tgt: String,
}

pub fn encode_frames(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_frames(shape: [usize; 2], text: &str) -> Result<Tensor<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| HarnessError::Data(format!("bad base64 frames: {e}")))?;
    if bytes.len() != shape[0] * shape[1] * 4 {
        return Err(HarnessError::Data(format!(
            "frames have {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            shape[0] * shape[1] * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |json: String| writeln!(w, "{json}").map_err(|e| HarnessError::io(path, e));
    match data {
        Dataset::Discrete(d) => {
            for e in d {
                line(serde_json::to_string(&DiscreteRecord {
                    src: e.source.clone(),
                    tgt: e.target.clone(),
                })?)?;
            }
        }
        Dataset::Continuous(d) => {
            for e in d {
                line(serde_json::to_string(&ContinuousRecord {
                    src: e.source.clone(),
                    tgt_shape: [e.target.shape()[0], e.target.shape()[1]],
                    tgt: encode_frames(&e.target),
                })?)?;
            }
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads either record kind; mixing kinds in one file is an error.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut discrete = Vec::new();
    let mut continuous = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: serde_json::Error| HarnessError::Data(format!("{}:{}: {e}", path.display(), n + 1));
        let value: serde_json::Value = serde_json::from_str(&line).map_err(at)?;
        if value.get("tgt_shape").is_some() {
            let r: ContinuousRecord = serde_json::from_value(value).map_err(at)?;
            continuous.push(ContinuousExample {
                target: decode_frames(r.tgt_shape, &r.tgt)?,
                source: r.src,
            });
        } else {
            let r: DiscreteRecord = serde_json::from_value(value).map_err(at)?;
            if r.tgt.len() < 2 {
                return Err(HarnessError::Data(format!(
                    "{}:{}: target lacks BOS/EOS",
                    path.display(),
                    n + 1
                )));
            }
            discrete.push(DiscreteExample {
                source: r.src,
                target: r.tgt,
            });
        }
    }
    match (discrete.is_empty(), continuous.is_empty()) {
        (_, true) => Ok(Dataset::Discrete(discrete)),
        (true, false) => Ok(Dataset::Continuous(continuous)),
        (false, false) => Err(HarnessError::Data(format!("{} mixes record kinds", path.display()))),
    }
}

/// Train and validation splits for a task. Validation draws from the next
/// data seed; the continuous splits share one sinusoid dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
}

pub fn generate(task: &TaskSection, n: usize, seed: u64) -> Result<Dataset> {
    let range = (task.min_len, task.max_len);
    Ok(match task.kind {
        TaskKind::Copy => Dataset::Discrete(gen_copy_task(n, range, task.vocab, seed)?),
        TaskKind::Reverse => Dataset::Discrete(gen_reverse_task(n, range, task.vocab, seed)?),
        TaskKind::Continuous => {
            let dict = SinusoidDictionary::new(task.vocab, task.features, task.data_seed);
            Dataset::Continuous(gen_continuous_with(&dict, n, range, seed)?)
        }
    })
}

impl TaskData {
    pub fn generate(task: &TaskSection) -> Result<Self> {
        Ok(Self {
            train: generate(task, task.train_size, task.data_seed)?,
            valid: generate(task, task.valid_size, task.data_seed.wrapping_add(1))?,
        })
    }

    /// Validation examples concatenated `k` at a time.
    pub fn longform(&self, k: usize) -> Result<Vec<DiscreteExample>> {
        match &self.valid {
            Dataset::Discrete(d) => Ok(concat_longform(d, k)?),
            Dataset::Continuous(_) => Err(HarnessError::Config("long-form sets need a discrete task".into())),
        }
    }
}
