//! Both decoder variants trained on short sequences, then scored on the
//! validation set and on its k-fold concatenation, plus validation L1
//! curves on the continuous task.

use std::path::Path;

use serde::Serialize;

use s4dec_core::metrics::Metrics;

use crate::config::{RunConfig, TaskKind, VariantName};
use crate::data::{Dataset, TaskData};
use crate::eval::{csv_header, csv_rows, evaluate_discrete, metrics_json, write_csv};
use crate::train::train;
use crate::{create_dir, write_file, HarnessError, Result};

pub const VARIANTS: [VariantName; 2] = [VariantName::S4, VariantName::Transformer];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    InDistribution,
    Longform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricBlock {
    pub seed: u64,
    pub variant: VariantName,
    pub eval_set: EvalSet,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub variant: VariantName,
    pub epoch: usize,
    pub train_l1: Option<f64>,
    pub valid_l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongformReport {
    pub concat_k: usize,
    pub edges: Vec<usize>,
    /// Trainable scalars per variant on the discrete task.
    pub param_counts: Vec<(VariantName, usize)>,
    pub blocks: Vec<MetricBlock>,
    pub curves: Vec<CurvePoint>,
}

impl LongformReport {
    pub fn block(&self, seed: u64, variant: VariantName, set: EvalSet) -> Option<&Metrics> {
        self.blocks
            .iter()
            .find(|b| b.seed == seed && b.variant == variant && b.eval_set == set)
            .map(|b| &b.metrics)
    }

    /// Validation L1 after the last epoch.
    pub fn final_l1(&self, seed: u64, variant: VariantName) -> Option<f64> {
        self.curves
            .iter()
            .filter(|c| c.seed == seed && c.variant == variant)
            .max_by_key(|c| c.epoch)
            .map(|c| c.valid_l1)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let blocks: Vec<_> = self
            .blocks
            .iter()
            .map(|b| {
                serde_json::json!({
                    "seed": b.seed,
                    "variant": b.variant,
                    "eval_set": b.eval_set,
                    "metrics": metrics_json(&b.metrics),
                })
            })
            .collect();
        let params: serde_json::Map<_, _> = self.param_counts.iter().map(|(v, n)| (label(v), (*n).into())).collect();
        serde_json::json!({
            "concat_k": self.concat_k,
            "bucket_edges": self.edges,
            "param_counts": params,
            "blocks": blocks,
            "loss_curves": self.curves,
        })
    }

    /// `report.json`, `buckets.csv` and, when curves exist,
    /// `loss_curves.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&self.to_json())?)?;
        let header = csv_header(&["seed", "variant", "eval_set"]);
        let mut rows = Vec::new();
        for b in &self.blocks {
            let prefix = [b.seed.to_string(), label(&b.variant), label(&b.eval_set)];
            rows.extend(csv_rows(&prefix, &b.metrics));
        }
        write_csv(&dir.join("buckets.csv"), &header, &rows)?;
        if !self.curves.is_empty() {
            let header: Vec<String> = ["seed", "variant", "epoch", "train_l1", "valid_l1"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rows: Vec<Vec<String>> = self
                .curves
                .iter()
                .map(|c| {
                    vec![
                        c.seed.to_string(),
                        label(&c.variant),
                        c.epoch.to_string(),
                        c.train_l1.map_or(String::new(), |v| v.to_string()),
                        c.valid_l1.to_string(),
                    ]
                })
                .collect();
            write_csv(&dir.join("loss_curves.csv"), &header, &rows)?;
        }
        Ok(())
    }
}

/// Serialized name of a unit enum.
fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn with_variant(cfg: &RunConfig, variant: VariantName) -> RunConfig {
    let mut c = cfg.clone();
    c.model.variant = variant;
    c
}

/// Runs every seed in `cfg.seeds` for both variants. Training happens on
/// `cfg.task` (which must be discrete); decoding uses `cfg.beam`. Bucket
/// edges are 1×, 2× and 3× the training max length. Per-run directories
/// and the report files go under `out` when given.
pub fn run_longform_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<LongformReport> {
    cfg.validate()?;
    if cfg.task.kind == TaskKind::Continuous {
        return Err(HarnessError::Config(
            "the long-form experiment trains on a discrete task".into(),
        ));
    }
    let data = TaskData::generate(&cfg.task)?;
    let longform = data.longform(cfg.task.concat_k)?;
    let Dataset::Discrete(valid) = &data.valid else {
        unreachable!("discrete task")
    };
    let curve_data = cfg.curve_task.as_ref().map(TaskData::generate).transpose()?;
    let edges = Metrics::default_edges(cfg.task.max_len);
    let vocab = cfg.task.vocab();

    let mut report = LongformReport {
        concat_k: cfg.task.concat_k,
        edges: edges.clone(),
        param_counts: Vec::new(),
        blocks: Vec::new(),
        curves: Vec::new(),
    };
    for &seed in &cfg.seeds {
        for variant in VARIANTS {
            let vc = with_variant(cfg, variant);
            let run_dir = out.map(|d| d.join(format!("seed_{seed}")).join(label(&variant)));
            let res = train(&vc, seed, &data, run_dir.as_deref().map(|d| d.join("task")).as_deref())?;
            if !report.param_counts.iter().any(|(v, _)| *v == variant) {
                report.param_counts.push((variant, res.store.num_scalars()));
            }
            for (eval_set, examples) in [(EvalSet::InDistribution, valid), (EvalSet::Longform, &longform)] {
                let ev = evaluate_discrete(&res.model, &res.store, examples, vocab, cfg.beam, &edges)?;
                report.blocks.push(MetricBlock {
                    seed,
                    variant,
                    eval_set,
                    metrics: ev.metrics,
                });
            }
            if let (Some(task), Some(cd)) = (&cfg.curve_task, &curve_data) {
                let mut cc = vc.clone();
                cc.task = *task;
                let res = train(&cc, seed, cd, run_dir.as_deref().map(|d| d.join("curve")).as_deref())?;
                report.curves.extend(res.log.iter().map(|r| CurvePoint {
                    seed,
                    variant,
                    epoch: r.epoch,
                    train_l1: r.train_loss,
                    valid_l1: r.valid_loss,
                }));
            }
        }
    }
    if let Some(d) = out {
        report.write(d)?;
    }
    Ok(report)
}
