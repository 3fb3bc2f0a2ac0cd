//! Inference over a dataset, metric aggregation and the per-sample dump.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricReport};
use crate::numerics::ParamStore;
use crate::synthgres::GresSample;

use super::model::{Model, Prediction};

pub trait Predictor {
    fn predict(&self, sample: &GresSample) -> Result<Prediction>;

    /// Count categories the predictor emits, if it emits counts at all.
    fn n_categories(&self) -> Option<usize> {
        None
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &GresSample) -> Result<Prediction> {
        self.model.predict(self.params, &sample.grid, &sample.tokens)
    }

    fn n_categories(&self) -> Option<usize> {
        Some(self.model.shape.n_categories)
    }
}

/// Emits the ground truth; the perfect-predictor fixed point.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, s: &GresSample) -> Result<Prediction> {
        Ok(Prediction {
            mask: s.gt_mask.clone(),
            exist: s.gt_exist == 1,
            exist_prob: f64::from(s.gt_exist),
            counts: Some(s.gt_counts.clone()),
            alphas: vec![],
            token_gates: vec![],
        })
    }
}

/// Always answers "no target".
pub struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn predict(&self, s: &GresSample) -> Result<Prediction> {
        Ok(Prediction {
            mask: vec![0; s.gt_mask.len()],
            exist: false,
            exist_prob: 0.0,
            counts: Some(vec![0.0; s.gt_counts.len()]),
            alphas: vec![],
            token_gates: vec![],
        })
    }
}

/// One line of the per-sample dump; the embedded record is what the metrics-only mode reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub text: String,
    pub iou: f64,
    pub exist_prob: f64,
    pub alphas: Vec<Option<f64>>,
    pub token_gates: Vec<Option<Vec<f64>>>,
}

pub struct Evaluation {
    pub report: MetricReport,
    pub dump: Vec<SampleDump>,
}

pub fn evaluate(p: &dyn Predictor, samples: &[GresSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    if let Some(c) = p.n_categories() {
        if let Some(s) = samples.iter().find(|s| s.gt_counts.len() != c) {
            return Err(Error::Config(format!("dataset has {} count categories, model has {c}", s.gt_counts.len())));
        }
    }
    let mut dump = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = p.predict(s)?;
        let mut record = EvalRecord::from_masks(s.image_id, &pred.mask, &s.gt_mask, !pred.exist)?;
        record.polarity = s.polarity;
        if let Some(c) = pred.counts {
            record.pred_counts = c;
            record.gt_counts = s.gt_counts.clone();
        }
        dump.push(SampleDump {
            iou: record.iou(),
            record,
            text: s.text.clone(),
            exist_prob: pred.exist_prob,
            alphas: pred.alphas,
            token_gates: pred.token_gates,
        });
    }
    let records: Vec<EvalRecord> = dump.iter().map(|d| d.record.clone()).collect();
    Ok(Evaluation { report: MetricReport::compute(&records)?, dump })
}

pub fn write_dump(dump: &[SampleDump], mut out: impl Write) -> Result<()> {
    for d in dump {
        writeln!(out, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

/// Records from a JSON-lines dump (blank lines ignored).
pub fn read_records(input: impl BufRead) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("dump line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
