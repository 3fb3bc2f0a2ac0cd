//! GRES / RES evaluation metrics over per-sample records.
//!
//! Conventions:
//! - a prediction is *empty* when the existence head says "no target"; the
//!   mask is then all background. Otherwise the argmax mask is used as-is,
//!   even if it has no foreground pixel.
//! - gIoU scores an empty-target sample 1 when rejected and 0 otherwise.
//! - cIoU skips samples whose union is zero.
//! - Pr@t only looks at samples with a non-empty target.
//! - rIoU scores a negative sentence 1 when rejected, 0 otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Positive,
    Negative,
}

/// Everything the metrics need to know about one (expression, image) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: u64,
    pub intersection: u64,
    pub union: u64,
    pub pred_empty: bool,
    pub gt_empty: bool,
    #[serde(default)]
    pub pred_counts: Vec<f64>,
    #[serde(default)]
    pub gt_counts: Vec<f64>,
    #[serde(default)]
    pub polarity: Polarity,
}

impl EvalRecord {
    /// Builds a record from binary masks. `pred_empty` forces the prediction to background.
    pub fn from_masks(image_id: u64, pred: &[u8], gt: &[u8], pred_empty: bool) -> Result<Self> {
        let empty = vec![0u8; pred.len()];
        let effective = if pred_empty { &empty[..] } else { pred };
        let (intersection, union) = overlap(effective, gt)?;
        let gt_empty = !gt.iter().any(|&v| v != 0);
        Ok(Self {
            image_id,
            intersection,
            union,
            pred_empty,
            gt_empty,
            pred_counts: vec![],
            gt_counts: vec![],
            polarity: if gt_empty { Polarity::Negative } else { Polarity::Positive },
        })
    }

    /// `|P ∧ G| / |P ∨ G|`, 1 when the union is empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Per-sample gIoU contribution.
    pub fn generalized_score(&self) -> f64 {
        if self.gt_empty {
            if self.pred_empty {
                1.0
            } else {
                0.0
            }
        } else if self.pred_empty {
            0.0
        } else {
            self.iou()
        }
    }
}

/// `(|P ∧ G|, |P ∨ G|)` for two binary masks.
pub fn overlap(pred: &[u8], gt: &[u8]) -> Result<(u64, u64)> {
    if pred.len() != gt.len() {
        return Err(shape_err!("mask sizes differ: {} vs {}", pred.len(), gt.len()));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok((inter, union))
}

pub fn sample_iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Undefined("no evaluation records".into()))
    } else {
        Ok(())
    }
}

pub fn giou(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::generalized_score).sum::<f64>() / records.len() as f64)
}

pub fn ciou(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let (i, u) = records.iter().fold((0u64, 0u64), |(i, u), r| (i + r.intersection, u + r.union));
    if u == 0 {
        return Err(Error::Undefined("cIoU with zero total union".into()));
    }
    Ok(i as f64 / u as f64)
}

/// Rejected empty-target expressions over all empty-target expressions.
pub fn n_acc(records: &[EvalRecord]) -> Result<f64> {
    let empties: Vec<_> = records.iter().filter(|r| r.gt_empty).collect();
    if empties.is_empty() {
        return Err(Error::Undefined("N-acc without empty-target samples".into()));
    }
    Ok(empties.iter().filter(|r| r.pred_empty).count() as f64 / empties.len() as f64)
}

/// Fraction of non-empty-target samples whose IoU reaches `t`.
pub fn pr_at(records: &[EvalRecord], t: f64) -> Result<f64> {
    let eligible: Vec<_> = records.iter().filter(|r| !r.gt_empty).collect();
    if eligible.is_empty() {
        return Err(Error::Undefined("Pr@t without non-empty-target samples".into()));
    }
    Ok(eligible.iter().filter(|r| r.generalized_score() >= t).count() as f64 / eligible.len() as f64)
}

/// Mean IoU over samples with a non-empty target.
pub fn miou(records: &[EvalRecord]) -> Result<f64> {
    let eligible: Vec<_> = records.iter().filter(|r| !r.gt_empty).collect();
    if eligible.is_empty() {
        return Err(Error::Undefined("mIoU without non-empty-target samples".into()));
    }
    Ok(eligible.iter().map(|r| r.generalized_score()).sum::<f64>() / eligible.len() as f64)
}

/// Mean over all samples; positives score their IoU, negatives score 1 iff rejected.
pub fn riou(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let total: f64 = records
        .iter()
        .map(|r| match r.polarity {
            Polarity::Positive => {
                if r.pred_empty {
                    0.0
                } else {
                    r.iou()
                }
            }
            Polarity::Negative => f64::from(u8::from(r.pred_empty)),
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Per-image empty-target rejection rate, averaged over images that have any empty-target expression.
pub fn mrr(records: &[EvalRecord]) -> Result<f64> {
    let mut per_image: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.gt_empty) {
        let e = per_image.entry(r.image_id).or_default();
        e.0 += usize::from(r.pred_empty);
        e.1 += 1;
    }
    if per_image.is_empty() {
        return Err(Error::Undefined("mRR without empty-target samples".into()));
    }
    let sum: f64 = per_image.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(sum / per_image.len() as f64)
}

/// Evaluation thresholds reported under `pr@…`.
pub const PR_THRESHOLDS: [f64; 1] = [0.7];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub giou: Option<f64>,
    pub ciou: Option<f64>,
    pub n_acc: Option<f64>,
    /// Same formula as `n_acc` (Ref-ZOM "Acc.").
    pub acc: Option<f64>,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    pub riou: Option<f64>,
    pub mrr: Option<f64>,
    pub pr_at: BTreeMap<String, Option<f64>>,
    pub c_acc: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn pr_key(t: f64) -> String {
    format!("pr@{t:.2}")
}

impl MetricReport {
    pub fn compute(records: &[EvalRecord]) -> Result<Self> {
        non_empty(records)?;
        let ciou = defined(ciou(records))?;
        let n_acc = defined(n_acc(records))?;
        let with_counts = records.iter().all(|r| !r.gt_counts.is_empty() && r.gt_counts.len() == r.pred_counts.len());
        let c_acc = if with_counts {
            let p: Vec<Vec<f64>> = records.iter().map(|r| r.pred_counts.clone()).collect();
            let g: Vec<Vec<f64>> = records.iter().map(|r| r.gt_counts.clone()).collect();
            Some(crate::aoc::c_acc(&p, &g)?)
        } else {
            None
        };
        Ok(Self {
            giou: defined(giou(records))?,
            ciou,
            n_acc,
            acc: n_acc,
            miou: defined(miou(records))?,
            oiou: ciou,
            riou: defined(riou(records))?,
            mrr: defined(mrr(records))?,
            pr_at: PR_THRESHOLDS.iter().map(|&t| Ok((pr_key(t), defined(pr_at(records, t))?))).collect::<Result<_>>()?,
            c_acc,
        })
    }

    /// Ordered `(key, value)` pairs as written to JSON.
    pub fn entries(&self) -> Vec<(String, Option<f64>)> {
        let mut v = vec![
            ("giou".to_string(), self.giou),
            ("ciou".to_string(), self.ciou),
            ("n_acc".to_string(), self.n_acc),
            ("acc".to_string(), self.acc),
            ("miou".to_string(), self.miou),
            ("oiou".to_string(), self.oiou),
            ("riou".to_string(), self.riou),
            ("mrr".to_string(), self.mrr),
        ];
        v.extend(self.pr_at.iter().map(|(k, x)| (k.clone(), *x)));
        v.push(("c_acc".to_string(), self.c_acc));
        v
    }

    /// JSON object with fixed key order; values with 6 fractional digits, `null` when undefined.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let entries = self.entries();
        for (i, (k, v)) in entries.iter().enumerate() {
            let val = v.map_or_else(|| "null".to_string(), |x| format!("{x:.6}"));
            let sep = if i + 1 < entries.len() { "," } else { "" };
            let _ = writeln!(out, "  \"{k}\": {val}{sep}");
        }
        out.push('}');
        out
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let obj = v.as_object().ok_or_else(|| Error::Format("metric report must be a JSON object".into()))?;
        let get = |k: &str| obj.get(k).and_then(serde_json::Value::as_f64);
        Ok(Self {
            giou: get("giou"),
            ciou: get("ciou"),
            n_acc: get("n_acc"),
            acc: get("acc"),
            miou: get("miou"),
            oiou: get("oiou"),
            riou: get("riou"),
            mrr: get("mrr"),
            pr_at: obj.iter().filter(|(k, _)| k.starts_with("pr@")).map(|(k, x)| (k.clone(), x.as_f64())).collect(),
            c_acc: get("c_acc"),
        })
    }
}
