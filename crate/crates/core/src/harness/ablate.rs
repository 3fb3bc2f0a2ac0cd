//! Ablation matrix: one trained and evaluated variant per axis, sharing the seed.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{AocMode, Config};
use crate::error::{Error, Result};
use crate::synthgres::GresSample;

use super::eval::{evaluate, ModelPredictor};
use super::model::DataShape;
use super::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    HsdOff,
    AocOff,
    AocBinaryOnly,
    IntraOff,
    InterOff,
    DeepSupervisionOn,
    SdmLayers(usize),
}

impl Axis {
    /// The matrix of the acceptance run.
    pub fn full_matrix() -> Vec<Axis> {
        let mut v = vec![Axis::HsdOff, Axis::AocOff, Axis::AocBinaryOnly, Axis::IntraOff, Axis::InterOff];
        v.extend((1..=4).map(Axis::SdmLayers));
        v
    }

    pub fn name(self) -> String {
        match self {
            Axis::HsdOff => "hsd_off".into(),
            Axis::AocOff => "aoc_off".into(),
            Axis::AocBinaryOnly => "aoc_binary_only".into(),
            Axis::IntraOff => "intra_off".into(),
            Axis::InterOff => "inter_off".into(),
            Axis::DeepSupervisionOn => "deep_supervision_on".into(),
            Axis::SdmLayers(n) => format!("sdm_layers={n}"),
        }
    }

    pub fn apply(self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        let m = &mut c.model;
        match self {
            Axis::HsdOff => m.hsd_off = true,
            Axis::AocOff => m.aoc = AocMode::Off,
            Axis::AocBinaryOnly => m.aoc = AocMode::BinaryOnly,
            Axis::IntraOff => m.intra_off = true,
            Axis::InterOff => m.inter_off = true,
            Axis::DeepSupervisionOn => m.deep_supervision = true,
            Axis::SdmLayers(n) => m.sdm_layers = n,
        }
        c
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hsd_off" => Axis::HsdOff,
            "aoc_off" => Axis::AocOff,
            "aoc_binary_only" => Axis::AocBinaryOnly,
            "intra_off" => Axis::IntraOff,
            "inter_off" => Axis::InterOff,
            "deep_supervision_on" => Axis::DeepSupervisionOn,
            other => match other.strip_prefix("sdm_layers=").map(str::parse::<usize>) {
                Some(Ok(n)) if (1..=4).contains(&n) => Axis::SdmLayers(n),
                _ => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub giou: Option<f64>,
    pub ciou: Option<f64>,
    pub n_acc: Option<f64>,
    pub c_acc: Option<f64>,
    pub final_loss: Option<f64>,
    /// Range of recorded level gates over the evaluation set.
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub const COLUMNS: [&str; 8] = ["variant", "giou", "ciou", "n_acc", "c_acc", "final_loss", "alpha_min", "alpha_max"];

pub fn run_variant(name: &str, cfg: &Config, shape: DataShape, train_set: &[GresSample], eval_set: &[GresSample]) -> Result<AblationRow> {
    let trained = train(cfg, shape, train_set, std::io::sink())?;
    let ev = evaluate(&ModelPredictor { model: &trained.model, params: &trained.params }, eval_set)?;
    let alphas: Vec<f64> = ev.dump.iter().flat_map(|d| d.alphas.iter().flatten().copied()).collect();
    Ok(AblationRow {
        variant: name.to_string(),
        giou: ev.report.giou,
        ciou: ev.report.ciou,
        n_acc: ev.report.n_acc,
        c_acc: ev.report.c_acc,
        final_loss: trained.log.last().map(|l| l.loss),
        alpha_min: alphas.iter().copied().reduce(f64::min),
        alpha_max: alphas.iter().copied().reduce(f64::max),
    })
}

/// Baseline row followed by one row per axis.
pub fn ablate(cfg: &Config, axes: &[Axis], shape: DataShape, train_set: &[GresSample], eval_set: &[GresSample]) -> Result<AblationTable> {
    let mut rows = vec![run_variant("baseline", cfg, shape, train_set, eval_set)?];
    for &a in axes {
        rows.push(run_variant(&a.name(), &a.apply(cfg), shape, train_set, eval_set)?);
    }
    Ok(AblationTable { columns: COLUMNS.iter().map(|s| s.to_string()).collect(), rows })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.variant.clone(), cell(r.giou), cell(r.ciou), cell(r.n_acc), cell(r.c_acc), cell(r.final_loss), cell(r.alpha_min), cell(r.alpha_max)])
            .collect();
        let widths: Vec<usize> = (0..COLUMNS.len()).map(|j| body.iter().map(|r| r[j].len()).chain([COLUMNS[j].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>| -> String {
            cells.iter().enumerate().map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) }).collect::<Vec<_>>().join("  ")
        };
        let _ = writeln!(out, "{}", line(COLUMNS.to_vec()));
        let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        for r in &body {
            let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
        }
        out
    }

    /// Checks column names, unique variants and value ranges.
    pub fn validate(&self) -> Result<()> {
        if self.columns != COLUMNS {
            return Err(Error::Format(format!("unexpected columns {:?}", self.columns)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rows {
            if !seen.insert(&r.variant) {
                return Err(Error::Format(format!("duplicate variant {}", r.variant)));
            }
            for v in [r.giou, r.ciou, r.n_acc, r.c_acc, r.alpha_min, r.alpha_max].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!("{}: value {v} outside [0, 1]", r.variant)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::full_matrix().into_iter().chain([Axis::DeepSupervisionOn]) {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        for bad in ["bogus", "sdm_layers=0", "sdm_layers=5", "sdm_layers=x"] {
            assert!(matches!(bad.parse::<Axis>(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn text_table_is_aligned() {
        let row = |v: &str| AblationRow { variant: v.into(), giou: Some(0.5), ciou: None, n_acc: Some(1.0), c_acc: None, final_loss: Some(2.0), alpha_min: None, alpha_max: None };
        let t = AblationTable { columns: COLUMNS.iter().map(|s| s.to_string()).collect(), rows: vec![row("baseline"), row("sdm_layers=2")] };
        t.validate().unwrap();
        let text = t.to_text();
        let lens: Vec<usize> = text.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]));
    }
}
