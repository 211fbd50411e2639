use serde::Serialize;

use super::{binarize, dice, hd95};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel scores of one case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    /// Percent.
    pub dice: Vec<f64>,
    /// Millimetres; `None` when either mask is empty.
    pub hd95: Vec<Option<f64>>,
    /// Channels where prediction and reference are both empty (Dice 100 by convention).
    pub both_empty: Vec<bool>,
}

impl CaseMetrics {
    /// Scores `[C, D, H, W]` probabilities against a binary reference of the same shape.
    pub fn evaluate(id: &str, probs: &Tensor<f32>, reference: &Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        if probs.shape() != reference.shape() || probs.ndim() != 4 {
            return Err(Error::Data(format!(
                "case {id}: prediction {:?} and reference {:?} must both be [C, D, H, W]",
                probs.shape(),
                reference.shape()
            )));
        }
        let s = probs.shape();
        let extents = [s[1], s[2], s[3]];
        let n = extents.iter().product::<usize>();
        let spacing = spacing.map(|v| v as f64);
        let mut out = CaseMetrics { id: id.to_string(), dice: vec![], hd95: vec![], both_empty: vec![] };
        for c in 0..s[0] {
            let pred = binarize(&probs.data()[c * n..][..n]);
            let gt = binarize(&reference.data()[c * n..][..n]);
            out.dice.push(dice(&pred, &gt));
            out.hd95.push(hd95(&pred, &gt, extents, spacing));
            out.both_empty.push(!pred.iter().any(|&v| v) && !gt.iter().any(|&v| v));
        }
        Ok(out)
    }

    /// HD95 averaged over the channels where it is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd95.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricReport {
    pub fn channels(&self) -> usize {
        self.cases.first().map_or(0, |c| c.dice.len())
    }

    /// Mean Dice per channel over cases.
    pub fn channel_dice(&self) -> Vec<f64> {
        let n = self.cases.len().max(1) as f64;
        (0..self.channels()).map(|c| self.cases.iter().map(|k| k.dice[c]).sum::<f64>() / n).collect()
    }

    pub fn mean_dice(&self) -> f64 {
        let d = self.channel_dice();
        if d.is_empty() {
            return 0.0;
        }
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Per-case channel-mean HD95 averaged over cases with any defined value.
    pub fn mean_hd95(&self) -> Option<f64> {
        let per_case: Vec<f64> = self.cases.iter().filter_map(CaseMetrics::mean_hd95).collect();
        (!per_case.is_empty()).then(|| per_case.iter().sum::<f64>() / per_case.len() as f64)
    }

    /// Number of (case, channel) pairs with an undefined HD95.
    pub fn undefined_hd95(&self) -> usize {
        self.cases.iter().map(|c| c.hd95.iter().filter(|h| h.is_none()).count()).sum()
    }

    pub fn row(&self, name: &str) -> ReportRow {
        ReportRow {
            name: name.to_string(),
            dice: self.channel_dice(),
            mean_dice: self.mean_dice(),
            hd95: self.mean_hd95(),
            undefined_hd95: self.undefined_hd95(),
        }
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub hd95: Option<f64>,
    pub undefined_hd95: usize,
}

impl ReportRow {
    /// Pipe-delimited table: one row per configuration, Dice per channel, mean Dice, HD95.
    pub fn table(rows: &[ReportRow], channel_labels: &[String]) -> String {
        let mut header = vec!["config".to_string()];
        header.extend(channel_labels.iter().map(|l| format!("dice_{l} (%)")));
        header.extend(["dice_avg (%)".to_string(), "hd95 (mm)".to_string(), "hd95_undefined".to_string()]);
        let mut out = format!("| {} |\n|{}|\n", header.join(" | "), vec!["---"; header.len()].join("|"));
        for r in rows {
            let mut cells = vec![r.name.clone()];
            cells.extend(r.dice.iter().map(|d| format!("{d:.2}")));
            cells.push(format!("{:.2}", r.mean_dice));
            cells.push(r.hd95.map_or("n/a".to_string(), |h| format!("{h:.2}")));
            cells.push(r.undefined_hd95.to_string());
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}
