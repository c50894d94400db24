//! Patient-level ROC analysis, F1/accuracy and threshold selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference operating point of the full-size model on clinical data.
/// Informational only; the synthetic benchmark is not comparable.
pub const REFERENCE_AUROC: f64 = 0.952;
pub const REFERENCE_F1: f64 = 0.94;
pub const REFERENCE_ACCURACY: f64 = 0.924;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Abnormal = 1,
}

impl Label {
    pub fn from_bit(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

impl LabeledScore {
    pub fn new(id: impl Into<String>, score: f64, label: Label) -> Self {
        LabeledScore {
            id: id.into(),
            score,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Subjects with `score >= threshold` are called positive at this point.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub chosen_t: f64,
    pub roc_points: Vec<RocPoint>,
}

fn class_counts(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Metric(format!("score of {} is not finite", s.id)));
    }
    let p = scores.iter().filter(|s| s.label.is_abnormal()).count();
    let n = scores.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric(format!(
            "need both classes, got {p} abnormal and {n} normal"
        )));
    }
    Ok((p, n))
}

/// Mann-Whitney AUROC from mid-ranks: `(wins + ties/2) / (P·N)`.
pub fn auroc(scores: &[LabeledScore]) -> Result<f64> {
    let (p, n) = class_counts(scores)?;
    let mut order: Vec<&LabeledScore> = scores.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].score == order[i].score {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|s| s.label.is_abnormal()).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// ROC curve from `(0, 0)` to `(1, 1)` with one point per distinct score.
pub fn roc_curve(scores: &[LabeledScore]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(scores)?;
    let mut order: Vec<&LabeledScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        while i < order.len() && order[i].score == s {
            if order[i].label.is_abnormal() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: s,
        });
    }
    Ok(points)
}

/// Area under a ROC polyline by the trapezoid rule.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Positive prediction is `score > threshold`.
    pub fn at(scores: &[LabeledScore], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for s in scores {
            match (s.score > threshold, s.label.is_abnormal()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / total as f64
    }

    pub fn youden(&self) -> f64 {
        let tpr = self.tp as f64 / (self.tp + self.fn_) as f64;
        let fpr = self.fp as f64 / (self.fp + self.tn) as f64;
        tpr - fpr
    }
}

pub fn f1_accuracy(scores: &[LabeledScore], threshold: f64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Metric("no scores".into()));
    }
    let c = Confusion::at(scores, threshold);
    Ok((c.f1(), c.accuracy()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub t_lo: f64,
    pub t_hi: f64,
    pub step: f64,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        ThresholdSweep {
            t_lo: 0.5,
            t_hi: 20.0,
            step: 0.5,
        }
    }
}

impl ThresholdSweep {
    pub fn candidates(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.t_hi >= self.t_lo) || !self.t_lo.is_finite() || !self.t_hi.is_finite() {
            return Err(Error::Config(format!("invalid threshold sweep {self:?}")));
        }
        let n = ((self.t_hi - self.t_lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.t_lo + i as f64 * self.step).collect())
    }
}

/// Sweeps the candidate thresholds and keeps the one with the largest
/// Youden's J; ties go to the smallest threshold. Returns `(T, J)`.
pub fn select_threshold(validation: &[LabeledScore], sweep: &ThresholdSweep) -> Result<(f64, f64)> {
    let (p, n) = class_counts(validation)?;
    // J·P·N = TP·N − FP·P is an integer, so ties are detected exactly.
    let scaled = |c: &Confusion| (c.tp * n) as i128 - (c.fp * p) as i128;
    let mut best: Option<(f64, Confusion, i128)> = None;
    for t in sweep.candidates()? {
        let c = Confusion::at(validation, t);
        let key = scaled(&c);
        if best.as_ref().is_none_or(|b| key > b.2) {
            best = Some((t, c, key));
        }
    }
    let (t, c, _) = best.ok_or_else(|| Error::Config("threshold sweep is empty".into()))?;
    Ok((t, c.youden()))
}

pub fn evaluate(test: &[LabeledScore], chosen_t: f64) -> Result<Metrics> {
    let auroc = auroc(test)?;
    let roc_points = roc_curve(test)?;
    let (f1, accuracy) = f1_accuracy(test, chosen_t)?;
    Ok(Metrics {
        auroc,
        f1,
        accuracy,
        chosen_t,
        roc_points,
    })
}

impl Metrics {
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.roc_points {
            let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        s
    }
}

/// `id,score,label` rows with a header line; label is 0 or 1.
pub fn scores_csv(scores: &[LabeledScore]) -> String {
    let mut s = String::from("id,score,label\n");
    for r in scores {
        let _ = writeln!(s, "{},{},{}", r.id, r.score, r.label as u8);
    }
    s
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<LabeledScore>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("line {}: expected id,score,label", n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let score = fields[1].parse::<f64>().map_err(|_| bad())?;
        let label = fields[2].parse::<u8>().ok().and_then(Label::from_bit).ok_or_else(bad)?;
        out.push(LabeledScore::new(fields[0], score, label));
    }
    Ok(out)
}
