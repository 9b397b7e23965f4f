//! Accuracy at the 0.5 threshold and rank-summation average precision.

use crate::data::Family;
use crate::error::{Error, Result};

/// Fraction of samples where `score ≥ 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s >= 0.5) == (y == 1)).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean of precision at each positive's rank after a stable descending sort.
/// Defined as 0 when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(if tp == 0 { 0.0 } else { sum / tp as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMetrics {
    pub family: Family,
    pub n: usize,
    pub acc: f64,
    /// Mean router distribution over the family's samples, when routed.
    pub mean_p: Vec<f64>,
    /// How often each modality had the largest routing weight.
    pub top1: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub n: usize,
    pub acc: f64,
    pub ap: f64,
    pub families: Vec<FamilyMetrics>,
}

/// One scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub label: u8,
    pub family: Family,
    pub p: Vec<f64>,
}

impl Metrics {
    pub fn from_scored(rows: &[Scored]) -> Result<Self> {
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let acc = accuracy(&scores, &labels)?;
        let ap = average_precision(&scores, &labels)?;
        let mut families = Vec::new();
        for f in [Family::None, Family::Up, Family::Hf, Family::Cb] {
            let sel: Vec<&Scored> = rows.iter().filter(|r| r.family == f).collect();
            if sel.is_empty() {
                continue;
            }
            let s: Vec<f64> = sel.iter().map(|r| r.score).collect();
            let l: Vec<u8> = sel.iter().map(|r| r.label).collect();
            let m = sel[0].p.len();
            let mut mean_p = vec![0.0; m];
            let mut top1 = vec![0usize; m];
            for r in &sel {
                for (a, &b) in mean_p.iter_mut().zip(&r.p) {
                    *a += b / sel.len() as f64;
                }
                if m > 0 {
                    let best = (0..m).fold(0, |b, i| if r.p[i] > r.p[b] { i } else { b });
                    top1[best] += 1;
                }
            }
            families.push(FamilyMetrics { family: f, n: sel.len(), acc: accuracy(&s, &l)?, mean_p, top1 });
        }
        Ok(Metrics { n: rows.len(), acc, ap, families })
    }

    pub fn family(&self, f: Family) -> Option<&FamilyMetrics> {
        self.families.iter().find(|m| m.family == f)
    }
}
