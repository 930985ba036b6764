use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-interpolated average precision. Ranking is by descending score with
/// ties kept in input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep their original order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes skipped because the split holds no positive for them.
    pub warnings: Vec<String>,
}

/// Mean AP over classes; `scores[s][k]` and `labels[s][k]` index sample then class.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<MapReport> {
    if scores.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let classes = scores[0].len();
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for k in 0..classes {
        let s: Vec<f64> = scores.iter().map(|row| row[k]).collect();
        let l: Vec<bool> = labels.iter().map(|row| row[k] == 1).collect();
        let ap = average_precision(&s, &l);
        if ap.is_none() {
            warnings.push(format!("class {k} has no positives; skipped in mAP"));
        }
        per_class.push(ap);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Evaluation("no class has a positive label".into()));
    }
    Ok(MapReport {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        warnings,
    })
}

/// Fraction of rows whose first-maximal score sits at the target index.
pub fn accuracy(scores: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let correct = scores
        .iter()
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Spread of a metric across runs (population variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::Evaluation("no runs to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(DistributionSummary {
        count: values.len(),
        mean,
        variance,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
