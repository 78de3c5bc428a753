use serde::Serialize;

use crate::error::{Error, Result};

/// Area under the ROC curve for `(score, label)` pairs, labels 0/1.
///
/// Mann-Whitney form: the fraction of (positive, negative) pairs where the
/// positive scores higher, with ties counting one half. Runs in
/// `O(n log n)` using midranks.
pub fn auc(scored: &[(f64, usize)]) -> Result<f64> {
    if let Some(&(s, _)) = scored.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    if let Some(&(_, l)) = scored.iter().find(|(_, l)| *l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    let n_pos = scored.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both labels".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));

    // Sum of (1-based) midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| scored[k].1 == 1).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Metric(format!(
            "accuracy over {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean, median and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyReduction("summary statistics"));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Ok(Self {
            mean,
            median,
            std: var.sqrt(),
            n,
        })
    }
}
