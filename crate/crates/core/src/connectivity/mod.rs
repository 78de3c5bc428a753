//! Connectivity matrices read off trained models, the Pearson baseline and
//! block summaries over component domains.
//!
//! Attention matrices are directed: entry `(i, j)` is how much component
//! `i` attends to component `j`.

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::adcore::Array;
use crate::data::{format_value, zscore, ComponentInfo};
use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint};
use crate::training::auc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FncKind {
    Attention,
    Pearson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FncMatrix {
    pub matrix: Array,
    pub kind: FncKind,
    /// Subject id or a group label.
    pub tag: String,
}

/// Attention matrix of one subject under a trained model. `x` holds the
/// raw series; it is z-scored the same way as during training.
pub fn attention_fnc(ckpt: &Checkpoint, x: &Array, tag: &str) -> Result<FncMatrix> {
    if let Some(m) = ckpt.components {
        if x.rows() != m {
            return Err(Error::Dimension {
                op: "attention_fnc (model trained on a different component count)",
                lhs: x.shape(),
                rhs: (m, x.cols()),
            });
        }
    }
    let trace = forward(&zscore(x)?, &ckpt.params)?;
    Ok(FncMatrix {
        matrix: trace.attention,
        kind: FncKind::Attention,
        tag: tag.to_string(),
    })
}

/// Pairwise Pearson correlation of the rows of `x`.
pub fn pearson_fnc(x: &Array) -> Result<Array> {
    let (m, t) = x.shape();
    if t < 2 {
        return Err(Error::Input(format!("correlation needs two time points, got {t}")));
    }
    let mut centered = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12 * (1.0 + mean.abs()) * (t as f64).sqrt()) {
            return Err(Error::Degenerate(format!("component {i} is constant")));
        }
        centered.push((c, norm));
    }
    let mut r = Array::zeros(m, m);
    for i in 0..m {
        r.set(i, i, 1.0);
        for j in i + 1..m {
            let (a, na) = &centered[i];
            let (b, nb) = &centered[j];
            let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            let v = (dot / (na * nb)).clamp(-1.0, 1.0);
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    Ok(r)
}

/// Elementwise mean of equally shaped matrices.
pub fn group_average(matrices: &[&Array]) -> Result<Array> {
    let Some(first) = matrices.first() else {
        return Err(Error::Input("group average over an empty selection".into()));
    };
    let mut acc = Array::zeros(first.rows(), first.cols());
    for m in matrices {
        if m.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "group_average",
                lhs: first.shape(),
                rhs: m.shape(),
            });
        }
        acc.add_assign(m);
    }
    acc.scale_in_place(1.0 / matrices.len() as f64);
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockMean {
    pub from: String,
    pub to: String,
    /// NaN when the block has no off-diagonal cells.
    pub mean: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSummary {
    /// Domains in order of first appearance.
    pub domains: Vec<String>,
    /// Every (from, to) domain pair, row-major over `domains`.
    pub blocks: Vec<BlockMean>,
    /// Mean over off-diagonal cells with both components important.
    pub important: f64,
    /// Mean over off-diagonal cells with both components noise.
    pub noise: f64,
    /// Mean over cells linking an important and a noise component.
    pub cross: f64,
}

fn mean_or_nan(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Off-diagonal block means of `fnc` under a component-domain map.
pub fn block_stats(fnc: &Array, domains: &[ComponentInfo]) -> Result<BlockSummary> {
    let m = fnc.rows();
    if fnc.cols() != m {
        return Err(Error::Dimension {
            op: "block_stats",
            lhs: fnc.shape(),
            rhs: (m, m),
        });
    }
    if domains.len() != m {
        return Err(Error::Input(format!(
            "domain map covers {} components, matrix has {m}; every component must be mapped",
            domains.len()
        )));
    }
    let mut names: Vec<String> = Vec::new();
    let slot: Vec<usize> = domains
        .iter()
        .map(|d| match names.iter().position(|n| *n == d.domain) {
            Some(k) => k,
            None => {
                names.push(d.domain.clone());
                names.len() - 1
            }
        })
        .collect();
    let k = names.len();
    let mut sums = vec![0.0; k * k];
    let mut counts = vec![0usize; k * k];
    // [important, noise, cross]
    let mut agg = [(0.0, 0usize); 3];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let v = fnc.get(i, j);
            let b = slot[i] * k + slot[j];
            sums[b] += v;
            counts[b] += 1;
            let a = match (domains[i].important, domains[j].important) {
                (true, true) => 0,
                (false, false) => 1,
                _ => 2,
            };
            agg[a].0 += v;
            agg[a].1 += 1;
        }
    }
    let blocks = (0..k * k)
        .map(|b| BlockMean {
            from: names[b / k].clone(),
            to: names[b % k].clone(),
            mean: mean_or_nan(sums[b], counts[b]),
            cells: counts[b],
        })
        .collect();
    Ok(BlockSummary {
        domains: names,
        blocks,
        important: mean_or_nan(agg[0].0, agg[0].1),
        noise: mean_or_nan(agg[1].0, agg[1].1),
        cross: mean_or_nan(agg[2].0, agg[2].1),
    })
}

/// AUC of the off-diagonal entries of `a` as scores for the edges of
/// `g` (`|g_ij| > 0`).
pub fn graph_recovery_score(a: &Array, g: &Array) -> Result<f64> {
    if a.shape() != g.shape() || a.rows() != a.cols() {
        return Err(Error::Dimension {
            op: "graph_recovery_score",
            lhs: a.shape(),
            rhs: g.shape(),
        });
    }
    let m = a.rows();
    let mut scored = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                scored.push((a.get(i, j), usize::from(g.get(i, j).abs() > 0.0)));
            }
        }
    }
    auc(&scored).map_err(|e| match e {
        Error::Metric(_) => Error::Metric(
            "ground truth needs at least one edge and one non-edge off the diagonal".into(),
        ),
        other => other,
    })
}

/// Header row of component ids, then the matrix rows.
pub fn write_fnc_csv(path: &Path, fnc: &Array) -> Result<()> {
    let mut s = String::new();
    let ids: Vec<String> = (0..fnc.cols()).map(|j| j.to_string()).collect();
    s.push_str(&ids.join(","));
    s.push('\n');
    for i in 0..fnc.rows() {
        let row: Vec<String> = fnc.row(i).iter().map(|&v| format_value(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_fnc_csv(path: &Path) -> Result<Array> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let m = header.split(',').count();
    let mut rows = Vec::with_capacity(m);
    for (k, line) in lines.enumerate() {
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::parse(path, k + 2, format!("non-numeric value {c:?}")))
            })
            .collect();
        let row = row?;
        if row.len() != m {
            return Err(Error::parse(path, k + 2, format!("{} values, expected {m}", row.len())));
        }
        rows.push(row);
    }
    Array::from_rows(&rows)
}

/// `from_domain,to_domain,mean_weight`, one line per domain pair.
pub fn write_block_csv(path: &Path, summary: &BlockSummary) -> Result<()> {
    let mut s = String::from("from_domain,to_domain,mean_weight\n");
    for b in &summary.blocks {
        let _ = writeln!(s, "{},{},{}", b.from, b.to, format_value(b.mean));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
