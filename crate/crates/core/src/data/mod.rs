//! Subject datasets: file format, normalization, fold plans and the
//! synthetic VAR(1) generator.

mod folds;
mod io;
mod synthetic;


use std::collections::HashSet;

use crate::adcore::Array;
use crate::error::{Error, Result};

pub use folds::{make_folds, FoldPlan};
pub use io::{
    format_value, load_dataset, load_domains, read_matrix, write_dataset, write_domains,
    write_matrix, DOMAINS_FILE, MANIFEST_FILE,
};
pub use synthetic::{
    gen_synthetic, simulate_var1, spectral_radius, write_synthetic, Synthetic, SyntheticSpec,
    DOMAIN_NAMES, NOISE_DOMAIN,
};

/// One subject: an `m × T` matrix of component time series and a label
/// (0 = control, 1 = patient).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub x: Array,
    pub label: usize,
}

/// Domain membership of one component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentInfo {
    pub domain: String,
    pub important: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub m: usize,
    pub t: usize,
    /// Indexed by component id when a domain map is available.
    pub domains: Option<Vec<ComponentInfo>>,
}

impl Dataset {
    /// Checks shapes, labels, finiteness and id uniqueness.
    pub fn new(samples: Vec<Sample>, domains: Option<Vec<ComponentInfo>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Input("dataset has no subjects".into()));
        };
        let (m, t) = first.x.shape();
        if m == 0 || t < 2 {
            return Err(Error::Input(format!(
                "subject {} has shape {m}×{t}; need at least one component and two time points",
                first.subject_id
            )));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if s.x.shape() != (m, t) {
                return Err(Error::Input(format!(
                    "subject {} has shape {:?}, expected ({m}, {t})",
                    s.subject_id,
                    s.x.shape()
                )));
            }
            if s.label > 1 {
                return Err(Error::Input(format!(
                    "subject {} has label {}, expected 0 or 1",
                    s.subject_id, s.label
                )));
            }
            if !s.x.is_finite() {
                return Err(Error::NonFinite(format!("subject {} data", s.subject_id)));
            }
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::Input(format!("duplicate subject id {}", s.subject_id)));
            }
        }
        if let Some(d) = &domains {
            if d.len() != m {
                return Err(Error::Input(format!(
                    "domain map covers {} components, data has {m}",
                    d.len()
                )));
            }
        }
        Ok(Self {
            samples,
            m,
            t,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Number of subjects with each label.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn position(&self, subject_id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.subject_id == subject_id)
    }

    /// Copy with every subject z-scored per component.
    pub fn zscored(&self) -> Result<Self> {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.x = zscore(&s.x).map_err(|e| match e {
                Error::Degenerate(msg) => {
                    Error::Degenerate(format!("subject {}: {msg}", s.subject_id))
                }
                other => other,
            })?;
        }
        Ok(out)
    }
}

/// Standardizes each row to mean 0 and population standard deviation 1.
pub fn zscore(x: &Array) -> Result<Array> {
    let (m, t) = x.shape();
    if t == 0 {
        return Err(Error::EmptyReduction("zscore"));
    }
    let mut out = x.clone();
    for i in 0..m {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if !(std > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::Degenerate(format!("component {i} is constant")));
        }
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}
