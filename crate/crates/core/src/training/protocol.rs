//! Folds × trials runs and their on-disk layout:
//!
//! ```text
//! <out>/trials/fold<F>_seed<S>/checkpoint     final parameters
//! <out>/trials/fold<F>_seed<S>/attention.csv  mean validation attention
//! <out>/trials/fold<F>_seed<S>/epochs.csv     per-epoch loss and metrics
//! <out>/summary.csv                           one row per completed trial
//! <out>/summary.txt                           mean / median / std
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{train_fold, Stats, TrainConfig, TrialOutcome};
use crate::adcore::Array;
use crate::connectivity::{group_average, write_fnc_csv};
use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, ModelConfig};

pub const SUMMARY_CSV_HEADER: &str =
    "fold,seed,epoch_count,val_accuracy,val_auc,checkpoint,attention_path";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialFailure {
    pub fold: usize,
    pub seed: u64,
    pub error: String,
    /// True when training itself blew up rather than failing on input.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub accuracy: Stats,
    pub auc: Stats,
}

/// Validation metrics over all completed trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub accuracy: Option<Stats>,
    pub auc: Option<Stats>,
    pub per_fold: Vec<FoldSummary>,
    pub completed: usize,
    pub failed: usize,
}

impl Summary {
    pub(crate) fn from_outcomes(outcomes: &[TrialOutcome], failed: usize, n_folds: usize) -> Result<Self> {
        let acc: Vec<f64> = outcomes.iter().map(|o| o.report.val_accuracy).collect();
        let auc: Vec<f64> = outcomes.iter().map(|o| o.report.val_auc).collect();
        let mut per_fold = Vec::new();
        for fold in 0..n_folds {
            let mine: Vec<&TrialOutcome> =
                outcomes.iter().filter(|o| o.report.fold == fold).collect();
            if mine.is_empty() {
                continue;
            }
            let a: Vec<f64> = mine.iter().map(|o| o.report.val_accuracy).collect();
            let u: Vec<f64> = mine.iter().map(|o| o.report.val_auc).collect();
            per_fold.push(FoldSummary {
                fold,
                accuracy: Stats::of(&a)?,
                auc: Stats::of(&u)?,
            });
        }
        Ok(Self {
            accuracy: (!acc.is_empty()).then(|| Stats::of(&acc)).transpose()?,
            auc: (!auc.is_empty()).then(|| Stats::of(&auc)).transpose()?,
            per_fold,
            completed: outcomes.len(),
            failed,
        })
    }

    /// Human-readable report.
    pub fn to_text(&self, failures: &[TrialFailure]) -> String {
        let mut s = String::new();
        let total = self.completed + self.failed;
        let _ = writeln!(
            s,
            "trials completed: {} of {total} ({} failed)",
            self.completed, self.failed
        );
        let line = |s: &mut String, name: &str, st: &Option<Stats>| match st {
            Some(st) => {
                let _ = writeln!(
                    s,
                    "{name}: mean {:.4} median {:.4} std {:.4} (n={})",
                    st.mean, st.median, st.std, st.n
                );
            }
            None => {
                let _ = writeln!(s, "{name}: no completed trials");
            }
        };
        line(&mut s, "validation accuracy", &self.accuracy);
        line(&mut s, "validation AUC", &self.auc);
        for f in &self.per_fold {
            let _ = writeln!(
                s,
                "fold {}: accuracy mean {:.4} median {:.4} std {:.4} | AUC mean {:.4} median {:.4} std {:.4} (n={})",
                f.fold,
                f.accuracy.mean,
                f.accuracy.median,
                f.accuracy.std,
                f.auc.mean,
                f.auc.median,
                f.auc.std,
                f.auc.n
            );
        }
        for fail in failures {
            let _ = writeln!(s, "FAILED fold {} seed {}: {}", fail.fold, fail.seed, fail.error);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    /// Completed trials, fold-major then in seed order.
    pub outcomes: Vec<TrialOutcome>,
    pub failures: Vec<TrialFailure>,
    pub summary: Summary,
}

fn trial_dir(fold: usize, seed: u64) -> PathBuf {
    Path::new("trials").join(format!("fold{fold}_seed{seed}"))
}

fn write_trial(out: &Path, outcome: &mut TrialOutcome, components: usize) -> Result<()> {
    let rel = trial_dir(outcome.report.fold, outcome.report.seed);
    let dir = out.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let ckpt = Checkpoint {
        params: outcome.params.clone(),
        components: Some(components),
    };
    save_checkpoint(&ckpt, dir.join("checkpoint"))?;
    let maps: Vec<&Array> = outcome.validation.iter().map(|p| &p.attention).collect();
    let mean = group_average(&maps)?;
    write_fnc_csv(&dir.join("attention.csv"), &mean)?;

    let mut epochs = String::from("epoch,train_loss,val_accuracy,val_auc\n");
    for (i, e) in outcome.report.epochs.iter().enumerate() {
        let _ = writeln!(epochs, "{},{},{},{}", i + 1, e.train_loss, e.val_accuracy, e.val_auc);
    }
    let path = dir.join("epochs.csv");
    fs::write(&path, epochs).map_err(|e| Error::io(&path, e))?;

    outcome.report.checkpoint = Some(rel.join("checkpoint"));
    outcome.report.attention_path = Some(rel.join("attention.csv"));
    Ok(())
}

fn run_one(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrialOutcome> {
    log::info!("fold {fold} seed {seed}: training");
    let mut outcome = train_fold(dataset, plan, fold, seed, model, train)?;
    if let Some(out) = out {
        write_trial(out, &mut outcome, dataset.m)?;
    }
    log::info!(
        "fold {fold} seed {seed}: accuracy {:.3} AUC {:.3}",
        outcome.report.val_accuracy,
        outcome.report.val_auc
    );
    Ok(outcome)
}

/// `subject_id,label,fold` for every subject.
pub fn write_folds_csv(dataset: &Dataset, plan: &FoldPlan, path: &Path) -> Result<()> {
    let mut s = String::from("subject_id,label,fold\n");
    for (sample, fold) in dataset.samples.iter().zip(&plan.fold_of) {
        let _ = writeln!(s, "{},{},{fold}", sample.subject_id, sample.label);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_summary(out: &Path, result: &ProtocolResult) -> Result<()> {
    let mut csv = String::from(SUMMARY_CSV_HEADER);
    csv.push('\n');
    for o in &result.outcomes {
        let r = &o.report;
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.to_string_lossy().replace('\\', "/"))
                .unwrap_or_default()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.fold,
            r.seed,
            r.epochs.len(),
            r.val_accuracy,
            r.val_auc,
            path_str(&r.checkpoint),
            path_str(&r.attention_path)
        );
    }
    let path = out.join("summary.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let path = out.join("summary.txt");
    fs::write(&path, result.summary.to_text(&result.failures)).map_err(|e| Error::io(&path, e))
}

/// Runs every (fold, trial seed) pair of `plan`.
///
/// A failing trial is recorded and the rest still run. With `out`, each
/// trial's artifacts and the summaries are written there. `parallel > 1`
/// runs that many trials at once; results are identical to a sequential
/// run because trials share nothing mutable.
pub fn run_protocol(
    dataset: &Dataset,
    plan: &FoldPlan,
    model: &ModelConfig,
    train: &TrainConfig,
    out: Option<&Path>,
    parallel: usize,
) -> Result<ProtocolResult> {
    model.validate()?;
    train.validate()?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let jobs: Vec<(usize, u64)> = (0..plan.n_folds)
        .flat_map(|f| plan.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let run = |&(fold, seed): &(usize, u64)| run_one(dataset, plan, fold, seed, model, train, out);

    let results: Vec<Result<TrialOutcome>> = if parallel > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (&(fold, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::error!("fold {fold} seed {seed}: {e}");
                failures.push(TrialFailure {
                    fold,
                    seed,
                    diverged: matches!(e, Error::Diverged(_)),
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = Summary::from_outcomes(&outcomes, failures.len(), plan.n_folds)?;
    let result = ProtocolResult {
        outcomes,
        failures,
        summary,
    };
    if let Some(out) = out {
        write_summary(out, &result)?;
    }
    Ok(result)
}
