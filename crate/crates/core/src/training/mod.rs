//! Optimizer, per-fold training loop, the folds × trials protocol and
//! classification metrics.

mod adam;
mod metrics;
mod protocol;


use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::{Array, Graph};
use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ForwardTrace, ModelConfig, ModelParams};

pub use adam::{adam_step, AdamState, StepInfo};
pub use metrics::{accuracy, auc, Stats};
pub use protocol::{
    run_protocol, write_folds_csv, FoldSummary, ProtocolResult, Summary, TrialFailure,
    SUMMARY_CSV_HEADER,
};

/// ChaCha stream used for the per-epoch shuffles of a trial; stream 0 of
/// the same seed initializes the parameters.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm threshold.
    pub clip: f64,
    pub seed: u64,
    pub trials: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            clip: 5.0,
            seed: 0,
            trials: 10,
            folds: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("Adam epsilon must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.clip > 0.0) {
            return fail("clip norm must be positive");
        }
        if self.trials == 0 {
            return fail("trials must be at least 1");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        Ok(())
    }
}

/// Validation metrics after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialReport {
    pub fold: usize,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Final-epoch validation accuracy.
    pub val_accuracy: f64,
    /// Final-epoch validation AUC.
    pub val_auc: f64,
    pub checkpoint: Option<PathBuf>,
    pub attention_path: Option<PathBuf>,
}

impl TrialReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Model output for one validation subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Position in `Dataset::samples`.
    pub index: usize,
    pub label: usize,
    /// Probability of class 1.
    pub score: f64,
    pub predicted: usize,
    pub attention: Array,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub report: TrialReport,
    pub params: ModelParams,
    /// Final-epoch predictions on the validation fold.
    pub validation: Vec<Prediction>,
}

/// Runs the model on `indices` of an already z-scored dataset.
pub fn predict(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let xs: Vec<&Array> = chunk.iter().map(|&i| &data.samples[i].x).collect();
        let nodes = forward_batch(&mut g, &xs, &vars, &params.config)?;
        for (n, &i) in nodes.iter().zip(chunk) {
            let trace = ForwardTrace::from_nodes(&g, n);
            out.push(Prediction {
                index: i,
                label: data.samples[i].label,
                score: trace.probability(1),
                predicted: trace.predicted(),
                attention: trace.attention,
            });
        }
    }
    Ok(out)
}

/// Accuracy and AUC of a set of predictions.
pub fn score_predictions(preds: &[Prediction]) -> Result<(f64, f64)> {
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let scored: Vec<(f64, usize)> = preds.iter().map(|p| (p.score, p.label)).collect();
    Ok((accuracy(&predicted, &labels)?, auc(&scored)?))
}

/// Non-finite values inside a trial mean the optimization blew up.
fn as_divergence(e: Error, fold: usize, seed: u64, epoch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Diverged(format!(
            "fold {fold} seed {seed} epoch {}: non-finite value: {msg}",
            epoch + 1
        )),
        other => other,
    }
}

/// One trial: trains on every fold except `fold` and evaluates on `fold`
/// after each epoch. `dataset` holds raw series; they are z-scored here.
pub fn train_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrialOutcome> {
    train.validate()?;
    if fold >= plan.n_folds {
        return Err(Error::Config(format!("fold {fold} of {}", plan.n_folds)));
    }
    if plan.fold_of.len() != dataset.len() {
        return Err(Error::Input(format!(
            "fold plan covers {} subjects, dataset has {}",
            plan.fold_of.len(),
            dataset.len()
        )));
    }
    let data = dataset.zscored()?;
    let train_idx = plan.training(fold);
    let val_idx = plan.validation(fold);

    let mut params = ModelParams::init(model, seed)?;
    let mut state = AdamState::new(params.named().into_iter().map(|(_, a)| a));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut epochs = Vec::with_capacity(train.epochs);
    let mut validation = Vec::new();
    for epoch in 0..train.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let xs: Vec<&Array> = batch.iter().map(|&i| &data.samples[i].x).collect();
            let diverged = |e| as_divergence(e, fold, seed, epoch);
            let nodes = forward_batch(&mut g, &xs, &vars, model).map_err(diverged)?;
            let mut total = None;
            for (n, &i) in nodes.iter().zip(batch) {
                let l = g.softmax_xent(n.logits, data.samples[i].label)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let total = total.expect("batches are non-empty");
            let loss = g.scale(total, 1.0 / batch.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "fold {fold} seed {seed}: loss {value} in epoch {}",
                    epoch + 1
                )));
            }
            g.backward(loss).map_err(diverged)?;
            let grads: Vec<Array> = vars.all().into_iter().map(|v| g.grad_or_zeros(v)).collect();
            adam_step(params.named_mut(), &grads, &mut state, train).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!(
                    "fold {fold} seed {seed} epoch {}: {msg}",
                    epoch + 1
                )),
                other => other,
            })?;
            loss_sum += value * batch.len() as f64;
        }

        validation = predict(&params, &data, &val_idx, train.batch_size)
            .map_err(|e| as_divergence(e, fold, seed, epoch))?;
        let (val_accuracy, val_auc) = score_predictions(&validation)?;
        let metrics = EpochMetrics {
            train_loss: loss_sum / train_idx.len() as f64,
            val_accuracy,
            val_auc,
        };
        log::debug!(
            "fold {fold} seed {seed} epoch {}: loss {:.4} acc {:.3} auc {:.3}",
            epoch + 1,
            metrics.train_loss,
            val_accuracy,
            val_auc
        );
        epochs.push(metrics);
    }

    let last = *epochs.last().expect("epochs ≥ 1");
    Ok(TrialOutcome {
        report: TrialReport {
            fold,
            seed,
            epochs,
            val_accuracy: last.val_accuracy,
            val_auc: last.val_auc,
            checkpoint: None,
            attention_path: None,
        },
        params,
        validation,
    })
}
