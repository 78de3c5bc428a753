use crate::adcore::Array;
use crate::error::{Error, Result};

use super::TrainConfig;

/// First and second moment estimates, one pair per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array>) -> Self {
        let m: Vec<Array> = shapes
            .into_iter()
            .map(|a| Array::zeros(a.rows(), a.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// What one optimizer step did to the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when no clipping happened).
    pub clip_scale: f64,
}

/// One Adam update with bias correction, after scaling all gradients so
/// their global norm is at most `config.clip`.
///
/// Fails without touching anything if a gradient has a non-finite entry.
pub fn adam_step(
    params: Vec<(String, &mut Array)>,
    grads: &[Array],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<StepInfo> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for {name}")));
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let clip_scale = if grad_norm > config.clip {
        config.clip / grad_norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (theta, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk * clip_scale;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clip_scale,
    })
}
