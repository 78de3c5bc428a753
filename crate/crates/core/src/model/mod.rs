//! The CARSA network: shared biLSTM encoder, self-attention across
//! components, stacked top-k pooling and a two-layer classifier.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use network::{
    encode_all, encode_component, forward, forward_batch, lstm_cell, pool_sizes, self_attention,
    topk_pool, ForwardTrace, PoolStep, SubjectNodes,
};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::{Array, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// LSTM hidden size per direction.
    pub hidden: usize,
    pub attn_dim: usize,
    pub pool_layers: usize,
    /// Fraction of components kept by each pooling layer.
    pub pool_keep: f64,
    pub fc_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            attn_dim: 64,
            pool_layers: 3,
            pool_keep: 0.8,
            fc_hidden: 64,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden < 1 {
            return fail("hidden size must be ≥ 1".into());
        }
        if self.attn_dim < 1 || self.fc_hidden < 1 {
            return fail("attention and classifier widths must be ≥ 1".into());
        }
        if !(self.pool_keep > 0.0 && self.pool_keep <= 1.0) {
            return fail(format!("pool_keep must lie in (0, 1], got {}", self.pool_keep));
        }
        if self.pool_layers < 1 {
            return fail("at least one pooling layer is required".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate blocks along the columns are ordered
/// input, forget, cell, output, each `hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `1 × 4h` input weights (scalar input per step).
    pub w: Array,
    /// `h × 4h` recurrent weights.
    pub u: Array,
    /// `1 × 4h` biases.
    pub b: Array,
}

impl LstmParams {
    fn zeros(h: usize) -> Self {
        Self {
            w: Array::zeros(1, 4 * h),
            u: Array::zeros(h, 4 * h),
            b: Array::zeros(1, 4 * h),
        }
    }
}

/// Every learnable weight of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    /// `2h × d` query, key and value projections.
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    /// One `d × 1` scoring direction per pooling layer.
    pub pool: Vec<Array>,
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, d) = (config.hidden, config.attn_dim);
        Ok(Self {
            config: config.clone(),
            lstm_fwd: LstmParams::zeros(h),
            lstm_bwd: LstmParams::zeros(h),
            wq: Array::zeros(2 * h, d),
            wk: Array::zeros(2 * h, d),
            wv: Array::zeros(2 * h, d),
            pool: (0..config.pool_layers).map(|_| Array::zeros(d, 1)).collect(),
            w1: Array::zeros(d, config.fc_hidden),
            b1: Array::zeros(1, config.fc_hidden),
            w2: Array::zeros(config.fc_hidden, config.classes),
            b2: Array::zeros(1, config.classes),
        })
    }

    /// Weights drawn from `U(−1/√fan_in, 1/√fan_in)`; biases zero except the
    /// LSTM forget-gate bias, which starts at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        for (name, array) in params.named_mut() {
            if name.ends_with(".b") {
                continue;
            }
            // Every weight maps rows → cols, so fan-in is the row count.
            let bound = 1.0 / (array.rows() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in array.data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        for lstm in [&mut params.lstm_fwd, &mut params.lstm_bwd] {
            for v in &mut lstm.b.data_mut()[h..2 * h] {
                *v = 1.0;
            }
        }
        Ok(params)
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out: Vec<(String, &Array)> = vec![
            ("lstm.fwd.w".into(), &self.lstm_fwd.w),
            ("lstm.fwd.u".into(), &self.lstm_fwd.u),
            ("lstm.fwd.b".into(), &self.lstm_fwd.b),
            ("lstm.bwd.w".into(), &self.lstm_bwd.w),
            ("lstm.bwd.u".into(), &self.lstm_bwd.u),
            ("lstm.bwd.b".into(), &self.lstm_bwd.b),
            ("attn.wq".into(), &self.wq),
            ("attn.wk".into(), &self.wk),
            ("attn.wv".into(), &self.wv),
        ];
        out.extend(self.pool.iter().enumerate().map(|(i, p)| (format!("pool.{i}"), p)));
        out.extend([
            ("fc1.w".into(), &self.w1),
            ("fc1.b".into(), &self.b1),
            ("fc2.w".into(), &self.w2),
            ("fc2.b".into(), &self.b2),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out: Vec<(String, &mut Array)> = vec![
            ("lstm.fwd.w".into(), &mut self.lstm_fwd.w),
            ("lstm.fwd.u".into(), &mut self.lstm_fwd.u),
            ("lstm.fwd.b".into(), &mut self.lstm_fwd.b),
            ("lstm.bwd.w".into(), &mut self.lstm_bwd.w),
            ("lstm.bwd.u".into(), &mut self.lstm_bwd.u),
            ("lstm.bwd.b".into(), &mut self.lstm_bwd.b),
            ("attn.wq".into(), &mut self.wq),
            ("attn.wk".into(), &mut self.wk),
            ("attn.wv".into(), &mut self.wv),
        ];
        out.extend(
            self.pool
                .iter_mut()
                .enumerate()
                .map(|(i, p)| (format!("pool.{i}"), p)),
        );
        out.extend([
            ("fc1.w".into(), &mut self.w1),
            ("fc1.b".into(), &mut self.b1),
            ("fc2.w".into(), &mut self.w2),
            ("fc2.b".into(), &mut self.b2),
        ]);
        out
    }

    pub fn arrays(&self) -> Vec<Array> {
        self.named().into_iter().map(|(_, a)| a.clone()).collect()
    }

    /// Rebuilds parameters from arrays in [`ModelParams::named`] order.
    pub fn from_arrays(config: &ModelConfig, arrays: &[Array]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let slots = params.named_mut();
        if slots.len() != arrays.len() {
            return Err(Error::Input(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                arrays.len()
            )));
        }
        for ((name, slot), a) in slots.into_iter().zip(arrays) {
            if slot.shape() != a.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?} does not match configured {:?}",
                    a.shape(),
                    slot.shape()
                )));
            }
            *slot = a.clone();
        }
        Ok(params)
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        let lstm = |g: &mut Graph, p: &LstmParams| LstmVars {
            w: g.leaf(p.w.clone()),
            u: g.leaf(p.u.clone()),
            b: g.leaf(p.b.clone()),
        };
        ParamVars::from_params_with(g, self, lstm)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// Graph handles for a [`ModelParams`], in the same order as
/// [`ModelParams::named`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub lstm_fwd: LstmVars,
    pub lstm_bwd: LstmVars,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub pool: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    fn from_params_with(
        g: &mut Graph,
        p: &ModelParams,
        lstm: impl Fn(&mut Graph, &LstmParams) -> LstmVars,
    ) -> Self {
        let lstm_fwd = lstm(g, &p.lstm_fwd);
        let lstm_bwd = lstm(g, &p.lstm_bwd);
        Self {
            lstm_fwd,
            lstm_bwd,
            wq: g.leaf(p.wq.clone()),
            wk: g.leaf(p.wk.clone()),
            wv: g.leaf(p.wv.clone()),
            pool: p.pool.iter().map(|a| g.leaf(a.clone())).collect(),
            w1: g.leaf(p.w1.clone()),
            b1: g.leaf(p.b1.clone()),
            w2: g.leaf(p.w2.clone()),
            b2: g.leaf(p.b2.clone()),
        }
    }

    /// Wraps already-recorded leaves given in [`ModelParams::named`] order.
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let expected = 9 + config.pool_layers + 4;
        if vars.len() != expected {
            return Err(Error::Input(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let l = config.pool_layers;
        Ok(Self {
            lstm_fwd: LstmVars {
                w: vars[0],
                u: vars[1],
                b: vars[2],
            },
            lstm_bwd: LstmVars {
                w: vars[3],
                u: vars[4],
                b: vars[5],
            },
            wq: vars[6],
            wk: vars[7],
            wv: vars[8],
            pool: vars[9..9 + l].to_vec(),
            w1: vars[9 + l],
            b1: vars[10 + l],
            w2: vars[11 + l],
            b2: vars[12 + l],
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.lstm_fwd.w,
            self.lstm_fwd.u,
            self.lstm_fwd.b,
            self.lstm_bwd.w,
            self.lstm_bwd.u,
            self.lstm_bwd.b,
            self.wq,
            self.wk,
            self.wv,
        ];
        out.extend(&self.pool);
        out.extend([self.w1, self.b1, self.w2, self.b2]);
        out
    }
}

#[cfg(test)]
mod tests;
