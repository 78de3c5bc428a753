//! Gradient verification suite: every differentiable operation and the
//! toy-scale model, checked against central differences at fixed seeded
//! parameter points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adcore::{gradcheck, Array, Graph, Var, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::model::{forward, forward_batch, lstm_cell, LstmVars, ModelConfig, ModelParams, ParamVars};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Parameter points per check.
pub const POINTS: usize = 10;

/// Checks in the order they run.
pub const OP_NAMES: [&str; 21] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "scale",
    "add_row",
    "scale_rows",
    "unit_norm",
    "softmax",
    "sum_rows",
    "mean_rows",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "xent",
    "lstm_sum",
    "lstm_cell",
    "model",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Multiplies each checked output by a detached copy of itself, so the
    /// tape misses half of the derivative.
    Detach,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    /// Worst relative error over all points.
    pub max_rel_err: f64,
    pub points: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Array::from_vec(rows, cols, data).expect("length matches shape")
}

/// Scalar read-out with fixed random weights so every output coordinate
/// gets a distinct gradient.
fn reduce(g: &mut Graph, y: Var, fault: Fault, seed: u64) -> Result<Var> {
    let y = match fault {
        Fault::None => y,
        Fault::Detach => {
            let frozen = g.detach(y);
            g.mul(y, frozen)?
        }
    };
    let (r, c) = g.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(random(&mut rng, r, c));
    let prod = g.mul(y, w)?;
    g.sum_all(prod)
}

fn over_points<F>(shapes: &[(usize, usize)], fault: Fault, seed: u64, op: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for point in 0..POINTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let params: Vec<Array> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let report = gradcheck(
            |g, v| {
                let y = op(g, v)?;
                reduce(g, y, fault, seed)
            },
            &params,
            DEFAULT_STEP,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

/// The toy model: 3 components, 8 steps, hidden 4, attention width 4.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        attn_dim: 4,
        pool_layers: 3,
        pool_keep: 0.8,
        fc_hidden: 5,
        classes: 2,
    }
}

fn check_model(fault: Fault) -> Result<f64> {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut tries = 0;
    while points < POINTS {
        tries += 1;
        if tries > 100 * POINTS {
            return Err(Error::Degenerate("no tie-free parameter points found".into()));
        }
        let params = ModelParams::init(&config, rng.random())?;
        let x = random(&mut rng, 3, 8);
        // Pooling selection must not flip inside the difference stencil.
        if forward(&x, &params)?.min_score_gap() < 1e-3 {
            continue;
        }
        let label = points % 2;
        let report = gradcheck(
            |g, vars| {
                let pv = ParamVars::from_vars(&config, vars)?;
                let nodes = forward_batch(g, &[&x], &pv, &config)?;
                let loss = g.softmax_xent(nodes[0].logits, label)?;
                reduce(g, loss, fault, 0)
            },
            &params.arrays(),
            DEFAULT_STEP,
        )?;
        worst = worst.max(report.max_rel_err);
        points += 1;
    }
    Ok(worst)
}

fn check_one(name: &'static str, fault: Fault) -> Result<f64> {
    let h = 2;
    match name {
        "matmul" => over_points(&[(3, 4), (4, 2)], fault, 1, |g, v| g.matmul(v[0], v[1])),
        "transpose" => over_points(&[(3, 4)], fault, 2, |g, v| Ok(g.transpose(v[0]))),
        "add" => over_points(&[(3, 4), (3, 4)], fault, 3, |g, v| g.add(v[0], v[1])),
        "sub" => over_points(&[(3, 4), (3, 4)], fault, 4, |g, v| g.sub(v[0], v[1])),
        "mul" => over_points(&[(3, 4), (3, 4)], fault, 5, |g, v| g.mul(v[0], v[1])),
        "sigmoid" => over_points(&[(3, 4)], fault, 6, |g, v| Ok(g.sigmoid(v[0]))),
        "tanh" => over_points(&[(3, 4)], fault, 7, |g, v| Ok(g.tanh(v[0]))),
        "scale" => over_points(&[(3, 4)], fault, 8, |g, v| Ok(g.scale(v[0], -2.5))),
        "add_row" => over_points(&[(3, 4), (1, 4)], fault, 9, |g, v| g.add_row(v[0], v[1])),
        "scale_rows" => over_points(&[(3, 4), (3, 1)], fault, 10, |g, v| g.scale_rows(v[0], v[1])),
        "unit_norm" => over_points(&[(4, 1)], fault, 11, |g, v| g.unit_norm(v[0])),
        "softmax" => over_points(&[(3, 4)], fault, 12, |g, v| g.rowsoftmax(v[0])),
        "sum_rows" => over_points(&[(3, 4)], fault, 13, |g, v| g.sum_rows(v[0])),
        "mean_rows" => over_points(&[(3, 4)], fault, 14, |g, v| g.mean_rows(v[0])),
        "concat_cols" => over_points(&[(3, 2), (3, 3)], fault, 15, |g, v| g.concat_cols(v[0], v[1])),
        "slice_cols" => over_points(&[(3, 5)], fault, 16, |g, v| g.slice_cols(v[0], 1, 3)),
        "gather_rows" => over_points(&[(4, 3)], fault, 17, |g, v| g.gather_rows(v[0], &[2, 0, 3])),
        "xent" => over_points(&[(1, 3)], fault, 18, |g, v| g.softmax_xent(v[0], 1)),
        "lstm_sum" => {
            let shapes = [(3, 6), (1, 4 * h), (h, 4 * h), (1, 4 * h)];
            let fwd = over_points(&shapes, fault, 19, |g, v| g.lstm_sum(v[0], v[1], v[2], v[3], false))?;
            let bwd = over_points(&shapes, fault, 20, |g, v| g.lstm_sum(v[0], v[1], v[2], v[3], true))?;
            Ok(fwd.max(bwd))
        }
        "lstm_cell" => {
            let shapes = [(3, 1), (3, h), (3, h), (1, 4 * h), (h, 4 * h), (1, 4 * h)];
            over_points(&shapes, fault, 21, |g, v| {
                let p = LstmVars {
                    w: v[3],
                    u: v[4],
                    b: v[5],
                };
                let (h_t, c_t) = lstm_cell(g, v[0], v[1], v[2], &p)?;
                g.concat_cols(h_t, c_t)
            })
        }
        "model" => check_model(fault),
        other => Err(Error::Input(format!("unknown operation {other:?}"))),
    }
}

/// Runs the checks named in `only` (all of them when `None`), in
/// [`OP_NAMES`] order.
pub fn run_checks(only: Option<&[String]>, fault: Fault) -> Result<Vec<OpCheck>> {
    if let Some(names) = only {
        if let Some(bad) = names.iter().find(|n| !OP_NAMES.contains(&n.as_str())) {
            return Err(Error::Input(format!(
                "unknown operation {bad:?}; known: {}",
                OP_NAMES.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for name in OP_NAMES {
        if only.is_some_and(|names| !names.iter().any(|n| n == name)) {
            continue;
        }
        let max_rel_err = check_one(name, fault)?;
        log::debug!("{name}: max relative error {max_rel_err:.3e}");
        out.push(OpCheck {
            name,
            max_rel_err,
            points: POINTS,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_ops_pass_and_fault_is_caught() {
        let only: Vec<String> = vec!["softmax".into(), "lstm_cell".into()];
        let ok = run_checks(Some(&only), Fault::None).unwrap();
        assert_eq!(ok.iter().map(|c| c.name).collect::<Vec<_>>(), ["softmax", "lstm_cell"]);
        assert!(ok.iter().all(OpCheck::passed), "{ok:?}");
        let bad = run_checks(Some(&only), Fault::Detach).unwrap();
        assert!(bad.iter().all(|c| !c.passed()), "{bad:?}");
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(run_checks(Some(&["nope".to_string()]), Fault::None).is_err());
    }
}
