use super::{LstmVars, ModelConfig, ModelParams, ParamVars};
use crate::adcore::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Component counts after each pooling layer, starting from `m`:
/// `k = max(1, ⌊keep · n⌋)`.
pub fn pool_sizes(m: usize, config: &ModelConfig) -> Result<Vec<usize>> {
    config.validate()?;
    if m == 0 {
        return Err(Error::Config("a subject needs at least one component".into()));
    }
    let mut sizes = Vec::with_capacity(config.pool_layers + 1);
    sizes.push(m);
    let mut n = m;
    for _ in 0..config.pool_layers {
        // The small offset keeps products like 0.29·100 from flooring to 28.
        n = ((config.pool_keep * n as f64 + 1e-9).floor() as usize).max(1);
        sizes.push(n);
    }
    Ok(sizes)
}

/// One LSTM step for a column of scalar inputs, built from primitive ops.
///
/// `x_t` is `n × 1`; `h_prev` and `c_prev` are `n × h`. Returns `(h_t, c_t)`.
pub fn lstm_cell(
    g: &mut Graph,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let h = g.value(p.u).rows();
    let xin = g.matmul(x_t, p.w)?;
    let rec = g.matmul(h_prev, p.u)?;
    let pre = g.add(xin, rec)?;
    let pre = g.add_row(pre, p.b)?;
    let i = g.slice_cols(pre, 0, h)?;
    let f = g.slice_cols(pre, h, h)?;
    let cand = g.slice_cols(pre, 2 * h, h)?;
    let o = g.slice_cols(pre, 3 * h, h)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h_t = g.mul(o, tc)?;
    Ok((h_t, c))
}

/// Encodes every row of `x` (one component series per row) into the sum
/// over time of its concatenated forward/backward hidden states.
pub fn encode_all(g: &mut Graph, x: Var, vars: &ParamVars) -> Result<Var> {
    let (rows, steps) = g.value(x).shape();
    if rows == 0 {
        return Err(Error::Input("no components to encode".into()));
    }
    if steps == 0 {
        return Err(Error::Input("empty component time series".into()));
    }
    let f = &vars.lstm_fwd;
    let b = &vars.lstm_bwd;
    let fwd = g.lstm_sum(x, f.w, f.u, f.b, false)?;
    let bwd = g.lstm_sum(x, b.w, b.u, b.b, true)?;
    g.concat_cols(fwd, bwd)
}

/// Sequence embedding of a single component series, `1 × 2h`.
pub fn encode_component(series: &[f64], params: &ModelParams) -> Result<Array> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.leaf(Array::row_vector(series));
    let y = encode_all(&mut g, x, &vars)?;
    Ok(g.value(y).clone())
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = g.value(q).cols();
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let a = g.rowsoftmax(logits)?;
    let z = g.matmul(a, v)?;
    Ok((z, a))
}

/// Scaled dot-product self-attention over component embeddings `y`
/// (`m × 2h`). Returns `(Z, A)` with `A` row-stochastic, row `i` holding
/// how much component `i` attends to each component.
pub fn self_attention(g: &mut Graph, y: Var, vars: &ParamVars) -> Result<(Var, Var)> {
    if g.value(y).rows() == 0 {
        return Err(Error::Input("self-attention over zero components".into()));
    }
    let q = g.matmul(y, vars.wq)?;
    let k = g.matmul(y, vars.wk)?;
    let v = g.matmul(y, vars.wv)?;
    attend(g, q, k, v)
}

/// Result of one top-k pooling layer.
#[derive(Clone, Debug)]
pub struct PoolStep {
    /// `k × d` kept rows, each gated by `tanh` of its score.
    pub z: Var,
    /// Kept row positions in the layer's input, in descending score order.
    pub kept: Vec<usize>,
    /// Projection score of every input row.
    pub scores: Vec<f64>,
}

/// Keeps the `k` rows of `z` with the largest projection onto `p`.
///
/// Scores are `z·p/‖p‖`; ties go to the lower row index.
pub fn topk_pool(g: &mut Graph, z: Var, p: Var, k: usize) -> Result<PoolStep> {
    let n = g.value(z).rows();
    if k < 1 || k > n {
        return Err(Error::Config(format!("top-k with k={k} over {n} rows")));
    }
    let dir = g.unit_norm(p).map_err(|_| {
        Error::Degenerate("pooling scorer vector is zero".into())
    })?;
    let s = g.matmul(z, dir)?;
    let scores = g.value(s).data().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);

    let kept_rows = g.gather_rows(z, &order)?;
    let kept_scores = g.gather_rows(s, &order)?;
    let gate = g.tanh(kept_scores);
    let out = g.scale_rows(kept_rows, gate)?;
    Ok(PoolStep {
        z: out,
        kept: order,
        scores,
    })
}

/// Graph handles and selections for one subject of a batch.
#[derive(Clone, Debug)]
pub struct SubjectNodes {
    /// `1 × classes`.
    pub logits: Var,
    /// `m × m` attention matrix.
    pub attention: Var,
    /// Kept component ids per pooling layer, as original ids.
    pub kept: Vec<Vec<usize>>,
    /// `(original id, score)` for every candidate row of each layer.
    pub scores: Vec<Vec<(usize, f64)>>,
}

/// Runs the network on a batch of subjects sharing `m` and `T`.
///
/// All component series of the batch go through the encoder as one stacked
/// matrix; attention, pooling and the classifier then run per subject.
pub fn forward_batch(
    g: &mut Graph,
    subjects: &[&Array],
    vars: &ParamVars,
    config: &ModelConfig,
) -> Result<Vec<SubjectNodes>> {
    let Some(first) = subjects.first() else {
        return Ok(Vec::new());
    };
    let (m, steps) = first.shape();
    let sizes = pool_sizes(m, config)?;
    if vars.pool.len() != config.pool_layers
        || vars.pool.iter().any(|&p| g.value(p).rows() != config.attn_dim)
    {
        return Err(Error::Config("parameters do not match model configuration".into()));
    }

    let mut stacked = Vec::with_capacity(subjects.len() * m * steps);
    for (i, x) in subjects.iter().enumerate() {
        if x.shape() != (m, steps) {
            return Err(Error::Input(format!(
                "subject {i} of batch has shape {:?}, expected {:?}",
                x.shape(),
                (m, steps)
            )));
        }
        stacked.extend_from_slice(x.data());
    }
    let x = g.leaf(Array::from_vec(subjects.len() * m, steps, stacked)?);
    let y = encode_all(g, x, vars)?;
    let q_all = g.matmul(y, vars.wq)?;
    let k_all = g.matmul(y, vars.wk)?;
    let v_all = g.matmul(y, vars.wv)?;

    let mut out = Vec::with_capacity(subjects.len());
    for s in 0..subjects.len() {
        let rows: Vec<usize> = (s * m..(s + 1) * m).collect();
        let q = g.gather_rows(q_all, &rows)?;
        let k = g.gather_rows(k_all, &rows)?;
        let v = g.gather_rows(v_all, &rows)?;
        let (mut z, attention) = attend(g, q, k, v)?;

        let mut ids: Vec<usize> = (0..m).collect();
        let mut kept = Vec::with_capacity(config.pool_layers);
        let mut scores = Vec::with_capacity(config.pool_layers);
        let mut readout: Option<Var> = None;
        for (layer, &k_layer) in sizes[1..].iter().enumerate() {
            let step = topk_pool(g, z, vars.pool[layer], k_layer)?;
            scores.push(ids.iter().copied().zip(step.scores.iter().copied()).collect());
            ids = step.kept.iter().map(|&r| ids[r]).collect();
            kept.push(ids.clone());
            z = step.z;
            let r = g.mean_rows(z)?;
            readout = Some(match readout {
                None => r,
                Some(acc) => g.add(acc, r)?,
            });
        }
        let v = readout.expect("pool_layers ≥ 1");
        let hidden = g.matmul(v, vars.w1)?;
        let hidden = g.add(hidden, vars.b1)?;
        let hidden = g.tanh(hidden);
        let logits = g.matmul(hidden, vars.w2)?;
        let logits = g.add(logits, vars.b2)?;
        out.push(SubjectNodes {
            logits,
            attention,
            kept,
            scores,
        });
    }
    Ok(out)
}

/// Everything the network reports for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// Row-stochastic `m × m` attention; row `i` attends to column `j`.
    pub attention: Array,
    /// Kept original component ids per pooling layer.
    pub kept: Vec<Vec<usize>>,
    /// `(original id, score)` for every candidate row of each layer.
    pub scores: Vec<Vec<(usize, f64)>>,
}

impl ForwardTrace {
    pub fn from_nodes(g: &Graph, nodes: &SubjectNodes) -> Self {
        Self {
            logits: g.value(nodes.logits).data().to_vec(),
            attention: g.value(nodes.attention).clone(),
            kept: nodes.kept.clone(),
            scores: nodes.scores.clone(),
        }
    }

    pub fn predicted(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &l)| if l > best.1 { (k, l) } else { best })
            .0
    }

    /// Softmax probability of `class`.
    pub fn probability(&self, class: usize) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = self.logits.iter().map(|l| (l - max).exp()).sum();
        (self.logits[class] - max).exp() / total
    }

    /// Smallest gap between any two pooling scores within one layer.
    pub fn min_score_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for layer in &self.scores {
            let mut s: Vec<f64> = layer.iter().map(|&(_, v)| v).collect();
            s.sort_by(f64::total_cmp);
            for w in s.windows(2) {
                gap = gap.min(w[1] - w[0]);
            }
        }
        gap
    }
}

/// Forward pass for one subject's `m × T` matrix.
pub fn forward(x: &Array, params: &ModelParams) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let nodes = forward_batch(&mut g, &[x], &vars, &params.config)?;
    Ok(ForwardTrace::from_nodes(&g, &nodes[0]))
}
