use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adcore::{gradcheck, DEFAULT_STEP};

fn toy_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        attn_dim: 4,
        pool_layers: 3,
        pool_keep: 0.8,
        fc_hidden: 5,
        classes: 2,
    }
}

fn random_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Array::from_vec(rows, cols, data).unwrap()
}

fn scalar_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step scalar LSTM reference, sharing no code with the graph ops.
fn oracle_step(x: f64, h_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let h = h_prev.len();
    let pre = |gate: usize, j: usize| {
        let col = gate * h + j;
        let mut acc = x * p.w.get(0, col) + p.b.get(0, col);
        for (k, hk) in h_prev.iter().enumerate() {
            acc += hk * p.u.get(k, col);
        }
        acc
    };
    let mut h_out = vec![0.0; h];
    let mut c_out = vec![0.0; h];
    for j in 0..h {
        let i = scalar_sigmoid(pre(0, j));
        let f = scalar_sigmoid(pre(1, j));
        let g = pre(2, j).tanh();
        let o = scalar_sigmoid(pre(3, j));
        c_out[j] = f * c_prev[j] + i * g;
        h_out[j] = o * c_out[j].tanh();
    }
    (h_out, c_out)
}

/// y = Σ_t [h_fwd_t, h_bwd_t] via the scalar reference.
fn oracle_encode(series: &[f64], params: &ModelParams) -> Vec<f64> {
    let h = params.config.hidden;
    let run = |p: &LstmParams, order: Vec<usize>| {
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        let mut total = vec![0.0; h];
        for t in order {
            let (hn, cn) = oracle_step(series[t], &hs, &cs, p);
            for (acc, v) in total.iter_mut().zip(&hn) {
                *acc += v;
            }
            hs = hn;
            cs = cn;
        }
        total
    };
    let n = series.len();
    let mut y = run(&params.lstm_fwd, (0..n).collect());
    y.extend(run(&params.lstm_bwd, (0..n).rev().collect()));
    y
}

/// Attention matrix by explicit loops.
fn oracle_attention(y: &Array, params: &ModelParams) -> Vec<Vec<f64>> {
    let (m, width) = y.shape();
    let d = params.config.attn_dim;
    let project = |w: &Array| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| {
                (0..d)
                    .map(|c| (0..width).map(|k| y.get(i, k) * w.get(k, c)).sum())
                    .collect()
            })
            .collect()
    };
    let q = project(&params.wq);
    let k = project(&params.wk);
    (0..m)
        .map(|i| {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn default_config_shapes() {
    let config = ModelConfig::default();
    let p = ModelParams::zeros(&config).unwrap();
    assert_eq!(p.lstm_fwd.w.shape(), (1, 256));
    assert_eq!(p.lstm_fwd.u.shape(), (64, 256));
    assert_eq!(p.wq.shape(), (128, 64));
    assert_eq!(p.pool.len(), 3);
    assert_eq!(p.pool[0].shape(), (64, 1));
    assert_eq!(p.w1.shape(), (64, 64));
    assert_eq!(p.w2.shape(), (64, 2));
    assert_eq!(p.b2.shape(), (1, 2));
}

#[test]
fn config_validation() {
    let bad = [
        ModelConfig { hidden: 0, ..ModelConfig::default() },
        ModelConfig { pool_keep: 0.0, ..ModelConfig::default() },
        ModelConfig { pool_keep: 1.5, ..ModelConfig::default() },
        ModelConfig { pool_layers: 0, ..ModelConfig::default() },
        ModelConfig { classes: 1, ..ModelConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn init_is_seeded_and_bounded() {
    let config = toy_config();
    let a = ModelParams::init(&config, 3).unwrap();
    let b = ModelParams::init(&config, 3).unwrap();
    let c = ModelParams::init(&config, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(&a.lstm_fwd.b.data()[4..8], &[1.0; 4]);
    assert_eq!(&a.lstm_fwd.b.data()[..4], &[0.0; 4]);
    assert!(a.lstm_fwd.w.data().iter().all(|v| v.abs() <= 1.0));
    assert!(a.wq.data().iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    assert_eq!(a.b1, Array::zeros(1, 5));
}

#[test]
fn lstm_cell_zero_params() {
    let config = toy_config();
    let params = ModelParams::zeros(&config).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    for x in [0.0, 2.5, -7.0] {
        let xt = g.leaf(Array::scalar(x));
        let h0 = g.leaf(Array::zeros(1, 4));
        let c0 = g.leaf(Array::zeros(1, 4));
        let (h, c) = lstm_cell(&mut g, xt, h0, c0, &vars.lstm_fwd).unwrap();
        assert_eq!(g.value(h), &Array::zeros(1, 4));
        assert_eq!(g.value(c), &Array::zeros(1, 4));
    }
}

#[test]
fn lstm_cell_matches_scalar_oracle() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let x = rng.random_range(-2.0..2.0);
        let h_prev = random_array(&mut rng, 1, 4, 1.0);
        let c_prev = random_array(&mut rng, 1, 4, 1.0);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let xt = g.leaf(Array::scalar(x));
        let hv = g.leaf(h_prev.clone());
        let cv = g.leaf(c_prev.clone());
        let (h, c) = lstm_cell(&mut g, xt, hv, cv, &vars.lstm_fwd).unwrap();
        let (h_ref, c_ref) = oracle_step(x, h_prev.data(), c_prev.data(), &params.lstm_fwd);
        for (a, b) in g.value(h).data().iter().zip(&h_ref) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in g.value(c).data().iter().zip(&c_ref) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn fused_encoder_matches_scalar_oracle() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t_len in [1, 2, 9] {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let series: Vec<f64> = (0..t_len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = encode_component(&series, &params).unwrap();
        let expected = oracle_encode(&series, &params);
        assert_eq!(y.shape(), (1, 8));
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "T={t_len}: {a} vs {b}");
        }
    }
}

#[test]
fn single_step_embedding_is_the_concatenated_state() {
    let params = ModelParams::init(&toy_config(), 2).unwrap();
    let y = encode_component(&[0.7], &params).unwrap();
    let (hf, _) = oracle_step(0.7, &[0.0; 4], &[0.0; 4], &params.lstm_fwd);
    let (hb, _) = oracle_step(0.7, &[0.0; 4], &[0.0; 4], &params.lstm_bwd);
    let expected: Vec<f64> = hf.into_iter().chain(hb).collect();
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-15);
    }
}

#[test]
fn zero_params_give_zero_embedding() {
    let params = ModelParams::zeros(&toy_config()).unwrap();
    let y = encode_component(&[3.0; 6], &params).unwrap();
    assert_eq!(y, Array::zeros(1, 8));
}

#[test]
fn empty_series_is_rejected() {
    let params = ModelParams::zeros(&toy_config()).unwrap();
    assert!(matches!(encode_component(&[], &params), Err(Error::Input(_))));
}

#[test]
fn reversal_swaps_direction_roles() {
    let config = toy_config();
    let params = ModelParams::init(&config, 13).unwrap();
    let mut swapped = params.clone();
    std::mem::swap(&mut swapped.lstm_fwd, &mut swapped.lstm_bwd);
    let series = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5];
    let reversed: Vec<f64> = series.iter().rev().copied().collect();

    let y = encode_component(&series, &params).unwrap();
    let y_rev = encode_component(&reversed, &swapped).unwrap();
    let h = config.hidden;
    let halves_swapped: Vec<f64> = y.data()[h..].iter().chain(&y.data()[..h]).copied().collect();
    for (a, b) in y_rev.data().iter().zip(&halves_swapped) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn fused_recurrence_matches_unrolled_cells() {
    // Values and parameter gradients of the fused op against the same
    // recurrence spelled out with lstm_cell.
    let config = toy_config();
    let params = ModelParams::init(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_array(&mut rng, 3, 7, 1.5);
    let weights = random_array(&mut rng, 3, 4, 1.0);

    let mut fused = Graph::new();
    let fv = params.bind(&mut fused);
    let xf = fused.leaf(x.clone());
    let wf = fused.leaf(weights.clone());
    let lf = &fv.lstm_fwd;
    let out = fused.lstm_sum(xf, lf.w, lf.u, lf.b, true).unwrap();
    let prod = fused.mul(out, wf).unwrap();
    let loss_f = fused.sum_all(prod).unwrap();
    fused.backward(loss_f).unwrap();

    let mut unrolled = Graph::new();
    let uv = params.bind(&mut unrolled);
    let mut h = unrolled.leaf(Array::zeros(3, 4));
    let mut c = unrolled.leaf(Array::zeros(3, 4));
    let mut total: Option<Var> = None;
    for t in (0..7).rev() {
        let col: Vec<f64> = (0..3).map(|r| x.get(r, t)).collect();
        let xt = unrolled.leaf(Array::col_vector(&col));
        let (hn, cn) = lstm_cell(&mut unrolled, xt, h, c, &uv.lstm_fwd).unwrap();
        total = Some(match total {
            None => hn,
            Some(acc) => unrolled.add(acc, hn).unwrap(),
        });
        h = hn;
        c = cn;
    }
    let wu = unrolled.leaf(weights);
    let prod = unrolled.mul(total.unwrap(), wu).unwrap();
    let loss_u = unrolled.sum_all(prod).unwrap();
    unrolled.backward(loss_u).unwrap();

    assert!((fused.value(loss_f).item() - unrolled.value(loss_u).item()).abs() <= 1e-12);
    for (a, b) in [
        (lf.w, uv.lstm_fwd.w),
        (lf.u, uv.lstm_fwd.u),
        (lf.b, uv.lstm_fwd.b),
    ] {
        let diff = fused.grad(a).unwrap().max_abs_diff(unrolled.grad(b).unwrap());
        assert!(diff <= 1e-12, "gradient mismatch {diff}");
    }
}

#[test]
fn encoder_shapes_and_row_equivariance() {
    let config = ModelConfig::default();
    let params = ModelParams::init(&config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_array(&mut rng, 100, 140, 1.0);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = encode_all(&mut g, xv, &vars).unwrap();
    assert_eq!(g.value(y).shape(), (100, 128));

    // m = 1 reduces to encode_component.
    let single = encode_component(x.row(7), &params).unwrap();
    for (a, b) in single.data().iter().zip(g.value(y).row(7)) {
        assert!((a - b).abs() <= 1e-12);
    }

    let small = toy_config();
    let params = ModelParams::init(&small, 9).unwrap();
    let x = random_array(&mut rng, 6, 10, 1.0);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let permuted = Array::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let a = g.leaf(x);
    let b = g.leaf(permuted);
    let ya = encode_all(&mut g, a, &vars).unwrap();
    let yb = encode_all(&mut g, b, &vars).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (p, q) in g.value(yb).row(k).iter().zip(g.value(ya).row(i)) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_single_component() {
    let params = ModelParams::init(&toy_config(), 4).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let y = g.leaf(Array::row_vector(&[0.1, -0.4, 0.3, 0.9, 0.2, 0.0, -1.0, 0.5]));
    let (z, a) = self_attention(&mut g, y, &vars).unwrap();
    assert_eq!(g.value(a), &Array::scalar(1.0));
    let v = g.value(y).matmul(&params.wv).unwrap();
    assert!(g.value(z).max_abs_diff(&v) <= 1e-15);
}

#[test]
fn attention_zero_queries_are_uniform() {
    let mut params = ModelParams::init(&toy_config(), 4).unwrap();
    params.wq = Array::zeros(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y_val = random_array(&mut rng, 5, 8, 1.0);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let y = g.leaf(y_val.clone());
    let (z, a) = self_attention(&mut g, y, &vars).unwrap();
    assert!(g.value(a).data().iter().all(|&p| (p - 0.2).abs() <= 1e-15));
    let v = y_val.matmul(&params.wv).unwrap();
    for r in 0..5 {
        for c in 0..4 {
            let mean: f64 = (0..5).map(|i| v.get(i, c)).sum::<f64>() / 5.0;
            assert!((g.value(z).get(r, c) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_matches_loop_oracle() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let y_val = random_array(&mut rng, 4, 8, 2.0);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let y = g.leaf(y_val.clone());
        let (_, a) = self_attention(&mut g, y, &vars).unwrap();
        let expected = oracle_attention(&y_val, &params);
        for i in 0..4 {
            for j in 0..4 {
                assert!((g.value(a).get(i, j) - expected[i][j]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn topk_examples() {
    let mut g = Graph::new();
    let z = g.leaf(Array::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let p = g.leaf(Array::col_vector(&[1.0, 0.0]));
    let step = topk_pool(&mut g, z, p, 1).unwrap();
    assert_eq!(step.kept, vec![0]);
    let out = g.value(step.z);
    assert_eq!(out.shape(), (1, 2));
    assert!((out.get(0, 0) - 1f64.tanh()).abs() <= 1e-15);
    assert!((out.get(0, 0) - 0.761_594_155_955_764_9).abs() <= 1e-12);
    assert_eq!(out.get(0, 1), 0.0);

    // Full keep: every row, sorted by descending score.
    let z = g.leaf(Array::from_rows(&[[0.1], [0.5], [-0.3], [0.2]]).unwrap());
    let p = g.leaf(Array::col_vector(&[2.0]));
    let step = topk_pool(&mut g, z, p, 4).unwrap();
    assert_eq!(step.kept, vec![1, 3, 0, 2]);

    // Ties go to the lower index.
    let z = g.leaf(Array::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap());
    let p = g.leaf(Array::col_vector(&[1.0, 1.0]));
    let step = topk_pool(&mut g, z, p, 1).unwrap();
    assert_eq!(step.kept, vec![0]);

    assert!(matches!(topk_pool(&mut g, z, p, 0), Err(Error::Config(_))));
    assert!(matches!(topk_pool(&mut g, z, p, 4), Err(Error::Config(_))));
    let zero = g.leaf(Array::zeros(2, 1));
    assert!(matches!(topk_pool(&mut g, z, zero, 1), Err(Error::Degenerate(_))));
}

#[test]
fn pooling_schedule() {
    let config = ModelConfig::default();
    assert_eq!(pool_sizes(100, &config).unwrap(), vec![100, 80, 64, 51]);
    assert_eq!(pool_sizes(3, &toy_config()).unwrap(), vec![3, 2, 1, 1]);
    assert_eq!(pool_sizes(1, &config).unwrap(), vec![1, 1, 1, 1]);
    let odd = ModelConfig { pool_keep: 0.29, pool_layers: 1, ..config.clone() };
    assert_eq!(pool_sizes(100, &odd).unwrap(), vec![100, 29]);
    assert!(matches!(pool_sizes(0, &config), Err(Error::Config(_))));
}

#[test]
fn zero_classifier_gives_zero_logits() {
    // Pooling scorers must be nonzero; every other weight is zero.
    let config = toy_config();
    let mut params = ModelParams::zeros(&config).unwrap();
    for p in &mut params.pool {
        *p = Array::ones(4, 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_array(&mut rng, 6, 9, 2.0);
    let trace = forward(&x, &params).unwrap();
    assert_eq!(trace.logits, vec![0.0, 0.0]);
}

#[test]
fn trace_shapes_and_nesting() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for m in [1, 2, 5, 13] {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let x = random_array(&mut rng, m, 6, 1.5);
        let trace = forward(&x, &params).unwrap();
        let sizes = pool_sizes(m, &config).unwrap();
        assert_eq!(trace.logits.len(), 2);
        assert_eq!(trace.attention.shape(), (m, m));
        assert_eq!(trace.kept.len(), 3);
        for (layer, kept) in trace.kept.iter().enumerate() {
            assert_eq!(kept.len(), sizes[layer + 1]);
            assert_eq!(trace.scores[layer].len(), sizes[layer]);
            assert!(kept.iter().all(|&i| i < m));
            if layer > 0 {
                assert!(kept.iter().all(|i| trace.kept[layer - 1].contains(i)));
            }
        }
        for r in 0..m {
            assert!((trace.attention.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn batch_forward_matches_single_subject() {
    let config = toy_config();
    let params = ModelParams::init(&config, 44).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let xs: Vec<Array> = (0..3).map(|_| random_array(&mut rng, 5, 7, 1.0)).collect();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let refs: Vec<&Array> = xs.iter().collect();
    let nodes = forward_batch(&mut g, &refs, &vars, &config).unwrap();
    for (x, n) in xs.iter().zip(&nodes) {
        let batched = ForwardTrace::from_nodes(&g, n);
        let single = forward(x, &params).unwrap();
        assert_eq!(batched.kept, single.kept);
        for (a, b) in batched.logits.iter().zip(&single.logits) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    let wrong = random_array(&mut rng, 4, 7, 1.0);
    let refs = vec![&xs[0], &wrong];
    assert!(forward_batch(&mut g, &refs, &vars, &config).is_err());
}

#[test]
fn logits_are_permutation_invariant() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    while checked < 10 {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let x = random_array(&mut rng, 7, 8, 1.5);
        let trace = forward(&x, &params).unwrap();
        if trace.min_score_gap() < 1e-6 {
            continue;
        }
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let px = Array::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let ptrace = forward(&px, &params).unwrap();
        for (a, b) in trace.logits.iter().zip(&ptrace.logits) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (kept, pkept) in trace.kept.iter().zip(&ptrace.kept) {
            let mut mapped: Vec<usize> = pkept.iter().map(|&k| perm[k]).collect();
            let mut orig = kept.clone();
            mapped.sort_unstable();
            orig.sort_unstable();
            assert_eq!(mapped, orig);
        }
        checked += 1;
    }
}

/// Cross-entropy of the toy model as a function of every parameter array.
fn toy_loss<'a>(
    config: &'a ModelConfig,
    x: &Array,
    label: usize,
) -> impl Fn(&mut Graph, &[Var]) -> crate::Result<Var> + 'a {
    let x = x.clone();
    move |g, vars| {
        let pv = ParamVars::from_vars(config, vars)?;
        let nodes = forward_batch(g, &[&x], &pv, config)?;
        g.softmax_xent(nodes[0].logits, label)
    }
}

#[test]
fn end_to_end_gradient_check() {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut points = 0;
    while points < 10 {
        let params = ModelParams::init(&config, rng.random()).unwrap();
        let x = random_array(&mut rng, 3, 8, 1.5);
        if forward(&x, &params).unwrap().min_score_gap() < 1e-3 {
            continue;
        }
        let label = points % 2;
        let report = gradcheck(toy_loss(&config, &x, label), &params.arrays(), DEFAULT_STEP).unwrap();
        assert!(report.max_rel_err <= 1e-4, "point {points}: {report:?}");
        points += 1;
    }
}
