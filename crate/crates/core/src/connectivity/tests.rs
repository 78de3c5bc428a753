use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::model::{ModelConfig, ModelParams};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn info(domain: &str, important: bool) -> ComponentInfo {
    ComponentInfo {
        domain: domain.into(),
        important,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        attn_dim: 4,
        pool_layers: 2,
        pool_keep: 0.8,
        fc_hidden: 3,
        classes: 2,
    }
}

#[test]
fn pearson_examples() {
    let x = Array::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 4.0], [-1.0, -2.0, -3.0]]).unwrap();
    let r = pearson_fnc(&x).unwrap();
    // Closed form: centered x = (−1, 0, 1), centered y = (−4/3, −1/3, 5/3).
    let want = 3.0 / (2.0f64.sqrt() * (42.0f64 / 9.0).sqrt());
    assert!((r.get(0, 1) - want).abs() < 1e-12);
    assert!((r.get(0, 1) - 0.98198).abs() < 1e-5);
    assert_eq!(r.get(0, 0), 1.0);
    assert!((r.get(0, 2) + 1.0).abs() < 1e-12);
    assert_eq!(r.get(1, 0), r.get(0, 1));
}

#[test]
fn pearson_rejects_constant_row() {
    let x = Array::from_rows(&[[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]).unwrap();
    let err = pearson_fnc(&x).unwrap_err().to_string();
    assert!(err.contains("component 1"), "{err}");
}

#[test]
fn pearson_affine_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let m = rng.random_range(2..7);
        let x = random(&mut rng, m, 30);
        let mut y = x.clone();
        for i in 0..m {
            let a = rng.random_range(0.1..10.0);
            let b = rng.random_range(-5.0..5.0);
            for v in y.row_mut(i) {
                *v = a * *v + b;
            }
        }
        let d = pearson_fnc(&x).unwrap().max_abs_diff(&pearson_fnc(&y).unwrap());
        assert!(d <= 1e-9, "{d}");
    }
}

#[test]
fn group_average_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random(&mut rng, 3, 3);
    assert_eq!(group_average(&[&m]).unwrap(), m);
    let mut neg = m.clone();
    neg.scale_in_place(-1.0);
    assert!(group_average(&[&m, &neg]).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(group_average(&[]).is_err());
    let other = Array::zeros(2, 3);
    assert!(group_average(&[&m, &other]).is_err());
}

#[test]
fn group_average_keeps_rows_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stochastic = |rng: &mut ChaCha8Rng| {
        let mut a = random(rng, 5, 5);
        for i in 0..5 {
            let row = a.row_mut(i);
            for v in row.iter_mut() {
                *v = v.abs() + 0.01;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        a
    };
    let (a, b) = (stochastic(&mut rng), stochastic(&mut rng));
    let g = group_average(&[&a, &b]).unwrap();
    for i in 0..5 {
        assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn block_stats_uniform_and_planted() {
    let domains = vec![info("A", true), info("A", true), info("B", true), info("noise", false), info("noise", false)];
    let uniform = Array::filled(5, 5, 0.2);
    let s = block_stats(&uniform, &domains).unwrap();
    assert_eq!(s.domains, vec!["A", "B", "noise"]);
    assert_eq!(s.blocks.len(), 9);
    for b in &s.blocks {
        if b.cells > 0 {
            assert!((b.mean - 0.2).abs() < 1e-15, "{b:?}");
        } else {
            assert!(b.mean.is_nan());
        }
    }
    // B→B has only its diagonal cell.
    assert_eq!(s.blocks[4].cells, 0);

    let mut planted = Array::zeros(5, 5);
    for i in 0..3 {
        for j in 0..3 {
            planted.set(i, j, 0.7);
        }
    }
    let s = block_stats(&planted, &domains).unwrap();
    assert!((s.important - 0.7).abs() < 1e-15);
    assert_eq!(s.noise, 0.0);
    assert_eq!(s.cross, 0.0);
}

#[test]
fn block_stats_requires_full_map() {
    let domains = vec![info("A", true); 3];
    assert!(block_stats(&Array::zeros(4, 4), &domains).is_err());
}

#[test]
fn block_stats_match_loop_oracle_on_ground_truth() {
    let spec = SyntheticSpec {
        subjects_per_class: 1,
        ..SyntheticSpec::default()
    };
    let syn = gen_synthetic(&spec).unwrap();
    let domains = syn.dataset.domains.clone().unwrap();
    let g = &syn.gtruth[0];
    let s = block_stats(g, &domains).unwrap();
    for b in &s.blocks {
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..20 {
            for j in 0..20 {
                if i != j && domains[i].domain == b.from && domains[j].domain == b.to {
                    sum += g.get(i, j);
                    n += 1;
                }
            }
        }
        assert_eq!(n, b.cells);
        if n > 0 {
            assert!((sum / n as f64 - b.mean).abs() < 1e-15);
        }
    }
    // Weighted block means reproduce the global off-diagonal mean.
    let total: f64 = s.blocks.iter().filter(|b| b.cells > 0).map(|b| b.mean * b.cells as f64).sum();
    let cells: usize = s.blocks.iter().map(|b| b.cells).sum();
    let mut direct = 0.0;
    for i in 0..20 {
        for j in 0..20 {
            if i != j {
                direct += g.get(i, j);
            }
        }
    }
    assert_eq!(cells, 380);
    assert!((total / cells as f64 - direct / 380.0).abs() < 1e-12);
}

#[test]
fn recovery_score_examples() {
    let mut g = Array::zeros(4, 4);
    g.set(0, 1, 0.3);
    g.set(2, 3, -0.5);
    g.set(1, 1, 0.9);
    let mut a = Array::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            a.set(i, j, 2.0 * g.get(i, j).abs());
        }
    }
    assert_eq!(graph_recovery_score(&a, &g).unwrap(), 1.0);
    assert_eq!(graph_recovery_score(&Array::filled(4, 4, 0.25), &g).unwrap(), 0.5);
    assert!(graph_recovery_score(&a, &Array::zeros(4, 4)).is_err());
}

#[test]
fn recovery_score_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let a = random(&mut rng, 4, 4);
        let mut g = Array::zeros(4, 4);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                if rng.random_bool(0.4) {
                    g.set(i, j, 1.0);
                    pos.push(a.get(i, j));
                } else {
                    neg.push(a.get(i, j));
                }
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        assert!((graph_recovery_score(&a, &g).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn attention_fnc_zero_query_is_uniform() {
    let mut params = ModelParams::init(&small_model(), 1).unwrap();
    params.wq = Array::zeros(params.wq.rows(), params.wq.cols());
    let ckpt = Checkpoint {
        params,
        components: Some(5),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 5, 6);
    let a = attention_fnc(&ckpt, &x, "s").unwrap();
    assert_eq!(a.kind, FncKind::Attention);
    assert!(a.matrix.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let one = random(&mut rng, 1, 6);
    let single = Checkpoint {
        components: None,
        ..ckpt.clone()
    };
    assert_eq!(attention_fnc(&single, &one, "s").unwrap().matrix, Array::scalar(1.0));

    assert!(attention_fnc(&ckpt, &random(&mut rng, 4, 6), "s").is_err());
}

#[test]
fn attention_fnc_relabels_with_components() {
    let ckpt = Checkpoint {
        params: ModelParams::init(&small_model(), 8).unwrap(),
        components: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, 5, 9);
    let perm = [3, 0, 4, 1, 2];
    let px = Array::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
    let a = attention_fnc(&ckpt, &x, "x").unwrap().matrix;
    let pa = attention_fnc(&ckpt, &px, "px").unwrap().matrix;
    for i in 0..5 {
        for j in 0..5 {
            assert!((pa.get(i, j) - a.get(perm[i], perm[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, 3, 3);
    let p = dir.path().join("fnc.csv");
    write_fnc_csv(&p, &a).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("0,1,2\n"));
    assert_eq!(read_fnc_csv(&p).unwrap(), a);

    let domains = vec![info("A", true), info("B", false), info("B", false)];
    let s = block_stats(&a, &domains).unwrap();
    let p = dir.path().join("blocks.csv");
    write_block_csv(&p, &s).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "from_domain,to_domain,mean_weight");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("A,A,NaN"));
}
