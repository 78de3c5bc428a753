use super::{Array, Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` over every coordinate.
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
}

/// Checks the gradient of a scalar function of several parameter arrays.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must
/// return a 1×1 node.
pub fn gradcheck<F>(f: F, params: &[Array], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "gradcheck objective",
                lhs: v.shape(),
                rhs: (1, 1),
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(Error::NonFinite("objective at θ".into()));
        }
        g.backward(out)?;
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect::<Vec<_>>()
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for p in 0..params.len() {
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[k] = orig;

            let fd = (up - down) / (2.0 * step);
            let ad = analytic[p].data()[k];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            if err > report.max_rel_err {
                report = GradCheck {
                    max_rel_err: err,
                    worst: (p, k),
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Array::row_vector(&[1.0, 2.0, 3.0]);
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum_all(sq)
        };
        let mut g = Graph::new();
        let x = g.leaf(theta.clone());
        let loss = f(&mut g, &[x]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        let report = gradcheck(f, &[theta], DEFAULT_STEP).unwrap();
        assert!(report.max_rel_err <= 1e-8, "{report:?}");
    }

    #[test]
    fn detects_broken_gradient_path() {
        // x ⊙ stopgrad(x): the tape sees half of the true derivative.
        let theta = Array::row_vector(&[1.0, 2.0, 3.0]);
        let report = gradcheck(
            |g, v| {
                let frozen = g.detach(v[0]);
                let sq = g.mul(v[0], frozen)?;
                g.sum_all(sq)
            },
            &[theta],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-2, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let theta = Array::row_vector(&[1.0]);
        let err = gradcheck(
            |g, v| {
                let big = g.scale(v[0], f64::INFINITY);
                g.sum_all(big)
            },
            &[theta],
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let theta = Array::row_vector(&[1.0]);
        assert!(gradcheck(|g, v| g.sum_all(v[0]), &[theta], 0.0).is_err());
    }
}
