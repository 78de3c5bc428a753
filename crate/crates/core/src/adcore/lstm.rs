//! Fused forward/backward for a single-direction LSTM whose output is the
//! sum of hidden states over time.
//!
//! Building the recurrence out of primitive tape ops costs ~17 nodes per
//! step; this keeps the per-step activations in flat buffers instead.
//! The buffers are large and short-lived, so they are recycled through a
//! small per-thread pool rather than returned to the allocator.

use std::cell::RefCell;

use super::array::{gemm_slice, Array, MatRef};
use super::activation::{sigmoid_in_place, tanh_in_place, tanh_into};
use super::graph::Var;
use crate::error::{Error, Result};

pub(crate) struct LstmCache {
    pub inputs: [Var; 4],
    reverse: bool,
    rows: usize,
    steps: usize,
    hidden: usize,
    /// Per step, `rows × 4h` activated gates `[i | f | g | o]`.
    gates: Vec<f64>,
    /// Per step, `rows × h` cell state after the step.
    cells: Vec<f64>,
    /// Per step, `rows × h` tanh of the cell state.
    tanh_cells: Vec<f64>,
    /// Per step, `rows × h` hidden state entering the step.
    h_in: Vec<f64>,
}

const POOL_SLOTS: usize = 16;

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

fn take_zeroed(len: usize) -> Vec<f64> {
    let reused = POOL.with(|p| {
        let mut pool = p.borrow_mut();
        let best = pool
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        best.map(|i| pool.swap_remove(i))
    });
    match reused {
        Some(mut v) => {
            v.clear();
            v.resize(len, 0.0);
            v
        }
        None => vec![0.0; len],
    }
}

fn give_back(v: Vec<f64>) {
    POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < POOL_SLOTS {
            pool.push(v);
        }
    });
}

impl Drop for LstmCache {
    fn drop(&mut self) {
        for buf in [
            &mut self.gates,
            &mut self.cells,
            &mut self.tanh_cells,
            &mut self.h_in,
        ] {
            give_back(std::mem::take(buf));
        }
    }
}

pub(crate) struct LstmGrads {
    pub x: Array,
    pub w: Array,
    pub u: Array,
    pub b: Array,
}

fn time_index(step: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - step
    } else {
        step
    }
}

pub(crate) fn forward(
    x: &Array,
    w: &Array,
    u: &Array,
    b: &Array,
    reverse: bool,
    inputs: [Var; 4],
) -> Result<(Array, LstmCache)> {
    let hidden = u.rows();
    let width = 4 * hidden;
    if hidden == 0 || u.cols() != width {
        return Err(Error::Dimension {
            op: "lstm_sum (recurrent weights must be h×4h)",
            lhs: u.shape(),
            rhs: (hidden, width),
        });
    }
    if w.shape() != (1, width) {
        return Err(Error::Dimension {
            op: "lstm_sum (input weights)",
            lhs: w.shape(),
            rhs: (1, width),
        });
    }
    if b.shape() != (1, width) {
        return Err(Error::Dimension {
            op: "lstm_sum (bias)",
            lhs: b.shape(),
            rhs: (1, width),
        });
    }
    let (rows, steps) = x.shape();
    if steps == 0 {
        return Err(Error::Input("lstm_sum over an empty sequence".into()));
    }

    let gate_len = rows * width;
    let state_len = rows * hidden;
    let mut gates = take_zeroed(steps * gate_len);
    let mut cells = take_zeroed(steps * state_len);
    let mut tanh_cells = take_zeroed(steps * state_len);
    let mut h_in = take_zeroed(steps * state_len);
    let mut out = Array::zeros(rows, hidden);

    for s in 0..steps {
        let t = time_index(s, steps, reverse);
        let pre = &mut gates[s * gate_len..(s + 1) * gate_len];
        for r in 0..rows {
            let xv = x.get(r, t);
            for ((p, wj), bj) in pre[r * width..(r + 1) * width]
                .iter_mut()
                .zip(w.data())
                .zip(b.data())
            {
                *p = xv * wj + bj;
            }
        }
        if s > 0 {
            let h_prev = &h_in[s * state_len..(s + 1) * state_len];
            gemm_slice(
                1.0,
                MatRef::from_slice(h_prev, rows, hidden),
                MatRef::normal(u),
                1.0,
                pre,
                rows,
                width,
            );
        }
        for gr in pre.chunks_exact_mut(width) {
            let (sig, rest) = gr.split_at_mut(2 * hidden);
            let (cand, out_gate) = rest.split_at_mut(hidden);
            sigmoid_in_place(sig);
            tanh_in_place(cand);
            sigmoid_in_place(out_gate);
        }

        let (done, todo) = cells.split_at_mut(s * state_len);
        let c_now = &mut todo[..state_len];
        for (r, (gr, c_row)) in pre
            .chunks_exact(width)
            .zip(c_now.chunks_exact_mut(hidden))
            .enumerate()
        {
            let (i, rest) = gr.split_at(hidden);
            let (f, rest) = rest.split_at(hidden);
            let cand = &rest[..hidden];
            if s > 0 {
                let cp = &done[(s - 1) * state_len + r * hidden..][..hidden];
                for j in 0..hidden {
                    c_row[j] = f[j] * cp[j] + i[j] * cand[j];
                }
            } else {
                for j in 0..hidden {
                    c_row[j] = i[j] * cand[j];
                }
            }
        }
        let tc_now = &mut tanh_cells[s * state_len..(s + 1) * state_len];
        tanh_into(c_now, tc_now);

        let mut h_next = h_in[(s + 1) * state_len..].get_mut(..state_len);
        for (r, (gr, tc_row)) in pre.chunks_exact(width).zip(tc_now.chunks_exact(hidden)).enumerate() {
            let o = &gr[3 * hidden..];
            let out_row = &mut out.data_mut()[r * hidden..(r + 1) * hidden];
            for j in 0..hidden {
                out_row[j] += o[j] * tc_row[j];
            }
            if let Some(next) = h_next.as_deref_mut() {
                let next_row = &mut next[r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    next_row[j] = o[j] * tc_row[j];
                }
            }
        }
    }

    let cache = LstmCache {
        inputs,
        reverse,
        rows,
        steps,
        hidden,
        gates,
        cells,
        tanh_cells,
        h_in,
    };
    Ok((out, cache))
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn backward(cache: &LstmCache, g: &Array, x: &Array, w: &Array, u: &Array) -> LstmGrads {
    let LstmCache {
        rows,
        steps,
        hidden,
        reverse,
        ..
    } = *cache;
    let width = 4 * hidden;
    let gate_len = rows * width;
    let state_len = rows * hidden;

    let mut dpre = take_zeroed(gate_len);
    let mut gu = Array::zeros(hidden, width);
    let mut dh_next = vec![0.0; state_len];
    let mut dc_next = vec![0.0; state_len];
    let mut gx = Array::zeros(rows, steps);
    let mut gw = Array::zeros(1, width);
    let mut gb = Array::zeros(1, width);

    for s in (0..steps).rev() {
        let t = time_index(s, steps, reverse);
        let act = &cache.gates[s * gate_len..(s + 1) * gate_len];
        let tc = &cache.tanh_cells[s * state_len..(s + 1) * state_len];
        let c_prev = (s > 0).then(|| &cache.cells[(s - 1) * state_len..s * state_len]);

        for r in 0..rows {
            let a = &act[r * width..(r + 1) * width];
            let (ai, rest) = a.split_at(hidden);
            let (af, rest) = rest.split_at(hidden);
            let (ag, ao) = rest.split_at(hidden);
            let d = &mut dpre[r * width..(r + 1) * width];
            let (di, rest) = d.split_at_mut(hidden);
            let (df, rest) = rest.split_at_mut(hidden);
            let (dg, d_o) = rest.split_at_mut(hidden);
            let k0 = r * hidden;
            let g_row = &g.data()[k0..k0 + hidden];
            let dh_row = &dh_next[k0..k0 + hidden];
            let dc_row = &mut dc_next[k0..k0 + hidden];
            let tc_row = &tc[k0..k0 + hidden];
            let zeros = [0.0; 0];
            let cp_row: &[f64] = match c_prev {
                Some(c) => &c[k0..k0 + hidden],
                None => &zeros,
            };
            let ao = &ao[..hidden];
            let d_o = &mut d_o[..hidden];
            for j in 0..hidden {
                let (i, f, gg, o) = (ai[j], af[j], ag[j], ao[j]);
                let dh = g_row[j] + dh_row[j];
                let tcj = tc_row[j];
                let dc = dh * o * (1.0 - tcj * tcj) + dc_row[j];
                let cp = if cp_row.is_empty() { 0.0 } else { cp_row[j] };
                di[j] = dc * gg * i * (1.0 - i);
                df[j] = dc * cp * f * (1.0 - f);
                dg[j] = dc * i * (1.0 - gg * gg);
                d_o[j] = dh * tcj * o * (1.0 - o);
                dc_row[j] = dc * f;
            }
            let xv = x.get(r, t);
            for ((gwj, gbj), dj) in gw.data_mut().iter_mut().zip(gb.data_mut().iter_mut()).zip(&*d) {
                *gwj += xv * dj;
                *gbj += dj;
            }
            gx.set(r, t, dot(d, w.data()));
        }

        // Step 0 enters with a zero hidden state and receives no recurrence.
        if s > 0 {
            gemm_slice(
                1.0,
                MatRef::from_slice(&dpre, rows, width),
                MatRef::transposed(u),
                0.0,
                &mut dh_next,
                rows,
                hidden,
            );
            let h_prev = &cache.h_in[s * state_len..(s + 1) * state_len];
            gemm_slice(
                1.0,
                MatRef::from_slice_t(h_prev, rows, hidden),
                MatRef::from_slice(&dpre, rows, width),
                1.0,
                gu.data_mut(),
                hidden,
                width,
            );
        }
    }
    give_back(dpre);

    LstmGrads {
        x: gx,
        w: gw,
        u: gu,
        b: gb,
    }
}
