//! Naive scan used as a test oracle. Deliberately shares no code with the
//! production recurrence: it materializes every state `h_t` and evaluates
//! the readout afterwards.

// Index loops mirror the recurrence's subscripts on purpose.
#![allow(clippy::needless_range_loop)]

use super::{Direction, ScanParams};
use crate::numerics::Tensor;

/// Returns `(y, h_final)` exactly as [`super::structural_scan`] should.
pub fn oracle_scan(x_hat: &Tensor, h0: &Tensor, params: &ScanParams, dir: Direction) -> (Tensor, Tensor) {
    let s = params.a_bar.shape();
    let (n, m, e) = (s[0], s[1], s[2]);
    let at = |t: &Tensor, i: usize, j: usize, k: usize| t.data()[(i * m + j) * e + k];

    let order: Vec<usize> = match dir {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    // states[s][j][k] = state after processing `s` tokens.
    let mut states = vec![vec![vec![0.0; e]; m]; n + 1];
    for j in 0..m {
        for k in 0..e {
            states[0][j][k] = h0.data()[j * e + k];
        }
    }
    for (step, &t) in order.iter().enumerate() {
        for j in 0..m {
            for k in 0..e {
                let prev = states[step][j][k];
                states[step + 1][j][k] = at(&params.a_bar, t, j, k) * prev + at(&params.b_bar, t, j, k) * x_hat.data()[t * e + k];
            }
        }
    }
    let mut y = Tensor::zeros(&[n, e]);
    for (step, &t) in order.iter().enumerate() {
        for k in 0..e {
            let mut acc = 0.0;
            for j in 0..m {
                acc += params.c.data()[t * m + j] * states[step + 1][j][k];
            }
            y.data_mut()[t * e + k] = acc;
        }
    }
    let h_final = Tensor::new(&[m, e], states[n].iter().flatten().copied().collect()).expect("m x e");
    (y, h_final)
}
