//! Shared oracles for unit tests. Test-only: nothing here is reachable from
//! the library surface, so the checks stay independent of the code they
//! verify.

use crate::matrix::DenseMatrix;

pub fn sum_matrix(m: &DenseMatrix) -> f64 {
    m.data().iter().sum()
}

/// Central finite difference of `loss` w.r.t. entry `p` of `m`, restoring
/// the entry afterwards.
pub fn fd_loss_on_slice(
    m: &mut DenseMatrix,
    p: usize,
    loss: impl Fn(&DenseMatrix) -> f64,
    h: f64,
) -> f64 {
    let orig = m.data()[p];
    m.data_mut()[p] = orig + h;
    let plus = loss(m);
    m.data_mut()[p] = orig - h;
    let minus = loss(m);
    m.data_mut()[p] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
