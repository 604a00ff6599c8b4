//! Dense solvers for the small symmetric / square systems the oracles build.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{numeric, Result};

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
/// Fails with a singular-matrix error when a pivot collapses.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let p = a.nrows();
    debug_assert_eq!(a.ncols(), p);
    debug_assert_eq!(b.len(), p);
    let mut l = a.to_owned();
    let scale = (0..p).map(|i| l[[i, i]].abs()).fold(0.0f64, f64::max).max(1e-300);
    // In-place lower-triangular Cholesky.
    for j in 0..p {
        for k in 0..j {
            let ljk = l[[j, k]];
            for i in j..p {
                l[[i, j]] -= l[[i, k]] * ljk;
            }
        }
        let d = l[[j, j]];
        if !(d > scale * 1e-13) {
            return Err(numeric(format!("singular matrix in SPD solve (pivot {j})")));
        }
        let root = d.sqrt();
        for i in j..p {
            l[[i, j]] /= root;
        }
    }
    // Forward then backward substitution.
    let mut x = b.to_owned();
    for i in 0..p {
        for k in 0..i {
            x[i] -= l[[i, k]] * x[k];
        }
        x[i] /= l[[i, i]];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            x[i] -= l[[k, i]] * x[k];
        }
        x[i] /= l[[i, i]];
    }
    Ok(x)
}

/// Partial-pivot LU factorization of a square matrix, with plain and
/// transposed solves (the quantile simplex needs both from one factorization).
pub struct Lu {
    lu: Array2<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn factor(a: ArrayView2<f64>) -> Result<Self> {
        let p = a.nrows();
        debug_assert_eq!(a.ncols(), p);
        let mut lu = a.to_owned();
        let mut piv: Vec<usize> = (0..p).collect();
        let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for k in 0..p {
            let (mut best, mut best_abs) = (k, lu[[k, k]].abs());
            for i in k + 1..p {
                let v = lu[[i, k]].abs();
                if v > best_abs {
                    best = i;
                    best_abs = v;
                }
            }
            if best_abs <= scale * 1e-13 {
                return Err(numeric(format!("singular matrix in LU solve (pivot {k})")));
            }
            if best != k {
                for j in 0..p {
                    lu.swap([k, j], [best, j]);
                }
                piv.swap(k, best);
            }
            let pivot = lu[[k, k]];
            for i in k + 1..p {
                let m = lu[[i, k]] / pivot;
                lu[[i, k]] = m;
                for j in k + 1..p {
                    lu[[i, j]] -= m * lu[[k, j]];
                }
            }
        }
        Ok(Self { lu, piv })
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let p = self.piv.len();
        let mut x = Array1::zeros(p);
        for i in 0..p {
            x[i] = b[self.piv[i]];
        }
        for i in 0..p {
            for k in 0..i {
                let m = self.lu[[i, k]];
                x[i] -= m * x[k];
            }
        }
        for i in (0..p).rev() {
            for k in i + 1..p {
                let m = self.lu[[i, k]];
                x[i] -= m * x[k];
            }
            x[i] /= self.lu[[i, i]];
        }
        x
    }

    /// Solve `A' x = b` using the same factorization
    /// (`A = P' L U` gives `A' x = b  <=>  U' L' P x = b`).
    pub fn solve_transpose(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let p = self.piv.len();
        let mut x = b.to_owned();
        // U' y = b (forward, U' is lower-triangular with U's diagonal).
        for i in 0..p {
            for k in 0..i {
                let m = self.lu[[k, i]];
                x[i] -= m * x[k];
            }
            x[i] /= self.lu[[i, i]];
        }
        // L' z = y (backward, unit diagonal).
        for i in (0..p).rev() {
            for k in i + 1..p {
                let m = self.lu[[k, i]];
                x[i] -= m * x[k];
            }
        }
        // x = P' z: undo row permutation.
        let mut out = Array1::zeros(p);
        for i in 0..p {
            out[self.piv[i]] = x[i];
        }
        out
    }
}
