//! Dense reference routes for validating the matrix-free paths.
//!
//! These materialize small matrices exactly and solve them directly, so the
//! iterative solver can be checked against an independent computation. They
//! are capped to desk-scale problems on purpose.

use crate::error::{Error, Result};
use crate::grid::{BilateralGrid, Bistochastization};
use crate::solver::BilateralSystem;

/// Default pixel cap for [`dense_what`].
pub const DENSE_CAP: usize = 4096;

/// Dense B̄ as an nverts x nverts row-major matrix.
pub fn dense_blur(grid: &BilateralGrid) -> Vec<f64> {
    let nv = grid.nverts();
    let mut b = vec![0.0; nv * nv];
    let diag = grid.blur_diag();
    for v in 0..nv {
        b[v * nv + v] = diag;
        for d in 0..grid.dims() {
            for side in [false, true] {
                if let Some(u) = grid.neighbor(v, d, side) {
                    b[v * nv + u] += 1.0;
                }
            }
        }
    }
    b
}

/// Materializes Ŵ = Sᵀ D_m⁻¹ D_n B̄ D_n D_m⁻¹ S as an npixels x npixels
/// row-major matrix, with the default pixel cap.
pub fn dense_what(grid: &BilateralGrid, bistoch: &Bistochastization) -> Result<Vec<f64>> {
    dense_what_capped(grid, bistoch, DENSE_CAP)
}

/// [`dense_what`] with an explicit cap.
pub fn dense_what_capped(
    grid: &BilateralGrid,
    bistoch: &Bistochastization,
    cap: usize,
) -> Result<Vec<f64>> {
    let np = grid.npixels();
    if np > cap {
        return Err(Error::DenseCapExceeded { npixels: np, cap });
    }
    let nv = grid.nverts();
    let m = grid.counts_f64();
    let n = &bistoch.n;
    // vertex-level core: (n/m)_i * B̄_ij * (n/m)_j
    let bbar = dense_blur(grid);
    let mut core = vec![0.0; nv * nv];
    for i in 0..nv {
        let fi = n[i] / m[i];
        for j in 0..nv {
            core[i * nv + j] = fi * bbar[i * nv + j] * (n[j] / m[j]);
        }
    }
    let p2v = grid.pixel_to_vertex();
    let mut what = vec![0.0; np * np];
    for pi in 0..np {
        let vi = p2v[pi] as usize;
        for pj in 0..np {
            what[pi * np + pj] = core[vi * nv + p2v[pj] as usize];
        }
    }
    Ok(what)
}

/// Dense A = λ(D_m − D_n B̄ D_n) + diag(S·c) as nverts x nverts row-major.
pub fn dense_system(sys: &BilateralSystem) -> Vec<f64> {
    let grid = sys.grid();
    let nv = grid.nverts();
    let m = grid.counts_f64();
    let n = sys.bistoch_n();
    let bbar = dense_blur(grid);
    let mut a = vec![0.0; nv * nv];
    for i in 0..nv {
        for j in 0..nv {
            let mut v = -sys.lambda * n[i] * bbar[i * nv + j] * n[j];
            if i == j {
                v += sys.lambda * m[i] + sys.sc[i];
            }
            a[i * nv + j] = v;
        }
    }
    a
}

/// Solves a dense n x n system by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "dense solve",
            expected: n * n,
            got: a.len(),
        });
    }
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return Err(Error::NumericalFailure {
                what: "dense solve (singular matrix)",
                iteration: col,
            });
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for k in col + 1..n {
            v -= m[col * n + k] * x[k];
        }
        x[col] = v / m[col * n + col];
    }
    Ok(x)
}

/// Dense mat-vec helper for oracle code.
pub fn matvec(a: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] = row.iter().zip(v.iter()).map(|(&x, &y)| x * y).sum();
    }
    out
}
