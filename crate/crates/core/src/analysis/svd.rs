//! One-sided Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SWEEPS: usize = 100;
const TOL: f64 = 1e-15;

/// Thin decomposition `A = U · diag(σ) · Vᵀ` with `σ` non-increasing.
/// For `A` of shape `m×n` and `r = min(m, n)`, `U` is `m×r` and `V` is `n×r`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub sigma: Vec<f64>,
    pub v: Tensor<f64>,
}

/// Orthogonalizes the rows of `w` (`p` rows of length `q`, `p ≤ q`) by
/// plane rotations, accumulating the rotations into `acc` (`p×p`, rows).
fn jacobi_rows(w: &mut [Vec<f64>], acc: &mut [Vec<f64>]) -> Result<()> {
    let p = w.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let (a, b, g) = {
                    let (wi, wj) = (&w[i], &w[j]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wi.iter().zip(wj) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if g == 0.0 || g.abs() <= TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(j);
                for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
                let (lo, hi) = acc.split_at_mut(j);
                for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Singular value decomposition of a rank-2 tensor.
pub fn svd(a: &Tensor<f64>) -> Result<Svd> {
    let [m, n] = a.dims2()?;
    if !a.all_finite() {
        return Err(Error::Numeric(
            "SVD of a matrix with non-finite entries".into(),
        ));
    }
    // Work on whichever side is shorter: rows of `w` are the vectors being
    // orthogonalized.
    let tall = m >= n;
    let (p, q) = if tall { (n, m) } else { (m, n) };
    let d = a.data();
    let mut w: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..q)
                .map(|k| if tall { d[k * n + i] } else { d[i * n + k] })
                .collect()
        })
        .collect();
    let mut acc: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|k| f64::from(u8::from(i == k))).collect())
        .collect();
    jacobi_rows(&mut w, &mut acc)?;

    let norms: Vec<f64> = w
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    // Rows of `w` are σ_i·(left or right) singular vectors; rows of `acc`
    // are the matching vectors on the other side.
    let mut long = vec![0.0; q * p];
    let mut short = vec![0.0; p * p];
    let mut sigma = Vec::with_capacity(p);
    for (col, &i) in order.iter().enumerate() {
        let s = norms[i];
        sigma.push(s);
        for k in 0..q {
            long[k * p + col] = if s > 0.0 { w[i][k] / s } else { 0.0 };
        }
        for k in 0..p {
            short[k * p + col] = acc[i][k];
        }
    }
    let long = Tensor::new(vec![q, p], long)?;
    let short = Tensor::new(vec![p, p], short)?;
    let (u, v) = if tall { (long, short) } else { (short, long) };
    Ok(Svd { u, sigma, v })
}

/// Singular values only, non-increasing.
pub fn singular_values(a: &Tensor<f64>) -> Result<Vec<f64>> {
    Ok(svd(a)?.sigma)
}
