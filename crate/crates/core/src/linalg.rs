//! Small dense linear-algebra helpers. Every system solved in this crate is
//! tiny (rarely more than ~15 unknowns), so direct factorizations are enough.

use ndarray::{Array1, Array2};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
/// Returns `Err(j)` with the first pivot column that is not positive.
pub(crate) fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>, usize> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        // pivot tolerance relative to the diagonal scale
        let scale = a[[j, j]].abs().max(1.0);
        if d <= scale * 1e-12 {
            return Err(j);
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solve `a x = b` for symmetric positive-definite `a` via Cholesky.
pub(crate) fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, usize> {
    let l = cholesky_lower(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Solve with a precomputed lower Cholesky factor.
pub(crate) fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = y[k];
            y[i] -= l[[i, k]] * t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = y[k];
            y[i] -= l[[k, i]] * t;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub(crate) fn inverse_spd(a: &Array2<f64>) -> Result<Array2<f64>, usize> {
    let l = cholesky_lower(a)?;
    let n = a.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        inv.column_mut(j).assign(&col);
    }
    Ok(inv)
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns.
pub(crate) fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (eig, v)
}

/// Empirical quantile with linear interpolation (R type 7) on unsorted data.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&xs, q)
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = array![1.0, 2.0, 3.0];
        let x = solve_spd(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        // third column linearly dependent on the first
        let a = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        assert_eq!(cholesky_lower(&a), Err(2));
    }

    #[test]
    fn jacobi_recovers_spectrum() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (mut eig, v) = sym_eigen(&a);
        eig.as_slice_mut().unwrap().sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_relative_eq!(eig[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(eig[1], 3.0, epsilon = 1e-10);
        // columns orthonormal
        let g = v.t().dot(&v);
        assert_relative_eq!(g[[0, 0]], 1.0, epsilon = 1e-10);
        assert_relative_eq!(g[[0, 1]], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn quantile_matches_hand_values() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile(&xs, 0.5), 2.5);
        assert_relative_eq!(quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile(&xs, 1.0), 4.0);
    }
}
