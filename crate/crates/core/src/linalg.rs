//! Small dense helpers and the tridiagonal solver used by the implicit step.

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `out = M v` for row-major d×d `M`.
pub fn mat_vec(m: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for a in 0..d {
        out[a] = (0..d).map(|b| m[a * d + b] * v[b]).sum();
    }
}

/// `out = r M` for a row vector `r` and row-major d×d `M`.
pub fn row_times_mat(r: &[f64], m: &[f64], d: usize, out: &mut [f64]) {
    for b in 0..d {
        out[b] = (0..d).map(|a| r[a] * m[a * d + b]).sum();
    }
}

/// Largest singular value, by power iteration on `MᵀM`.
pub fn operator_norm(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0].abs();
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut mv = vec![0.0; d];
    let mut mtmv = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        mat_vec(m, &v, d, &mut mv);
        for b in 0..d {
            mtmv[b] = (0..d).map(|a| m[a * d + b] * mv[a]).sum();
        }
        let n = norm(&mtmv);
        if n == 0.0 {
            return 0.0;
        }
        let next = n;
        v.iter_mut().zip(&mtmv).for_each(|(vi, w)| *vi = w / n);
        if (next - lambda).abs() <= 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

pub fn determinant(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            // Gaussian elimination with partial pivoting
            let mut a = m.to_vec();
            let mut det = 1.0;
            for c in 0..d {
                let p = (c..d)
                    .max_by(|&i, &j| a[i * d + c].abs().total_cmp(&a[j * d + c].abs()))
                    .unwrap();
                if a[p * d + c] == 0.0 {
                    return 0.0;
                }
                if p != c {
                    for k in 0..d {
                        a.swap(p * d + k, c * d + k);
                    }
                    det = -det;
                }
                det *= a[c * d + c];
                for r in (c + 1)..d {
                    let f = a[r * d + c] / a[c * d + c];
                    for k in c..d {
                        a[r * d + k] -= f * a[c * d + k];
                    }
                }
            }
            det
        }
    }
}

/// Solves `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]` in place
/// (Thomas algorithm). `lower[0]` and `upper[n-1]` are ignored. Returns the
/// index of the first vanishing pivot on failure.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), usize> {
    let n = diag.len();
    if n == 0 {
        return Ok(());
    }
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(0);
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if beta == 0.0 || !beta.is_finite() {
            return Err(i);
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= scratch[i + 1] * next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tridiagonal_matches_dense_product() {
        let n = 7;
        let lower: Vec<f64> = (0..n).map(|i| -0.3 - 0.01 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 2.0 + 0.1 * i as f64).collect();
        let upper: Vec<f64> = (0..n).map(|i| -0.5 + 0.02 * i as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = diag[i] * x[i];
            if i > 0 {
                rhs[i] += lower[i] * x[i - 1];
            }
            if i + 1 < n {
                rhs[i] += upper[i] * x[i + 1];
            }
        }
        let mut scratch = vec![0.0; n];
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch).unwrap();
        for i in 0..n {
            assert_relative_eq!(rhs[i], x[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let mut rhs = vec![1.0, 1.0];
        let mut s = vec![0.0; 2];
        assert_eq!(solve_tridiagonal(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &mut rhs, &mut s), Err(0));
    }

    #[test]
    fn operator_norm_of_diagonal() {
        assert_relative_eq!(operator_norm(&[3.0, 0.0, 0.0, -4.0], 2), 4.0, epsilon = 1e-12);
        assert_relative_eq!(determinant(&[2.0, 1.0, 0.0, 0.0, 3.0, 0.0, 1.0, 0.0, 1.0], 3), 6.0, epsilon = 1e-12);
    }
}
