use super::{Matrix, Scalar};
use crate::error::{shape_err, Error, Result};

fn check_symmetric<T: Scalar>(m: &Matrix<T>, op: &'static str) -> Result<()> {
    if !m.is_square() {
        return shape_err(op, format!("expected square matrix, got {:?}", m.shape()));
    }
    let n = m.rows();
    let tol = 1e-6 * m.frobenius().f64().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs().f64() > tol {
                return shape_err(op, format!("asymmetric at ({i},{j})"));
            }
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `m = L·Lᵀ`.
pub fn cholesky<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    check_symmetric(m, "cholesky")?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: diag.f64(),
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `ln det m` for symmetric positive-definite `m`, as twice the sum of log pivots.
pub fn logdet_posdef<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    let l = cholesky(m)?;
    let two = T::of(2.0);
    Ok((0..l.rows()).map(|i| two * l[(i, i)].ln()).sum())
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn inverse_posdef<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let l = cholesky(m)?;
    Ok(inverse_from_cholesky(&l))
}

pub(crate) fn inverse_from_cholesky<T: Scalar>(l: &Matrix<T>) -> Matrix<T> {
    let n = l.rows();
    // L⁻¹ by forward substitution, then (L⁻¹)ᵀL⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { T::one() } else { T::zero() };
            for k in c..i {
                s -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = s / l[(i, i)];
        }
    }
    let mut inv = linv.t_matmul(&linv).expect("square");
    // symmetrize away rounding
    for i in 0..n {
        for j in 0..i {
            let v = (inv[(i, j)] + inv[(j, i)]) * T::of(0.5);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// Orthonormal basis for the column space of a full-column-rank `m×n`
/// matrix (`m ≥ n`), via Householder QR with the sign convention
/// `diag(R) > 0`.
pub fn orthonormal_columns<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (m, n) = a.shape();
    if n > m {
        return shape_err("orthonormal_columns", format!("{m}x{n} has more columns than rows"));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm_sq: T = v.iter().map(|&x| x * x).sum();
        if vnorm_sq > T::zero() {
            for j in k..n {
                let dot: T = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
                let f = T::of(2.0) * dot / vnorm_sq;
                for i in k..m {
                    let upd = f * v[i - k];
                    r[(i, j)] -= upd;
                }
            }
        }
        signs.push(if r[(k, k)] < T::zero() { -T::one() } else { T::one() });
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { T::one() } else { T::zero() });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        let vnorm_sq: T = v.iter().map(|&x| x * x).sum();
        if vnorm_sq == T::zero() {
            continue;
        }
        for j in 0..n {
            let dot: T = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            let f = T::of(2.0) * dot / vnorm_sq;
            for i in k..m {
                let upd = f * v[i - k];
                q[(i, j)] -= upd;
            }
        }
    }
    for (j, s) in signs.into_iter().enumerate() {
        for i in 0..m {
            q[(i, j)] *= s;
        }
    }
    Ok(q)
}

/// Largest singular value by power iteration on `mᵀm`.
pub fn sigma_max<T: Scalar>(m: &Matrix<T>) -> T {
    let n = m.cols();
    if n == 0 || m.rows() == 0 {
        return T::zero();
    }
    let gram = m.t_matmul(m).expect("gram");
    let mut v = Matrix::from_fn(n, 1, |i, _| T::one() + T::of(0.01 * i as f64));
    let mut lambda = T::zero();
    for _ in 0..20_000 {
        let w = gram.matmul(&v).expect("square");
        let norm = w.frobenius();
        if norm == T::zero() {
            return T::zero();
        }
        let next = norm / v.frobenius();
        v = w.scale(norm.recip());
        if (next - lambda).abs() <= T::epsilon() * T::of(4.0) * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}
