//! Brute-force references used as ground truth by the tests.
//!
//! Nothing here shares code with the layer implementations: the LASSO
//! solver works one coordinate at a time from the closed-form non-negative
//! soft-threshold, and the gradient checker only evaluates the function.

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One non-negative LASSO problem `min_{a ≥ 0} ½‖z − D a‖² + λ‖a‖₁`.
#[derive(Clone, Debug)]
pub struct LassoInstance {
    pub dictionary: Matrix<f64>,
    pub target: Vec<f64>,
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

#[derive(Clone, Debug)]
pub struct LassoSolution {
    pub code: Vec<f64>,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest coordinate change in the final sweep.
    pub final_gap: f64,
}

/// `½‖Z − D A‖²_F + λ‖A‖₁`
pub fn lasso_objective(dictionary: &Matrix<f64>, target: &Matrix<f64>, code: &Matrix<f64>, lambda: f64) -> Result<f64> {
    let resid = target.sub(&dictionary.matmul(code)?)?;
    Ok(0.5 * resid.frobenius_sq() + lambda * code.abs_sum())
}

fn vector_objective(d: &Matrix<f64>, z: &[f64], a: &[f64], lambda: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..d.rows() {
        let mut r = z[i];
        for (j, &aj) in a.iter().enumerate() {
            r -= d[(i, j)] * aj;
        }
        sq += r * r;
    }
    0.5 * sq + lambda * a.iter().map(|x| x.abs()).sum::<f64>()
}

/// Cyclic coordinate descent for the non-negative LASSO.
///
/// Each coordinate update is exact:
/// `a_j ← max(0, (d_jᵀr + a_j‖d_j‖² − λ) / ‖d_j‖²)` with the residual
/// `r = z − D a` kept current. Stops once a full sweep moves no coordinate
/// by more than the tolerance.
pub fn nn_lasso_cd(instance: &LassoInstance) -> Result<LassoSolution> {
    let d = &instance.dictionary;
    let (rows, atoms) = d.shape();
    if instance.target.len() != rows {
        return Err(Error::Shape {
            op: "nn_lasso_cd",
            detail: format!("target of length {} for {rows} rows", instance.target.len()),
        });
    }
    if !(instance.lambda >= 0.0) {
        return Err(Error::Parameter {
            name: "lambda",
            detail: format!("{} < 0", instance.lambda),
        });
    }
    if !(instance.tolerance > 0.0) {
        return Err(Error::Parameter {
            name: "tolerance",
            detail: format!("{} <= 0", instance.tolerance),
        });
    }
    let col_sq: Vec<f64> = (0..atoms)
        .map(|j| (0..rows).map(|i| d[(i, j)] * d[(i, j)]).sum())
        .collect();
    let mut a = vec![0.0; atoms];
    let mut resid = instance.target.clone();
    let mut objective = vector_objective(d, &instance.target, &a, instance.lambda);
    let mut gap = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < instance.max_iters {
        sweeps += 1;
        gap = 0.0;
        for j in 0..atoms {
            if col_sq[j] == 0.0 {
                continue;
            }
            let corr: f64 = (0..rows).map(|i| d[(i, j)] * resid[i]).sum();
            let next = ((corr + a[j] * col_sq[j] - instance.lambda) / col_sq[j]).max(0.0);
            let delta = next - a[j];
            if delta != 0.0 {
                for (i, r) in resid.iter_mut().enumerate() {
                    *r -= d[(i, j)] * delta;
                }
                a[j] = next;
            }
            gap = gap.max(delta.abs());
        }
        let next_obj = vector_objective(d, &instance.target, &a, instance.lambda);
        assert!(
            next_obj <= objective + 1e-12 * objective.abs().max(1.0),
            "coordinate descent objective increased: {objective} -> {next_obj}"
        );
        objective = next_obj;
        if gap < instance.tolerance {
            return Ok(LassoSolution {
                code: a,
                objective,
                sweeps,
                converged: true,
                final_gap: gap,
            });
        }
    }
    warn!(
        "nn_lasso_cd: {} sweeps without reaching tolerance {} (final gap {gap:e})",
        instance.max_iters, instance.tolerance
    );
    Ok(LassoSolution {
        code: a,
        objective,
        sweeps,
        converged: false,
        final_gap: gap,
    })
}

/// Solves each column of `targets` independently; returns the code matrix
/// and the summed objective.
pub fn nn_lasso_cd_columns(
    dictionary: &Matrix<f64>,
    targets: &Matrix<f64>,
    lambda: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<(Matrix<f64>, f64)> {
    let mut code = Matrix::zeros(dictionary.cols(), targets.cols());
    let mut total = 0.0;
    for t in 0..targets.cols() {
        let sol = nn_lasso_cd(&LassoInstance {
            dictionary: dictionary.clone(),
            target: targets.column_vec(t),
            lambda,
            tolerance,
            max_iters,
        })?;
        for (j, v) in sol.code.iter().enumerate() {
            code[(j, t)] = *v;
        }
        total += sol.objective;
    }
    Ok((code, total))
}

/// Central finite differences `(f(X + h e_ij) − f(X − h e_ij)) / 2h`.
pub fn fd_grad(f: impl Fn(&Matrix<f64>) -> f64, x: &Matrix<f64>, step: f64) -> Matrix<f64> {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, and 0 when both vanish.
pub fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = a.sub(b).map(|m| m.frobenius()).unwrap_or(f64::INFINITY);
    let scale = a.frobenius().max(b.frobenius());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn instance(d: Matrix<f64>, z: Vec<f64>, lambda: f64) -> LassoInstance {
        LassoInstance {
            dictionary: d,
            target: z,
            lambda,
            tolerance: 1e-12,
            max_iters: 100_000,
        }
    }

    #[test]
    fn zero_target_gives_zero_code() {
        let d = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 2.0]]);
        let sol = nn_lasso_cd(&instance(d, vec![0.0, 0.0], 0.3)).unwrap();
        assert_eq!(sol.code, vec![0.0, 0.0]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn scalar_soft_threshold() {
        let sol = nn_lasso_cd(&instance(Matrix::scalar(1.0), vec![3.0], 2.0)).unwrap();
        assert_eq!(sol.code, vec![1.0]);
        assert_eq!(sol.objective, 4.0);
    }

    #[test]
    fn huge_lambda_zeroes_code() {
        let mut rng = Rng::new(11);
        let d: Matrix<f64> = rng.normal_matrix(4, 6, 1.0);
        let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let corr = d.t_matmul(&Matrix::column(&z)).unwrap().max_abs();
        let sol = nn_lasso_cd(&instance(d.clone(), z.clone(), corr * 1.01)).unwrap();
        assert!(sol.code.iter().all(|&a| a == 0.0));
        let zero_obj = vector_objective(&d, &z, &[0.0; 6], corr * 1.01);
        assert_eq!(sol.objective, zero_obj);
    }

    #[test]
    fn kkt_holds_at_convergence() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let d: Matrix<f64> = rng.normal_matrix(5, 10, 1.0);
            let z: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let inst = LassoInstance {
                tolerance: 1e-10,
                ..instance(d.clone(), z.clone(), 0.2)
            };
            let sol = nn_lasso_cd(&inst).unwrap();
            assert!(sol.converged);
            let a = Matrix::column(&sol.code);
            let resid = d.matmul(&a).unwrap().sub(&Matrix::column(&z)).unwrap();
            let grad = d.t_matmul(&resid).unwrap();
            for j in 0..10 {
                let g = grad[(j, 0)] + 0.2;
                if sol.code[j] > 0.0 {
                    assert!(g.abs() < 10.0 * inst.tolerance, "active coord {j}: {g}");
                } else {
                    assert!(g > -10.0 * inst.tolerance, "inactive coord {j}: {g}");
                }
            }
        }
    }

    #[test]
    fn columnwise_matches_matrix_objective() {
        let mut rng = Rng::new(9);
        let d: Matrix<f64> = rng.normal_matrix(4, 8, 1.0);
        let z: Matrix<f64> = rng.normal_matrix(4, 3, 1.0);
        let (code, total) = nn_lasso_cd_columns(&d, &z, 0.1, 1e-12, 100_000).unwrap();
        let direct = lasso_objective(&d, &z, &code, 0.1).unwrap();
        assert!((total - direct).abs() < 1e-10);
    }

    #[test]
    fn fd_of_sum_and_half_norm() {
        let x = Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]);
        let g = fd_grad(|m| m.sum(), &x, 1e-5);
        assert!(g.sub(&Matrix::filled(2, 2, 1.0)).unwrap().max_abs() < 1e-9);
        let g = fd_grad(|m| 0.5 * m.frobenius_sq(), &x, 1e-5);
        assert!(g.sub(&x).unwrap().max_abs() < 1e-8);
    }
}
