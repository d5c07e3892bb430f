//! Sparse rate reduction: coding rates `R`, `R^c`, the ℓ¹ term, and
//! closed-form gradients of the rates.
//!
//! `R(Z) = ½ log det(I + α ZᵀZ)` with `α = d / (N ε²)`, where `d` is the row
//! count of the matrix the rate is applied to. For `R^c`, each head's rate is
//! taken of `U_kᵀZ`, whose row count is `p`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{inverse_posdef, logdet_posdef, Matrix, Scalar};

/// Entries with magnitude above this count toward the ℓ⁰ diagnostic.
pub const L0_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateParams {
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            lambda: 0.1,
        }
    }
}

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter {
                name: "lambda",
                detail: format!("{} < 0", self.lambda),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrrReport {
    pub r: f64,
    pub rc: f64,
    pub l1: f64,
    pub srr: f64,
    pub per_head_rates: Vec<f64>,
    /// Entries with `|z| > L0_THRESHOLD`.
    pub l0_count: usize,
    pub entries: usize,
}

impl SrrReport {
    pub fn l0_fraction(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.l0_count as f64 / self.entries as f64
        }
    }
}

/// Which Gram matrix the log-determinant is taken of; both give the same rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramForm {
    /// `I_N + α ZᵀZ`
    Tokens,
    /// `I_d + α ZZᵀ`
    Features,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter {
            name: "epsilon",
            detail: format!("{epsilon} must be > 0"),
        });
    }
    Ok(())
}

fn alpha<T: Scalar>(z: &Matrix<T>, epsilon: f64) -> Result<T> {
    check_epsilon(epsilon)?;
    let (d, n) = z.shape();
    if n == 0 {
        return shape_err("rate", "token matrix has no columns");
    }
    Ok(T::of(d as f64 / (n as f64 * epsilon * epsilon)))
}

fn add_identity<T: Scalar>(m: &mut Matrix<T>) {
    for i in 0..m.rows() {
        m[(i, i)] += T::one();
    }
}

/// `R(Z)` using an explicitly chosen Gram form.
pub fn rate_r_with<T: Scalar>(z: &Matrix<T>, epsilon: f64, form: GramForm) -> Result<T> {
    let a = alpha(z, epsilon)?;
    let mut gram = match form {
        GramForm::Tokens => z.t_matmul(z)?,
        GramForm::Features => z.matmul_t(z)?,
    }
    .scale(a);
    add_identity(&mut gram);
    Ok(logdet_posdef(&gram)? * T::of(0.5))
}

/// `R(Z)`, using the smaller of the two equivalent Gram matrices.
pub fn rate_r<T: Scalar>(z: &Matrix<T>, epsilon: f64) -> Result<T> {
    let form = if z.cols() < z.rows() {
        GramForm::Tokens
    } else {
        GramForm::Features
    };
    rate_r_with(z, epsilon, form)
}

fn check_heads<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>]) -> Result<()> {
    if let Some(u) = heads.iter().find(|u| u.rows() != z.rows()) {
        return shape_err(
            "rate_rc",
            format!("basis with {} rows for features of width {}", u.rows(), z.rows()),
        );
    }
    Ok(())
}

/// `R^c(Z | U) = Σ_k R(U_kᵀZ)`; returns the total and the per-head rates.
pub fn rate_rc<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>], epsilon: f64) -> Result<(T, Vec<T>)> {
    check_heads(z, heads)?;
    let per_head = heads
        .iter()
        .map(|u| rate_r(&u.t_matmul(z)?, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_head.iter().copied().sum(), per_head))
}

/// `∇R(Z) = α Z (I + α ZᵀZ)⁻¹`, evaluated through `α (I + α ZZᵀ)⁻¹ Z`
/// when that inverse is smaller.
pub fn grad_rate_r<T: Scalar>(z: &Matrix<T>, epsilon: f64) -> Result<Matrix<T>> {
    let a = alpha(z, epsilon)?;
    if z.cols() <= z.rows() {
        let mut gram = z.t_matmul(z)?.scale(a);
        add_identity(&mut gram);
        Ok(z.matmul(&inverse_posdef(&gram)?)?.scale(a))
    } else {
        let mut gram = z.matmul_t(z)?.scale(a);
        add_identity(&mut gram);
        Ok(inverse_posdef(&gram)?.matmul(z)?.scale(a))
    }
}

/// `∇R^c(Z | U) = Σ_k U_k ∇R(U_kᵀZ)`
pub fn grad_rate_rc<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>], epsilon: f64) -> Result<Matrix<T>> {
    check_heads(z, heads)?;
    let mut total = Matrix::zeros(z.rows(), z.cols());
    for u in heads {
        let g = grad_rate_r(&u.t_matmul(z)?, epsilon)?;
        total.add_assign(&u.matmul(&g)?)?;
    }
    Ok(total)
}

/// Full objective `R^c − R + λ‖Z‖₁` with its components.
pub fn srr_objective<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>], params: &RateParams) -> Result<SrrReport> {
    params.validate()?;
    let r = rate_r(z, params.epsilon)?.f64();
    let (rc, per_head) = rate_rc(z, heads, params.epsilon)?;
    let rc = rc.f64();
    let l1 = z.abs_sum().f64();
    let l0_count = z.as_slice().iter().filter(|x| x.abs().f64() > L0_THRESHOLD).count();
    Ok(SrrReport {
        r,
        rc,
        l1,
        srr: rc - r + params.lambda * l1,
        per_head_rates: per_head.into_iter().map(|x| x.f64()).collect(),
        l0_count,
        entries: z.len(),
    })
}
