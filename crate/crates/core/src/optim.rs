//! AdamW with decoupled weight decay, a linear-warmup + cosine schedule, and
//! label-smoothed cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSpec;
use crate::numerics::{Matrix, Scalar};

/// Reference learning rate and the batch size it was tuned for.
pub const REFERENCE_LR: f64 = 8e-4;
pub const REFERENCE_BATCH: usize = 4096;

/// Learning rate scaled linearly from the reference recipe.
pub fn scaled_lr(batch_size: usize) -> f64 {
    REFERENCE_LR * batch_size as f64 / REFERENCE_BATCH as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps_opt: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps instead of `total_epochs`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: scaled_lr(128),
            min_lr: 0.0,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            eps_opt: 1e-8,
            warmup_epochs: 1,
            total_epochs: 5,
            batch_size: 128,
            label_smoothing: 0.1,
            seed: 0,
            grad_clip: Some(1.0),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
            ("eps_opt", self.eps_opt),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} must lie in [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be > 0"));
            }
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Step-level schedule for a dataset with `steps_per_epoch` batches.
    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let epoch_total = self.total_epochs * steps_per_epoch;
        let epoch_warmup = self.warmup_epochs * steps_per_epoch;
        let (total, warmup) = match self.max_steps {
            Some(s) if self.total_epochs > 0 => {
                let w = (s as f64 * self.warmup_epochs as f64 / self.total_epochs as f64).round() as usize;
                (s, w.min(s))
            }
            Some(s) => (s, 0),
            None => (epoch_total, epoch_warmup),
        };
        Schedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_steps: warmup,
            total_steps: total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Linear ramp `0 → base_lr` over the warmup, then half a cosine down to
    /// `min_lr` at `total_steps`; constant `min_lr` afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step >= self.total_steps && self.total_steps > self.warmup_steps {
                self.min_lr
            } else {
                self.base_lr
            };
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Mean cross-entropy of `logits` (`classes × batch`) against targets with
/// mass `1 − s + s/C` on the label and `s/C` elsewhere.
pub fn smoothed_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize], smoothing: f64) -> Result<f64> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape {
            op: "smoothed_ce",
            detail: format!("{} labels for {batch} columns", labels.len()),
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Parameter {
            name: "smoothing",
            detail: format!("{smoothing} outside [0, 1)"),
        });
    }
    let off = smoothing / classes as f64;
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let col: Vec<f64> = (0..classes).map(|c| logits[(c, b)].f64()).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (c, x) in col.iter().enumerate() {
            let target = if c == label { 1.0 - smoothing + off } else { off };
            total -= target * (x - lse);
        }
    }
    Ok(total / batch as f64)
}

/// Fraction of columns whose arg-max equals the label.
pub fn accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| {
            let best = (0..logits.rows())
                .max_by(|&i, &j| {
                    logits[(i, b)]
                        .partial_cmp(&logits[(j, b)])
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Scales `grads` in place so their joint Frobenius norm is at most
/// `max_norm`; returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.frobenius_sq().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// AdamW moments, aligned with the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &[Matrix<T>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update. Weight decay (`param −= lr·wd·param`) is applied first
/// and only to tensors whose kind decays. Nothing is modified when any
/// gradient is non-finite.
pub fn opt_step<T: Scalar>(
    state: &mut OptState<T>,
    params: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    specs: &[ParamSpec],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != specs.len() {
        return Err(Error::Shape {
            op: "opt_step",
            detail: format!(
                "{} params, {} grads, {} moments, {} specs",
                params.len(),
                grads.len(),
                state.m.len(),
                specs.len()
            ),
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(specs) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "opt_step",
                detail: format!("{}: param {:?} vs grad {:?}", s.name, p.shape(), g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { name: s.name.clone() });
        }
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - b1.powi(t));
    let bc2 = T::of(1.0 - b2.powi(t));
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let lr_t = T::of(lr);
    let decay = T::one() - T::of(lr * config.weight_decay);
    let eps = T::of(config.eps_opt);
    for i in 0..params.len() {
        let p = params[i].as_mut_slice();
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let decays = specs[i].kind.decays() && config.weight_decay != 0.0;
        for j in 0..p.len() {
            if decays {
                p[j] *= decay;
            }
            m[j] = b1t * m[j] + one_b1 * g[j];
            v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    fn spec(kind: ParamKind) -> Vec<ParamSpec> {
        vec![ParamSpec {
            name: "w".into(),
            rows: 1,
            cols: 1,
            kind,
        }]
    }

    fn sched() -> Schedule {
        Schedule {
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 10,
            total_steps: 110,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!(s.lr_at(110).abs() < 1e-18);
        assert!((s.lr_at(60) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at(10) - s.lr_at(9)).abs() < 1.01e-4);
        let with_min = Schedule { min_lr: 1e-5, ..s };
        assert!((with_min.lr_at(110) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_at_boundary() {
        let s = Schedule {
            warmup_steps: 1_000_000,
            total_steps: 2_000_000,
            ..sched()
        };
        assert!((s.lr_at(1_000_000) - s.lr_at(999_999)).abs() < 1e-8);
        let below = s.base_lr * (1_000_000.0 - 1e-9) / 1_000_000.0;
        assert!((s.lr_at(1_000_000) - below).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_examples() {
        let uniform = Matrix::<f64>::zeros(10, 3);
        for s in [0.0, 0.1, 0.5] {
            let l = smoothed_ce(&uniform, &[0, 4, 9], s).unwrap();
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        let mut sharp = Matrix::<f64>::filled(3, 1, -50.0);
        sharp[(1, 0)] = 50.0;
        assert!(smoothed_ce(&sharp, &[1], 0.0).unwrap() < 1e-40);
        assert!(matches!(smoothed_ce(&uniform, &[0, 1, 10], 0.1), Err(Error::Input(_))));
        assert!(smoothed_ce(&uniform, &[0, 1, 2], 1.0).is_err());
    }

    #[test]
    fn smoothed_targets_mass() {
        // At uniform logits the gradient is softmax − target, so the target
        // masses 0.91 and 0.01 show up as slopes −0.81 and 0.09.
        let x = Matrix::<f64>::zeros(10, 1);
        let g = crate::oracle::fd_grad(|m| smoothed_ce(m, &[3], 0.1).unwrap(), &x, 1e-5);
        for c in 0..10 {
            let want = if c == 3 { -0.81 } else { 0.09 };
            assert!((g[(c, 0)] - want).abs() < 1e-9, "{c}: {}", g[(c, 0)]);
        }
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![Matrix::<f64>::scalar(1.0)];
        let mut st = OptState::new(&p);
        opt_step(
            &mut st,
            &mut p,
            &[Matrix::scalar(0.0)],
            &spec(ParamKind::Bases),
            0.1,
            &cfg,
        )
        .unwrap();
        assert_eq!(p[0].item(), 1.0);

        let mut p = vec![Matrix::<f64>::scalar(1.0)];
        let mut st = OptState::new(&p);
        opt_step(
            &mut st,
            &mut p,
            &[Matrix::scalar(1.0)],
            &spec(ParamKind::Bases),
            0.1,
            &cfg,
        )
        .unwrap();
        assert!((p[0].item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0].item() - 0.9).abs() < 1e-8);

        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..cfg
        };
        let mut p = vec![Matrix::<f64>::scalar(2.0)];
        let mut st = OptState::new(&p);
        opt_step(
            &mut st,
            &mut p,
            &[Matrix::scalar(0.0)],
            &spec(ParamKind::Bases),
            0.1,
            &cfg,
        )
        .unwrap();
        assert!((p[0].item() - 2.0 * 0.99).abs() < 1e-15);
        let mut q = vec![Matrix::<f64>::scalar(2.0)];
        opt_step(
            &mut OptState::new(&q),
            &mut q,
            &[Matrix::scalar(0.0)],
            &spec(ParamKind::HeadBias),
            0.1,
            &cfg,
        )
        .unwrap();
        assert_eq!(q[0].item(), 2.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = vec![Matrix::<f64>::scalar(1.0)];
        let mut st = OptState::new(&p);
        let err = opt_step(
            &mut st,
            &mut p,
            &[Matrix::scalar(f64::NAN)],
            &spec(ParamKind::Bases),
            0.1,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name } if name == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::<f64>::from_rows(&[&[3.0, 4.0]])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].frobenius() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            warmup_epochs: 6,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!((scaled_lr(4096) - 8e-4).abs() < 1e-18);
    }
}
