//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with its own `main` so the lines are visible under `cargo test`.
//! A criterion whose dataset is absent is reported as FAIL with the reason
//! but does not fail the process; every criterion that runs must pass.

mod common;

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{subspace_run, subspace_spec, tiny_on_tokens};
use crate_alpha_cli::config::{DataConfig, RunConfig, DATA_ENV};
use crate_alpha_cli::diagnose::{diagnose, DiagnoseOptions};
use crate_alpha_cli::train::{ablate, ablation_table, checkpoint_name, train, FINAL_CHECKPOINT};
use crate_alpha_core::container::Checkpoint;
use crate_alpha_core::data::cifar_dir;
use crate_alpha_core::layers::{ista_oc, odl, prox_step, vanilla_ista, BlockVariant, DictionaryPair, SparseHyper};
use crate_alpha_core::model::{paramcount, InputBatch, InputSpec, ModelConfig, ModelState, SizeName};
use crate_alpha_core::numerics::{sigma_max, Rng};
use crate_alpha_core::oracle::{fd_grad, lasso_objective, nn_lasso_cd_columns, rel_err};
use crate_alpha_core::srr::{grad_rate_r, grad_rate_rc, rate_r, rate_r_with, rate_rc, GramForm};
use crate_alpha_core::{Matrix, Precision};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Could not run in this environment.
    Blocked(String),
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(budget: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let r = f();
    let took = t.elapsed();
    match r {
        Ok(detail) if took <= budget => Outcome::Pass(format!("{detail} ({:.1}s)", took.as_secs_f64())),
        Ok(detail) => Outcome::Fail(format!(
            "{detail}, but took {:.1}s against a {:.0}s budget",
            took.as_secs_f64(),
            budget.as_secs_f64()
        )),
        Err(e) => Outcome::Fail(e),
    }
}

fn within(count: usize, reported: f64) -> (f64, bool) {
    let dev = (count as f64 - reported).abs() / reported;
    (dev, dev <= 0.03)
}

fn parameter_counts() -> Check {
    let table = [
        (SizeName::Tiny, BlockVariant::ResidualOdl, 4.8e6),
        (SizeName::Small, BlockVariant::ResidualOdl, 41.0e6),
        (SizeName::Base, BlockVariant::ResidualOdl, 72.3e6),
        (SizeName::Large, BlockVariant::ResidualOdl, 253.8e6),
        (SizeName::Huge, BlockVariant::ResidualOdl, 526.8e6),
        (SizeName::Base, BlockVariant::VanillaIsta, 22.8e6),
    ];
    let mut parts = Vec::new();
    for (size, variant, reported) in table {
        let config = ModelConfig::preset(size).with_variant(variant);
        let b = config.breakdown();
        let count = paramcount(&config);
        let summed: usize = b.groups.iter().map(|(_, n)| n).sum();
        ensure(summed == b.total && b.total == count, || {
            format!("{size}: breakdown sums to {summed}, total {count}")
        })?;
        let (dev, ok) = within(count, reported);
        ensure(ok, || {
            format!(
                "{size} {}: {count} is {:.2}% from {reported}",
                variant.short_name(),
                100.0 * dev
            )
        })?;
        parts.push(format!(
            "{size}/{}={count} ({:+.2}%)",
            variant.short_name(),
            100.0 * (count as f64 / reported - 1.0)
        ));
    }
    Ok(parts.join(", "))
}

fn rate_suite() -> Check {
    let mut rng = Rng::new(2);
    let zero = Matrix::<f64>::zeros(5, 4);
    ensure(rate_r(&zero, 0.5).unwrap() == 0.0, || "R(0) != 0".into())?;
    let mut worst_inv: f64 = 0.0;
    let mut worst_dual: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for _ in 0..20 {
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let k = 1 + rng.below(4);
        let p = 1 + rng.below(d);
        let eps = rng.uniform_in(0.3, 1.5);
        let z: Matrix<f64> = rng.normal_matrix(d, n, 1.0);
        let heads: Vec<Matrix<f64>> = (0..k).map(|_| rng.normal_matrix(d, p, 0.7)).collect();
        let q = rng.orthogonal(d);
        let base = rate_r(&z, eps).unwrap();
        worst_inv = worst_inv.max((rate_r(&q.matmul(&z).unwrap(), eps).unwrap() - base).abs());
        let a = rate_r_with(&z, eps, GramForm::Tokens).unwrap();
        let b = rate_r_with(&z, eps, GramForm::Features).unwrap();
        worst_dual = worst_dual.max((a - b).abs());
        let fd = fd_grad(|x| rate_r(x, eps).unwrap(), &z, 1e-5);
        worst_fd = worst_fd.max(rel_err(&grad_rate_r(&z, eps).unwrap(), &fd));
        let fd = fd_grad(|x| rate_rc(x, &heads, eps).unwrap().0, &z, 1e-5);
        worst_fd = worst_fd.max(rel_err(&grad_rate_rc(&z, &heads, eps).unwrap(), &fd));
    }
    ensure(worst_inv < 1e-10, || {
        format!("orthogonal invariance off by {worst_inv:e}")
    })?;
    ensure(worst_dual < 1e-10, || format!("Gram forms differ by {worst_dual:e}"))?;
    ensure(worst_fd < 1e-6, || format!("gradient rel err {worst_fd:e}"))?;
    Ok(format!(
        "invariance {worst_inv:.1e}, duality {worst_dual:.1e}, gradient rel err {worst_fd:.1e}"
    ))
}

fn lasso_equivalence() -> Check {
    let mut rng = Rng::new(3);
    let mut worst_gap: f64 = 0.0;
    let mut worst_rise = f64::NEG_INFINITY;
    for i in 0..20 {
        let dim = 1 + rng.below(6);
        let c = 1 + rng.below(3);
        let n = 1 + rng.below(4);
        let d: Matrix<f64> = rng.normal_matrix(dim, c * dim, 1.0);
        let z: Matrix<f64> = rng.normal_matrix(dim, n, 1.0);
        let lambda = rng.uniform_in(0.05, 0.5);
        let s = sigma_max(&d);
        let eta = 0.9 / (s * s);
        let mut a = Matrix::zeros(c * dim, n);
        for _ in 0..500_000 {
            let next = prox_step(&a, &d, &z, eta, lambda).unwrap();
            let moved = next.sub(&a).unwrap().max_abs();
            a = next;
            if moved < 1e-14 {
                break;
            }
        }
        let ours = lasso_objective(&d, &z, &a, lambda).unwrap();
        let (_, oracle) = nn_lasso_cd_columns(&d, &z, lambda, 1e-13, 1_000_000).unwrap();
        worst_gap = worst_gap.max((ours - oracle).abs());

        let pair = DictionaryPair {
            d: d.clone(),
            dhat: None,
            hyper: SparseHyper { eta, lambda, steps: 2 },
        };
        let two = ista_oc(&z, &pair).unwrap();
        let at_zero = lasso_objective(&d, &z, &Matrix::zeros(c * dim, n), lambda).unwrap();
        let rise = lasso_objective(&d, &z, &two, lambda).unwrap() - at_zero;
        worst_rise = worst_rise.max(rise);
        ensure(rise <= 1e-10, || {
            format!("instance {i}: two-step objective rose by {rise:e}")
        })?;
    }
    ensure(worst_gap < 1e-6, || {
        format!("objective gap to coordinate descent {worst_gap:e}")
    })?;
    Ok(format!(
        "gap to coordinate descent {worst_gap:.1e}, worst two-step change {worst_rise:.2e}"
    ))
}

fn hand_goldens() -> Check {
    let one = |x: f64| -> Matrix<f64> { Matrix::from_rows(&[&[x]]) };
    let hyper = SparseHyper {
        eta: 0.5,
        lambda: 2.0,
        steps: 2,
    };
    let pair = DictionaryPair {
        d: one(1.0),
        dhat: Some(one(2.0)),
        hyper,
    };
    let got = [
        (
            "vanilla_ista",
            vanilla_ista(&one(3.0), &one(1.0), 0.5, 2.0).unwrap().item(),
            2.0,
        ),
        (
            "prox_step",
            prox_step(&one(0.0), &one(1.0), &one(3.0), 0.5, 2.0).unwrap().item(),
            0.5,
        ),
        ("ista_oc", ista_oc(&one(3.0), &pair).unwrap().item(), 0.75),
        (
            "odl decoupled",
            odl(&one(3.0), &pair, BlockVariant::DecoupledOdl).unwrap().item(),
            1.5,
        ),
        (
            "odl residual",
            odl(&one(3.0), &pair, BlockVariant::ResidualOdl).unwrap().item(),
            4.5,
        ),
    ];
    for (name, value, want) in got {
        ensure((value - want).abs() <= 1e-12, || {
            format!("{name} gave {value}, expected {want}")
        })?;
    }
    Ok(got
        .iter()
        .map(|(n, v, _)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn end_to_end_gradients() -> Check {
    let config = ModelConfig {
        size_name: SizeName::Custom,
        depth: 2,
        width: 16,
        heads: 4,
        overcompleteness: 2,
        input: InputSpec::Image {
            image_side: 4,
            channels: 1,
            patch: 2,
        },
        num_classes: 3,
        variant: BlockVariant::ResidualOdl,
        ..ModelConfig::default()
    };
    ensure(config.tokens_per_sample() == 5, || "expected N = 5".into())?;
    let mut model = ModelState::<f64>::init(&config, &Rng::new(50)).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(51);
    for p in model.params_mut() {
        let noise: Matrix<f64> = rng.normal_matrix(p.rows(), p.cols(), 0.3);
        *p = p.add(&noise).unwrap();
    }
    let len = config.input.sample_len() * 2;
    let batch = InputBatch::new((0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), 2);
    let labels = [1, 2];
    let (_, _, grads) = model.loss_and_grads(&batch, &labels, 0.1).map_err(|e| e.to_string())?;
    let mut worst: (f64, String) = (0.0, String::new());
    for (i, spec) in model.specs().iter().enumerate() {
        let f = |x: &Matrix<f64>| {
            let mut probe = model.clone();
            probe.params_mut()[i] = x.clone();
            probe.loss(&batch, &labels, 0.1).unwrap()
        };
        let e = rel_err(&grads[i], &fd_grad(f, &model.params()[i], 1e-5));
        if e > worst.0 {
            worst = (e, spec.name.clone());
        }
    }
    ensure(worst.0 < 1e-5, || format!("{}: rel err {:e}", worst.1, worst.0))?;
    Ok(format!(
        "{} tensors, worst rel err {:.1e} ({})",
        model.specs().len(),
        worst.0,
        worst.1
    ))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crate-alpha-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn compression() -> Check {
    let out = scratch("compression");
    let spec = subspace_spec(2048);
    let mut config = subspace_run(tiny_on_tokens(&spec), spec, 2000, &out);
    config.train.total_epochs = 16;
    config.diagnostics.log_every = 100;
    config.diagnostics.checkpoint_every = Some(1000);
    let s = train(&config, None).map_err(|e| e.to_string())?;
    let d = diagnose(&DiagnoseOptions {
        checkpoint: out.join(FINAL_CHECKPOINT),
        out_dir: out.join("diag"),
        layers: vec![0, config.model.depth - 1],
        samples: 256,
        sample: 0,
    })
    .map_err(|e| e.to_string())?;
    let first = d.mean_rc[0];
    let last = *d.mean_rc.last().unwrap();
    let _ = fs::remove_dir_all(&out);
    ensure(s.test_accuracy >= 0.95, || {
        format!("test accuracy {:.4}", s.test_accuracy)
    })?;
    ensure(last < first, || {
        format!("final-layer Rc {last:.4} not below layer-1 Rc {first:.4}")
    })?;
    Ok(format!(
        "test accuracy {:.2}%, mean Rc layer 1 {first:.3} -> layer {} {last:.3}",
        100.0 * s.test_accuracy,
        config.model.depth
    ))
}

fn cifar_root() -> Result<PathBuf, String> {
    let root = std::env::var_os(DATA_ENV).map(PathBuf::from);
    match root {
        Some(r)
            if cifar_dir(&r).join("data_batch_1.bin").is_file() && cifar_dir(&r).join("test_batch.bin").is_file() =>
        {
            Ok(r)
        }
        _ => Err(format!("CIFAR-10 binary batches not found (set {DATA_ENV})")),
    }
}

fn ablation_ladder(root: PathBuf) -> Check {
    let out = scratch("ablation");
    let mut config = RunConfig {
        data: DataConfig::Cifar10 {
            root: Some(root),
            train_limit: None,
            test_limit: None,
            augment: true,
        },
        out_dir: out.clone(),
        ..RunConfig::default()
    };
    config.train.total_epochs = 5;
    config.diagnostics.train_eval_samples = 2048;
    let rows = ablate(&config).map_err(|e| e.to_string())?;
    println!("{}", ablation_table(&rows));
    let ordered = rows.windows(2).all(|w| w[1].test_accuracy >= w[0].test_accuracy);
    println!("accuracy ordering along the ladder holds: {ordered} (advisory)");
    ensure(out.join("ablation.csv").is_file(), || {
        "comparison table not written".into()
    })?;
    for r in &rows {
        ensure(r.loss_reduction() >= 0.5, || {
            format!(
                "{} reduced training loss by only {:.1}%",
                r.variant.short_name(),
                100.0 * r.loss_reduction()
            )
        })?;
    }
    Ok(rows
        .iter()
        .map(|r| format!("{} -{:.0}%", r.variant.short_name(), 100.0 * r.loss_reduction()))
        .collect::<Vec<_>>()
        .join(", "))
}

fn reproducibility() -> Check {
    let spec = subspace_spec(320);
    let mut model = tiny_on_tokens(&spec);
    model.size_name = SizeName::Custom;
    model.depth = 2;
    model.width = 32;
    model.heads = 2;
    let full = scratch("uninterrupted");
    let resumed = scratch("resumed");
    let mut config = subspace_run(model, spec, 100, &full);
    config.precision = Precision::F64;
    config.diagnostics.checkpoint_every = Some(50);
    train(&config, None).map_err(|e| e.to_string())?;

    let ckpt = full.join(FINAL_CHECKPOINT);
    let bytes = fs::read(&ckpt).map_err(|e| e.to_string())?;
    let copy = full.join("resaved.cra");
    Checkpoint::<f64>::load(&ckpt)
        .and_then(|c| c.save(&copy))
        .map_err(|e| e.to_string())?;
    ensure(fs::read(&copy).map_err(|e| e.to_string())? == bytes, || {
        "save/load/save changed bytes".into()
    })?;

    let mut second = config.clone();
    second.out_dir = resumed.clone();
    fs::create_dir_all(&resumed).map_err(|e| e.to_string())?;
    let halfway = resumed.join("halfway.cra");
    fs::copy(full.join(checkpoint_name(50)), &halfway).map_err(|e| e.to_string())?;
    train(&second, Some(&halfway)).map_err(|e| e.to_string())?;

    let a = Checkpoint::<f64>::load(&ckpt).map_err(|e| e.to_string())?;
    let b = Checkpoint::<f64>::load(&resumed.join(FINAL_CHECKPOINT)).map_err(|e| e.to_string())?;
    let _ = fs::remove_dir_all(&full);
    let _ = fs::remove_dir_all(&resumed);
    ensure(a.progress == b.progress, || "progress differs".into())?;
    ensure(a.model.params() == b.model.params(), || {
        "parameters differ after resuming".into()
    })?;
    let (oa, ob) = (a.opt.unwrap(), b.opt.unwrap());
    ensure(oa.m == ob.m && oa.v == ob.v && oa.step == ob.step, || {
        "optimizer state differs".into()
    })?;
    Ok(format!(
        "{} bytes re-saved identically; 50+50 steps equal 100 bit for bit",
        bytes.len()
    ))
}

fn main() {
    let criteria: Vec<(u32, &str, Box<dyn FnOnce() -> Outcome>)> = vec![
        (
            1,
            "parameter counts",
            Box::new(|| timed(Duration::from_secs(1), parameter_counts)),
        ),
        (
            2,
            "rate functions",
            Box::new(|| timed(Duration::from_secs(10), rate_suite)),
        ),
        (
            3,
            "LASSO oracle equivalence",
            Box::new(|| timed(Duration::from_secs(30), lasso_equivalence)),
        ),
        (4, "hand-value goldens", Box::new(|| timed(Duration::MAX, hand_goldens))),
        (
            5,
            "end-to-end gradients",
            Box::new(|| timed(Duration::from_secs(300), end_to_end_gradients)),
        ),
        (
            6,
            "compression on subspace data",
            Box::new(|| timed(Duration::from_secs(1200), compression)),
        ),
        (
            7,
            "ablation ladder on CIFAR-10",
            Box::new(|| match cifar_root() {
                Err(reason) => Outcome::Blocked(reason),
                Ok(root) => timed(Duration::from_secs(7200), || ablation_ladder(root)),
            }),
        ),
        (8, "reproducibility", Box::new(|| timed(Duration::MAX, reproducibility))),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        let outcome = run();
        let line = match &outcome {
            Outcome::Pass(d) => format!("PASS criterion {n} ({name}): {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): {d}")
            }
            Outcome::Blocked(d) => format!("FAIL criterion {n} ({name}): not run, {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
