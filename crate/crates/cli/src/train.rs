//! Training, evaluation and the variant ladder.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate_alpha_core::container::{Checkpoint, Progress};
use crate_alpha_core::data::{gen_subspace_data, load_cifar10, Dataset, NormStats, Split};
use crate_alpha_core::layers::{BlockVariant, LayerRates};
use crate_alpha_core::model::{paramcount, InputSpec, ModelState};
use crate_alpha_core::numerics::Rng;
use crate_alpha_core::optim::{accuracy, clip_global_norm, opt_step, OptState};
use crate_alpha_core::srr::RateParams;
use crate_alpha_core::{Error, Precision, Scalar};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DataConfig, RunConfig, DATA_ENV};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::CliError;

const INIT_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 1 << 32;
const EVAL_BATCH: usize = 256;
pub const NORM_STATS_FILE: &str = "norm_stats.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.cra";

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

fn data_root(root: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    root.clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::Data(format!("no CIFAR-10 location: set data.root or {DATA_ENV}")))
}

/// Loads the configured datasets. CIFAR normalization statistics are read
/// from `stats_dir` when present there, otherwise computed from the training
/// split (and written there when `persist`).
pub fn load_data(config: &RunConfig, stats_dir: &Path, persist: bool) -> Result<Datasets, CliError> {
    match &config.data {
        DataConfig::Cifar10 {
            root,
            train_limit,
            test_limit,
            ..
        } => {
            let root = data_root(root)?;
            let mut train = load_cifar10(&root, Split::Train)?;
            let mut test = load_cifar10(&root, Split::Test)?;
            let stats_path = stats_dir.join(NORM_STATS_FILE);
            let stats = if stats_path.exists() {
                NormStats::load(&stats_path)?
            } else {
                let s = NormStats::compute(&train)?;
                if persist {
                    s.save(&stats_path)?;
                }
                s
            };
            stats.apply(&mut train)?;
            stats.apply(&mut test)?;
            if let Some(n) = train_limit {
                train.truncate(*n);
            }
            if let Some(n) = test_limit {
                test.truncate(*n);
            }
            for ds in [&mut train, &mut test] {
                match (&mut ds.input, config.model.input) {
                    (
                        InputSpec::Image {
                            patch,
                            image_side,
                            channels,
                        },
                        InputSpec::Image {
                            patch: p,
                            image_side: s,
                            channels: c,
                        },
                    ) if *image_side == s && *channels == c => *patch = p,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "model.input {:?} does not fit 32x32 RGB images",
                            config.model.input
                        )))
                    }
                }
            }
            if config.model.num_classes != train.num_classes {
                return Err(CliError::Usage(format!(
                    "model.num_classes {} but the dataset has {}",
                    config.model.num_classes, train.num_classes
                )));
            }
            Ok(Datasets { train, test })
        }
        DataConfig::Subspace { spec, test_samples } => {
            let mut all = *spec;
            all.samples = spec.samples + test_samples;
            let gen = gen_subspace_data(&all)?;
            let full = gen.to_dataset(&all);
            let n = full.input.sample_len();
            let split = spec.samples;
            let train = Dataset {
                samples: full.samples[..split * n].to_vec(),
                labels: full.labels[..split].to_vec(),
                ..full.clone()
            };
            let test = Dataset {
                samples: full.samples[split * n..].to_vec(),
                labels: full.labels[split..].to_vec(),
                ..full
            };
            Ok(Datasets { train, test })
        }
    }
}

/// Exclusive ownership of an output directory for one training process.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("train.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is in use by another training process (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Mean loss and accuracy over `indices`, in fixed-size chunks.
pub fn evaluate<T: Scalar>(
    model: &ModelState<T>,
    ds: &Dataset,
    indices: &[usize],
    smoothing: f64,
) -> Result<(f64, f64), CliError> {
    let mut loss = 0.0;
    let mut hits = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let b = ds.batch::<T>(chunk, None);
        let trace = model.forward(&b.inputs, None)?;
        let l = crate_alpha_core::optim::smoothed_ce(&trace.logits, &b.labels, smoothing)?;
        loss += l * chunk.len() as f64;
        hits += accuracy(&trace.logits, &b.labels) * chunk.len() as f64;
    }
    let n = indices.len().max(1) as f64;
    Ok((loss / n, hits / n))
}

/// Per-layer rates averaged over the first `samples` items of `ds`.
pub fn rate_diagnostics<T: Scalar>(
    model: &ModelState<T>,
    ds: &Dataset,
    samples: usize,
    params: &RateParams,
) -> Result<Vec<LayerRates>, CliError> {
    let idx: Vec<usize> = (0..samples.min(ds.len())).collect();
    let depth = model.config().depth;
    let mut acc = vec![LayerRates::default(); depth];
    for chunk in idx.chunks(64) {
        let b = ds.batch::<T>(chunk, None);
        let trace = model.forward(&b.inputs, Some(params))?;
        for (a, layer) in acc.iter_mut().zip(&trace.layers) {
            for r in &layer.rates {
                a.r += r.r;
                a.rc += r.rc;
                a.l1 += r.l1;
                a.srr += r.srr;
                a.l0_fraction += r.l0_fraction;
            }
        }
    }
    let n = idx.len().max(1) as f64;
    Ok(acc
        .into_iter()
        .map(|a| LayerRates {
            r: a.r / n,
            rc: a.rc / n,
            l1: a.l1 / n,
            srr: a.srr / n,
            l0_fraction: a.l0_fraction / n,
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: BlockVariant,
    pub params: usize,
    pub steps: u64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Mean `R^c` per layer on held-out samples at the end of training.
    pub final_rc: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

impl TrainSummary {
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.final_train_loss / self.initial_train_loss
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.cra")
}

/// Trains per `config`, optionally continuing from a checkpoint.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_as::<f32>(config, resume),
        Precision::F64 => train_as::<f64>(config, resume),
    }
}

fn train_as<T: Scalar>(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let _lock = Lock::acquire(out)?;
    fs::write(out.join("config.json"), config.canonical_json())?;
    let data = load_data(config, out, true)?;
    let tc = &config.train;
    let n = data.train.len();
    if n < tc.batch_size {
        return Err(CliError::Usage(format!(
            "batch_size {} exceeds the {n} training samples",
            tc.batch_size
        )));
    }
    let steps_per_epoch = (n / tc.batch_size) as u64;
    let schedule = tc.schedule(steps_per_epoch as usize);
    let total = schedule.total_steps as u64;
    let root = Rng::new(tc.seed);
    let augment = matches!(config.data, DataConfig::Cifar10 { augment: true, .. });
    let train_eval: Vec<usize> = (0..config.diagnostics.train_eval_samples.min(n)).collect();
    let test_all: Vec<usize> = (0..data.test.len()).collect();
    let smoothing = tc.label_smoothing;

    let (mut model, mut opt, start, initial_train_loss) = match resume {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
            }
            let ck = Checkpoint::<T>::load(path)?;
            if ck.model.config() != &config.model {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            let initial = ck
                .run
                .get("initial_train_loss")
                .and_then(Value::as_f64)
                .unwrap_or(f64::NAN);
            let opt = ck.opt.clone().unwrap_or_else(|| OptState::new(ck.model.params()));
            (ck.model, opt, ck.progress.step, initial)
        }
        None => {
            let m = ModelState::<T>::init(&config.model, &root.split(INIT_STREAM))?;
            let o = OptState::new(m.params());
            let (l, _) = evaluate(&m, &data.train, &train_eval, smoothing)?;
            (m, o, 0, l)
        }
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = if start > 0 {
        MetricsWriter::resume(&metrics_path, config, start)?
    } else {
        MetricsWriter::create(&metrics_path, config)?
    };
    let run_header = |step_loss: f64| {
        serde_json::json!({
            "config": config.to_value(),
            "initial_train_loss": step_loss,
        })
    };
    let save = |model: &ModelState<T>, opt: &OptState<T>, step: u64, name: &str| -> Result<PathBuf, CliError> {
        let ck = Checkpoint {
            run: run_header(initial_train_loss),
            progress: Progress {
                step,
                epoch: step / steps_per_epoch,
                batch_in_epoch: step % steps_per_epoch,
            },
            model: model.clone(),
            opt: Some(opt.clone()),
        };
        let path = out.join(name);
        ck.save(&path)?;
        Ok(path)
    };

    info!(
        "training {} ({} params) for {total} steps, {steps_per_epoch} per epoch, from step {start}",
        config.model.variant.short_name(),
        paramcount(&config.model)
    );
    let clock = Instant::now();
    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut last_rates: Option<Vec<LayerRates>> = None;
    for step in start..total {
        let epoch = step / steps_per_epoch;
        if epoch != order_epoch {
            order = crate_alpha_core::data::shuffle(tc.seed, epoch, n);
            order_epoch = epoch;
        }
        let b = (step % steps_per_epoch) as usize;
        let idx = &order[b * tc.batch_size..(b + 1) * tc.batch_size];
        let mut aug_rng = augment.then(|| root.split(AUGMENT_STREAM + step));
        let batch = data.train.batch::<T>(idx, aug_rng.as_mut());
        let numerical = |e: Error, last: &Option<PathBuf>| {
            let kept = last.as_ref().map_or("none".to_string(), |p| p.display().to_string());
            CliError::Numerical(format!("step {step}: {e}; last good checkpoint: {kept}"))
        };
        let (loss, logits, mut grads) = model.loss_and_grads(&batch.inputs, &batch.labels, smoothing)?;
        let loss = loss.f64();
        if !loss.is_finite() {
            return Err(numerical(Error::NonFinite { name: "loss".into() }, &last_good));
        }
        if let Some(c) = tc.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = schedule.lr_at(step as usize + 1);
        let specs = model.specs().to_vec();
        opt_step(&mut opt, model.params_mut(), &grads, &specs, lr, tc).map_err(|e| numerical(e, &last_good))?;
        if !model.is_finite() {
            return Err(numerical(
                Error::NonFinite {
                    name: "parameters".into(),
                },
                &last_good,
            ));
        }

        let done = step + 1;
        let epoch_end = done % steps_per_epoch == 0;
        let finished = done == total;
        let wall = clock.elapsed().as_secs_f64();
        if done % config.diagnostics.log_every as u64 == 0 || finished {
            metrics.write(&MetricsRow {
                step: done,
                epoch,
                split: "train",
                loss,
                accuracy: accuracy(&logits, &batch.labels),
                lr,
                rates: None,
                wall_seconds: wall,
            })?;
        }
        let rates_due = config
            .diagnostics
            .rates_every
            .map_or(epoch_end, |k| done % k as u64 == 0)
            || finished;
        let rates = if rates_due {
            let r = rate_diagnostics(
                &model,
                &data.test,
                config.diagnostics.diag_samples,
                &config.diagnostics.rates,
            )?;
            last_rates = Some(r.clone());
            Some(r)
        } else {
            None
        };
        if epoch_end || finished {
            let (tl, ta) = evaluate(&model, &data.test, &test_all, smoothing)?;
            info!("step {done} epoch {epoch}: train loss {loss:.4}, test loss {tl:.4}, test acc {ta:.4}");
            metrics.write(&MetricsRow {
                step: done,
                epoch,
                split: "test",
                loss: tl,
                accuracy: ta,
                lr,
                rates,
                wall_seconds: clock.elapsed().as_secs_f64(),
            })?;
        } else if rates.is_some() {
            metrics.write(&MetricsRow {
                step: done,
                epoch,
                split: "diag",
                loss,
                accuracy: f64::NAN,
                lr,
                rates,
                wall_seconds: wall,
            })?;
        }
        let ckpt_due = config
            .diagnostics
            .checkpoint_every
            .map_or(epoch_end, |k| done % k as u64 == 0);
        if ckpt_due && !finished {
            last_good = Some(save(&model, &opt, done, &checkpoint_name(done))?);
        }
    }

    let final_path = save(&model, &opt, total.max(start), FINAL_CHECKPOINT)?;
    let (final_train_loss, _) = evaluate(&model, &data.train, &train_eval, smoothing)?;
    let (test_loss, test_accuracy) = evaluate(&model, &data.test, &test_all, smoothing)?;
    let final_rc = match last_rates {
        Some(r) => r,
        None => rate_diagnostics(
            &model,
            &data.test,
            config.diagnostics.diag_samples,
            &config.diagnostics.rates,
        )?,
    }
    .iter()
    .map(|r| r.rc)
    .collect();
    let summary = TrainSummary {
        variant: config.model.variant,
        params: paramcount(&config.model),
        steps: total,
        initial_train_loss,
        final_train_loss,
        test_loss,
        test_accuracy,
        final_rc,
        final_checkpoint: final_path,
    };
    if summary.loss_reduction().is_nan() {
        warn!("initial training loss unknown (checkpoint predates it)");
    }
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    info!("metrics written to {}", metrics.path().display());
    Ok(summary)
}

/// Runs the four-variant ladder with identical seeds and data order.
pub fn ablate(config: &RunConfig) -> Result<Vec<TrainSummary>, CliError> {
    let mut rows = Vec::new();
    for v in BlockVariant::LADDER {
        let mut c = config.clone();
        c.model.variant = v;
        c.out_dir = config.out_dir.join(v.short_name());
        rows.push(train(&c, None)?);
    }
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[TrainSummary]) -> String {
    let mut s = String::from(
        "variant,params,steps,initial_train_loss,final_train_loss,loss_reduction,test_loss,test_accuracy\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.4},{:.6},{:.4}\n",
            r.variant.short_name(),
            r.params,
            r.steps,
            r.initial_train_loss,
            r.final_train_loss,
            r.loss_reduction(),
            r.test_loss,
            r.test_accuracy
        ));
    }
    s
}

/// Human-readable ladder table.
pub fn ablation_table(rows: &[TrainSummary]) -> String {
    let mut s = format!(
        "{:<10}{:>12}{:>8}{:>12}{:>12}{:>10}{:>10}\n",
        "variant", "params", "steps", "loss@init", "loss@end", "drop", "test acc"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10}{:>12}{:>8}{:>12.4}{:>12.4}{:>9.1}%{:>9.2}%\n",
            r.variant.short_name(),
            r.params,
            r.steps,
            r.initial_train_loss,
            r.final_train_loss,
            100.0 * r.loss_reduction(),
            100.0 * r.test_accuracy
        ));
    }
    s
}

/// Reads the run config stored in a checkpoint header.
pub fn run_config_of(run: &Value) -> Result<RunConfig, CliError> {
    let v = run
        .get("config")
        .ok_or_else(|| CliError::Data("checkpoint carries no run config".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| CliError::Data(format!("checkpoint run config: {e}")))
}

/// Test-set loss and accuracy of a checkpoint.
pub fn eval(checkpoint: &Path) -> Result<(f64, f64), CliError> {
    let bytes = fs::read(checkpoint)?;
    match crate_alpha_core::container::peek_precision(&bytes)? {
        Precision::F32 => eval_as::<f32>(checkpoint),
        Precision::F64 => eval_as::<f64>(checkpoint),
    }
}

fn eval_as<T: Scalar>(checkpoint: &Path) -> Result<(f64, f64), CliError> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let config = run_config_of(&ck.run)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let data = load_data(&config, dir, false)?;
    let idx: Vec<usize> = (0..data.test.len()).collect();
    evaluate(&ck.model, &data.test, &idx, config.train.label_smoothing)
}
