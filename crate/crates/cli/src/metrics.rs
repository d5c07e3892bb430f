//! Append-only CSV metrics.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate_alpha_core::layers::LayerRates;

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    /// One entry per layer when rate diagnostics ran for this row.
    pub rates: Option<Vec<LayerRates>>,
    pub wall_seconds: f64,
}

/// Column names for a model with `depth` layers.
pub fn header(depth: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["step", "epoch", "split", "loss", "accuracy", "lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in 0..depth {
        cols.push(format!("r_{l}"));
        cols.push(format!("rc_{l}"));
        cols.push(format!("l0_fraction_{l}"));
    }
    cols.push("wall_seconds".into());
    cols
}

/// Comment line with everything needed to reproduce the numbers below it.
pub fn provenance(config: &RunConfig) -> String {
    let t = &config.train;
    let clip = t.grad_clip.map_or("none".to_string(), |c| c.to_string());
    format!(
        "# seed={} precision={} version={} variant={} base_lr={} min_lr={} weight_decay={} beta1={} beta2={} eps={} \
         label_smoothing={} grad_clip={} warmup_epochs={} total_epochs={} batch_size={} max_steps={} \
         epsilon={} lambda={}",
        t.seed,
        config.precision,
        VERSION,
        config.model.variant.short_name(),
        t.base_lr,
        t.min_lr,
        t.weight_decay,
        t.betas.0,
        t.betas.1,
        t.eps_opt,
        t.label_smoothing,
        clip,
        t.warmup_epochs,
        t.total_epochs,
        t.batch_size,
        t.max_steps.map_or("none".to_string(), |s| s.to_string()),
        config.diagnostics.rates.epsilon,
        config.diagnostics.rates.lambda,
    )
}

impl MetricsRow {
    pub fn to_csv(&self, depth: usize) -> String {
        let mut f = vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.split.to_string(),
            format!("{:.8}", self.loss),
            format!("{:.6}", self.accuracy),
            format!("{:.6e}", self.lr),
        ];
        for l in 0..depth {
            match self.rates.as_ref().and_then(|r| r.get(l)) {
                Some(r) => {
                    f.push(format!("{:.6}", r.r));
                    f.push(format!("{:.6}", r.rc));
                    f.push(format!("{:.6}", r.l0_fraction));
                }
                None => f.extend(std::iter::repeat(String::new()).take(3)),
            }
        }
        f.push(format!("{:.3}", self.wall_seconds));
        f.join(",")
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    depth: usize,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh file with the comment and header lines.
    pub fn create(path: &Path, config: &RunConfig) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", provenance(config))?;
        writeln!(out, "{}", header(config.model.depth).join(","))?;
        out.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            depth: config.model.depth,
            out,
        })
    }

    /// Reopens an existing file for a resumed run, dropping rows logged
    /// after `step` by the interrupted run.
    pub fn resume(path: &Path, config: &RunConfig, step: u64) -> std::io::Result<Self> {
        let Ok(text) = fs::read_to_string(path) else {
            return Self::create(path, config);
        };
        let kept: Vec<&str> = text
            .lines()
            .filter(|line| {
                line.starts_with('#')
                    || line
                        .split(',')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .map_or(true, |s| s <= step)
            })
            .collect();
        fs::write(path, kept.join("\n") + "\n")?;
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self {
            path: path.to_path_buf(),
            depth: config.model.depth,
            out,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.to_csv(self.depth))?;
        self.out.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
