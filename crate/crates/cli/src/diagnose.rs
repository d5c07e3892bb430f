//! Read-only inspection of a checkpoint: per-layer rates and attention maps.

use std::fs;
use std::path::{Path, PathBuf};

use crate_alpha_core::container::{peek_precision, Checkpoint, Container, Tensor};
use crate_alpha_core::model::ModelState;
use crate_alpha_core::{Matrix, Precision, Scalar};
use serde_json::json;

use crate::train::{load_data, rate_diagnostics, run_config_of};
use crate::CliError;

pub const SRR_FILE: &str = "srr_layers.csv";
pub const ATTENTION_FILE: &str = "attention.cra";

#[derive(Clone, Debug)]
pub struct DiagnoseOptions {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    /// Layers to export attention for; empty means all.
    pub layers: Vec<usize>,
    /// Held-out samples averaged in the rate table.
    pub samples: usize,
    /// Held-out sample whose attention maps are exported.
    pub sample: usize,
}

pub struct DiagnoseOutput {
    pub srr_csv: PathBuf,
    pub attention: PathBuf,
    pub mean_rc: Vec<f64>,
}

/// Parses `"0,3,11"` into layer indices.
pub fn parse_layers(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad layer index {s:?} in --layers")))
        })
        .collect()
}

pub fn diagnose(opts: &DiagnoseOptions) -> Result<DiagnoseOutput, CliError> {
    let bytes = fs::read(&opts.checkpoint)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", opts.checkpoint.display())))?;
    match peek_precision(&bytes)? {
        Precision::F32 => diagnose_as::<f32>(opts, &bytes),
        Precision::F64 => diagnose_as::<f64>(opts, &bytes),
    }
}

fn diagnose_as<T: Scalar>(opts: &DiagnoseOptions, bytes: &[u8]) -> Result<DiagnoseOutput, CliError> {
    let ck = Checkpoint::<T>::from_container(&Container::from_bytes(bytes)?)?;
    let config = run_config_of(&ck.run)?;
    let depth = ck.model.config().depth;
    let layers = if opts.layers.is_empty() {
        (0..depth).collect()
    } else {
        opts.layers.clone()
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= depth) {
        return Err(CliError::Usage(format!("layer {l} out of range for depth {depth}")));
    }
    let dir = opts.checkpoint.parent().unwrap_or(Path::new("."));
    let data = load_data(&config, dir, false)?;
    if opts.sample >= data.test.len() {
        return Err(CliError::Usage(format!("sample {} out of range", opts.sample)));
    }
    let rates = rate_diagnostics(&ck.model, &data.test, opts.samples, &config.diagnostics.rates)?;
    fs::create_dir_all(&opts.out_dir)?;

    let mut csv = String::from("layer,r,rc,l1,srr,l0_fraction\n");
    for (l, r) in rates.iter().enumerate() {
        csv.push_str(&format!(
            "{l},{:.8},{:.8},{:.8},{:.8},{:.6}\n",
            r.r, r.rc, r.l1, r.srr, r.l0_fraction
        ));
    }
    let srr_csv = opts.out_dir.join(SRR_FILE);
    fs::write(&srr_csv, csv)?;

    let attention = opts.out_dir.join(ATTENTION_FILE);
    attention_container(
        &ck.model,
        &data.test.batch::<T>(&[opts.sample], None).inputs,
        &layers,
        opts,
    )?
    .save(&attention)?;
    Ok(DiagnoseOutput {
        srr_csv,
        attention,
        mean_rc: rates.iter().map(|r| r.rc).collect(),
    })
}

/// `layer{l}.attention` is `K × N × N` with column `j` the distribution of
/// query token `j` over keys; `layer{l}.cls_attention` is the class token's
/// distribution over patches as `K × g × g`.
fn attention_container<T: Scalar>(
    model: &ModelState<T>,
    input: &crate_alpha_core::model::InputBatch<T>,
    layers: &[usize],
    opts: &DiagnoseOptions,
) -> Result<Container<T>, CliError> {
    let cfg = model.config();
    let trace = model.forward(input, Some(&Default::default()))?;
    let mut c = Container::new(json!({
        "kind": "attention",
        "checkpoint": opts.checkpoint.display().to_string(),
        "sample": opts.sample,
        "layers": layers,
        "tokens": cfg.tokens_per_sample(),
        "heads": cfg.heads,
    }));
    for &l in layers {
        let heads: Vec<Matrix<T>> = trace.layers[l].attention.iter().map(|h| h[0].clone()).collect();
        c.push(format!("layer{l}.attention"), Tensor::stack(&heads)?);
        if let (true, Some(g)) = (cfg.use_cls_token, cfg.input.grid_side()) {
            let grids: Vec<Matrix<T>> = heads
                .iter()
                .map(|a| Matrix::from_fn(g, g, |gy, gx| a[(1 + gy * g + gx, 0)]))
                .collect();
            c.push(format!("layer{l}.cls_attention"), Tensor::stack(&grids)?);
        }
    }
    Ok(c)
}
