#![allow(dead_code)]

use std::path::Path;

use crate_alpha_cli::config::{DataConfig, RunConfig};
use crate_alpha_core::data::SubspaceDatasetSpec;
use crate_alpha_core::model::{InputSpec, ModelConfig, SizeName};
use crate_alpha_core::Precision;

pub const BIN: &str = env!("CARGO_BIN_EXE_crate-alpha");

/// Four classes of 8 tokens in 64 dimensions, each on a 4-dimensional subspace.
pub fn subspace_spec(samples: usize) -> SubspaceDatasetSpec {
    SubspaceDatasetSpec {
        k_true: 4,
        ambient: 64,
        subspace_dim: 4,
        noise_sigma: 0.05,
        tokens_per_sample: 8,
        samples,
        seed: 0,
    }
}

/// Tiny widths on token input with mean pooling.
pub fn tiny_on_tokens(spec: &SubspaceDatasetSpec) -> ModelConfig {
    ModelConfig {
        input: InputSpec::Tokens {
            dim: spec.ambient,
            count: spec.tokens_per_sample,
        },
        num_classes: spec.k_true,
        use_cls_token: false,
        ..ModelConfig::preset(SizeName::Tiny)
    }
}

/// Two narrow layers, for tests that only exercise plumbing.
pub fn small_on_tokens(spec: &SubspaceDatasetSpec) -> ModelConfig {
    ModelConfig {
        size_name: SizeName::Custom,
        depth: 2,
        width: 32,
        heads: 2,
        ..tiny_on_tokens(spec)
    }
}

pub fn subspace_run(model: ModelConfig, spec: SubspaceDatasetSpec, steps: usize, out: &Path) -> RunConfig {
    let mut c = RunConfig {
        model,
        data: DataConfig::Subspace {
            spec,
            test_samples: 256,
        },
        precision: Precision::F32,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    c.train.batch_size = 16;
    c.train.base_lr = 1e-3;
    c.train.max_steps = Some(steps);
    c.train.total_epochs = 20;
    c.train.warmup_epochs = 1;
    c.diagnostics.log_every = 10;
    c.diagnostics.train_eval_samples = 256;
    c
}
