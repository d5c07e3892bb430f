mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{small_on_tokens, subspace_run, subspace_spec, tiny_on_tokens, BIN};
use crate_alpha_cli::config::{DataConfig, RunConfig};
use crate_alpha_cli::diagnose::{diagnose, DiagnoseOptions};
use crate_alpha_cli::train::{ablate, train, FINAL_CHECKPOINT, METRICS_FILE, NORM_STATS_FILE};
use crate_alpha_cli::CliError;
use crate_alpha_core::container::{Checkpoint, Container};
use crate_alpha_core::data::{CIFAR_PIXELS, CIFAR_RECORD};
use crate_alpha_core::layers::BlockVariant;
use crate_alpha_core::model::{InputSpec, ModelConfig, SizeName};

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join("run.json");
    fs::write(&path, config.canonical_json()).unwrap();
    path.display().to_string()
}

#[test]
fn paramcount_breakdown_sums_to_total() {
    let out = run(&["paramcount", "--size", "small", "--variant", "ocd"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut parts = 0;
    let mut total = 0;
    for line in text.lines().skip(1) {
        let mut it = line.split_whitespace();
        let (name, n) = (it.next().unwrap(), it.next().unwrap().parse::<u64>().unwrap());
        if name == "total" {
            total = n;
        } else {
            parts += n;
        }
    }
    assert!(total > 0);
    assert_eq!(parts, total);
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(run(&["paramcount", "--size", "gigantic"]).status.code(), Some(2));
    assert_eq!(run(&["paramcount", "--variant", "ocx"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--precision", "f16"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_dataset_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = Command::new(BIN)
        .args(["train", "--out", dir.path().join("run").to_str().unwrap()])
        .env(crate_alpha_cli::config::DATA_ENV, &empty)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(BIN)
        .args(["train", "--out", dir.path().join("run2").to_str().unwrap()])
        .env_remove(crate_alpha_cli::config::DATA_ENV)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.cra");
    fs::write(&path, b"not a checkpoint at all").unwrap();
    let out = run(&["diagnose", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let out = run(&["eval", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn metrics_file_has_provenance_header_and_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(320);
    let config = subspace_run(small_on_tokens(&spec), spec, 40, dir.path());
    train(&config, None).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# seed=0 precision=f32"));
    assert_eq!(lines[1], crate_alpha_cli::metrics::header(2).join(","));
    // 20 steps per epoch: train rows every 10 steps, test rows at 20 and 40
    assert_eq!(lines.len(), 2 + 4 + 2);
    let splits: Vec<&str> = lines[2..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(splits, ["train", "train", "test", "train", "train", "test"]);
    assert!(!dir.path().join("train.lock").exists());
}

#[test]
fn locked_directory_refuses_a_second_trainer() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.lock"), "1").unwrap();
    let spec = subspace_spec(64);
    let config = subspace_run(small_on_tokens(&spec), spec, 2, dir.path());
    let err = train(&config, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(dir.path().join("train.lock").exists());
}

#[test]
fn mismatched_subspace_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(64);
    let mut config = subspace_run(small_on_tokens(&spec), spec, 2, dir.path());
    config.model.num_classes = 5;
    assert!(matches!(train(&config, None), Err(CliError::Usage(_))));
}

#[test]
fn checkpoint_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(64);
    let config = subspace_run(small_on_tokens(&spec), spec, 4, dir.path());
    train(&config, None).unwrap();
    let path = dir.path().join(FINAL_CHECKPOINT);
    let original = fs::read(&path).unwrap();
    let ck = Checkpoint::<f32>::load(&path).unwrap();
    let again = dir.path().join("again.cra");
    ck.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), original);
    assert_eq!(
        Container::<f32>::from_bytes(&original).unwrap().to_bytes().unwrap(),
        original
    );
}

#[test]
fn tiny_model_halves_its_loss_in_200_steps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(1024);
    let config = subspace_run(tiny_on_tokens(&spec), spec, 200, dir.path());
    let s = train(&config, None).unwrap();
    assert!(
        s.final_train_loss < 0.5 * s.initial_train_loss,
        "{} -> {}",
        s.initial_train_loss,
        s.final_train_loss
    );
}

#[test]
fn ablation_emits_four_comparable_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(64);
    let config = subspace_run(small_on_tokens(&spec), spec, 6, dir.path());
    let rows = ablate(&config).unwrap();
    assert_eq!(rows.iter().map(|r| r.variant).collect::<Vec<_>>(), BlockVariant::LADDER);
    assert!(rows.iter().all(|r| r.steps == 6));
    assert!(rows[2].params > rows[1].params);
    assert_eq!(rows[3].params, rows[2].params);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for v in BlockVariant::LADDER {
        assert!(dir.path().join(v.short_name()).join(METRICS_FILE).exists());
    }
}

fn write_cifar(dir: &Path, records: usize) {
    for name in [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ] {
        let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
        for r in 0..records {
            let label = (r % 2) as u8;
            bytes.push(label);
            bytes.extend((0..CIFAR_PIXELS).map(|i| {
                if label == 0 {
                    (i % 251) as u8
                } else {
                    255 - (i % 13) as u8
                }
            }));
        }
        fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn image_pipeline_trains_and_exports_cls_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fs::create_dir(&data).unwrap();
    write_cifar(&data, 8);
    let out = dir.path().join("run");
    let mut config = RunConfig {
        model: ModelConfig {
            size_name: SizeName::Custom,
            depth: 2,
            width: 24,
            heads: 2,
            input: InputSpec::Image {
                image_side: 32,
                channels: 3,
                patch: 8,
            },
            num_classes: 10,
            ..ModelConfig::preset(SizeName::Tiny)
        },
        data: DataConfig::Cifar10 {
            root: Some(data),
            train_limit: Some(32),
            test_limit: Some(8),
            augment: true,
        },
        out_dir: out.clone(),
        ..RunConfig::default()
    };
    config.train.batch_size = 8;
    config.train.max_steps = Some(8);
    let s = train(&config, None).unwrap();
    assert!(s.final_train_loss.is_finite());
    assert!(out.join(NORM_STATS_FILE).exists());

    let o = diagnose(&DiagnoseOptions {
        checkpoint: out.join(FINAL_CHECKPOINT),
        out_dir: dir.path().join("diag"),
        layers: vec![1],
        samples: 8,
        sample: 3,
    })
    .unwrap();
    let c = Container::<f32>::load(&o.attention).unwrap();
    assert!(c.get("layer0.attention").is_none());
    let a = c.get("layer1.attention").unwrap();
    assert_eq!(a.dims, vec![2, 17, 17]);
    for head in a.data.chunks(17 * 17) {
        for col in 0..17 {
            let s: f32 = (0..17).map(|r| head[r * 17 + col]).sum();
            assert!((s - 1.0).abs() < 1e-5, "{s}");
        }
    }
    assert_eq!(c.get("layer1.cls_attention").unwrap().dims, vec![2, 4, 4]);
    let csv = fs::read_to_string(&o.srr_csv).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = run(&["eval", "--checkpoint", out.join(FINAL_CHECKPOINT).to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test accuracy"));
}

#[test]
fn binary_trains_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = subspace_spec(64);
    let config = subspace_run(small_on_tokens(&spec), spec, 4, &dir.path().join("ignored"));
    let path = write_config(dir.path(), &config);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        &path,
        "--seed",
        "3",
        "--variant",
        "oc",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = RunConfig::load(&out_dir.join("config.json")).unwrap();
    assert_eq!(saved.train.seed, 3);
    assert_eq!(saved.model.variant, BlockVariant::OvercompleteIsta);
    assert!(out_dir.join(FINAL_CHECKPOINT).exists());
}
