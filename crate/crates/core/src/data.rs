//! Datasets: CIFAR-10 binary batches and synthetic union-of-subspaces tokens.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::model::{InputBatch, InputSpec};
use crate::numerics::{orthonormal_columns, Matrix, Rng, Scalar};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
/// Zero padding used by the random-crop augmentation.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// In-memory labeled samples, each stored flat as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input: InputSpec,
    pub num_classes: usize,
    pub samples: Vec<f32>,
    pub labels: Vec<usize>,
}

/// A batch ready for the model.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub inputs: InputBatch<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.input.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a batch. With `augment`, image samples get a
    /// random crop from the zero-padded image and a random horizontal flip.
    pub fn batch<T: Scalar>(&self, indices: &[usize], mut augment: Option<&mut Rng>) -> LabeledBatch<T> {
        let n = self.input.sample_len();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            let s = self.sample(i);
            match (self.input, augment.as_deref_mut()) {
                (
                    InputSpec::Image {
                        image_side, channels, ..
                    },
                    Some(rng),
                ) => {
                    let dy = rng.below(2 * CROP_PAD + 1);
                    let dx = rng.below(2 * CROP_PAD + 1);
                    let flip = rng.coin();
                    let img = crop_flip(s, channels, image_side, dy, dx, flip);
                    data.extend(img.into_iter().map(|x| T::of(x as f64)));
                }
                _ => data.extend(s.iter().map(|&x| T::of(x as f64))),
            }
        }
        LabeledBatch {
            inputs: InputBatch::new(data, indices.len()),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.samples.truncate(n * self.input.sample_len());
            self.labels.truncate(n);
        }
    }

    pub fn to_container(&self) -> Result<Container<f32>> {
        let header = serde_json::json!({
            "kind": "dataset",
            "input": serde_json::to_value(self.input)?,
            "num_classes": self.num_classes,
        });
        let mut c = Container::new(header);
        let mut dims = vec![self.len()];
        dims.extend(match self.input {
            InputSpec::Image {
                image_side, channels, ..
            } => vec![channels, image_side, image_side],
            InputSpec::Tokens { dim, count } => vec![dim, count],
        });
        c.push("samples", Tensor::new(dims, self.samples.clone())?);
        c.push(
            "labels",
            Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect())?,
        );
        Ok(c)
    }

    pub fn from_container(c: &Container<f32>) -> Result<Self> {
        if c.header.get("kind").and_then(|v| v.as_str()) != Some("dataset") {
            return Err(Error::Format("container is not a dataset".into()));
        }
        let input: InputSpec = serde_json::from_value(c.header["input"].clone())?;
        let num_classes = c.header["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::Format("dataset header lacks num_classes".into()))?
            as usize;
        let samples = c
            .get("samples")
            .ok_or_else(|| Error::Format("missing samples".into()))?;
        let labels = c.get("labels").ok_or_else(|| Error::Format("missing labels".into()))?;
        let labels: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
        if samples.data.len() != labels.len() * input.sample_len() || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Format("dataset tensors are inconsistent".into()));
        }
        Ok(Self {
            input,
            num_classes,
            samples: samples.data.clone(),
            labels,
        })
    }
}

/// Crop at offset `(dy, dx)` of the image padded by [`CROP_PAD`] zeros, then
/// optionally mirror left-right.
pub fn crop_flip(image: &[f32], channels: usize, side: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..side {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                let tx = if flip { side - 1 - x } else { x };
                out[(c * side + y) * side + tx] = image[(c * side + sy as usize) * side + sx as usize];
            }
        }
    }
    out
}

/// Epoch order: a permutation determined by `(seed, epoch)` alone.
pub fn shuffle(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).split(0x5eed_0000 + epoch).shuffle(&mut order);
    order
}

/// Decodes one CIFAR-10 record into its label and unit-interval pixels.
pub fn decode_record(record: &[u8]) -> std::result::Result<(usize, Vec<f32>), String> {
    if record.len() != CIFAR_RECORD {
        return Err(format!("record of {} bytes, expected {CIFAR_RECORD}", record.len()));
    }
    let label = record[0] as usize;
    if label >= CIFAR_CLASSES {
        return Err(format!("label byte {label} outside 0..{CIFAR_CLASSES}"));
    }
    Ok((label, record[1..].iter().map(|&b| b as f32 / 255.0).collect()))
}

fn cifar_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    }
}

/// Directory holding the binary batches: `dir` itself or its
/// `cifar-10-batches-bin` child.
pub fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.join("test_batch.bin").exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Reads a CIFAR-10 split into memory with pixels in `[0, 1]`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let dir = cifar_dir(dir);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for name in cifar_files(split) {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            offset: 0,
            detail: e.to_string(),
        })?;
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        if whole != bytes.len() || bytes.is_empty() {
            return Err(Error::Data {
                path: path.display().to_string(),
                offset: whole as u64,
                detail: format!("truncated: {} bytes is not a whole number of records", bytes.len()),
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let (label, px) = decode_record(record).map_err(|detail| Error::Data {
                path: path.display().to_string(),
                offset: (r * CIFAR_RECORD) as u64,
                detail,
            })?;
            labels.push(label);
            samples.extend(px);
        }
    }
    Ok(Dataset {
        input: InputSpec::Image {
            image_side: CIFAR_SIDE,
            channels: CIFAR_CHANNELS,
            patch: 4,
        },
        num_classes: CIFAR_CLASSES,
        samples,
        labels,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(data: &Dataset) -> Result<Self> {
        let InputSpec::Image {
            image_side, channels, ..
        } = data.input
        else {
            return Err(Error::Input("normalization statistics need image data".into()));
        };
        let plane = image_side * image_side;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for i in 0..data.len() {
            let s = data.sample(i);
            for c in 0..channels {
                for &x in &s[c * plane..(c + 1) * plane] {
                    sum[c] += x as f64;
                    sq[c] += x as f64 * x as f64;
                }
            }
        }
        let n = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, std })
    }

    /// Maps every pixel to `(x − mean_c) / std_c` in place.
    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let InputSpec::Image {
            image_side, channels, ..
        } = data.input
        else {
            return Err(Error::Input("normalization needs image data".into()));
        };
        if channels != self.mean.len() {
            return Err(Error::Input(format!(
                "{} channel stats for {channels} channels",
                self.mean.len()
            )));
        }
        let plane = image_side * image_side;
        for (k, x) in data.samples.iter_mut().enumerate() {
            let c = (k / plane) % channels;
            *x = ((*x as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        format!("mean {}\nstd {}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let vals = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad number {p:?} in stats")))
                })
                .collect::<Result<Vec<_>>>()?;
            match key {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                other => return Err(Error::Format(format!("unknown stats key {other:?}"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Self { mean, std }),
            _ => Err(Error::Format("stats need matching mean and std lines".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceDatasetSpec {
    pub k_true: usize,
    pub ambient: usize,
    pub subspace_dim: usize,
    pub noise_sigma: f64,
    pub tokens_per_sample: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SubspaceDatasetSpec {
    fn default() -> Self {
        Self {
            k_true: 4,
            ambient: 64,
            subspace_dim: 4,
            noise_sigma: 0.05,
            tokens_per_sample: 8,
            samples: 2048,
            seed: 0,
        }
    }
}

impl SubspaceDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.tokens_per_sample == 0 {
            return Err(Error::Config("k_true and tokens_per_sample must be positive".into()));
        }
        if self.subspace_dim == 0 || self.subspace_dim >= self.ambient {
            return Err(Error::Config(format!(
                "subspace_dim {} must lie in 1..ambient ({})",
                self.subspace_dim, self.ambient
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn input(&self) -> InputSpec {
        InputSpec::Tokens {
            dim: self.ambient,
            count: self.tokens_per_sample,
        }
    }
}

/// Generated samples with their ground-truth bases.
#[derive(Clone, Debug)]
pub struct SubspaceData {
    pub bases: Vec<Matrix<f64>>,
    /// Each `ambient × tokens_per_sample`.
    pub tokens: Vec<Matrix<f64>>,
    pub labels: Vec<usize>,
}

impl SubspaceData {
    pub fn to_dataset(&self, spec: &SubspaceDatasetSpec) -> Dataset {
        Dataset {
            input: spec.input(),
            num_classes: spec.k_true,
            samples: self
                .tokens
                .iter()
                .flat_map(|m| m.as_slice().iter().map(|&x| x as f32))
                .collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Samples `k_true` orthonormal bases, then for each sample a label `k` and
/// tokens `B_k c + σ n` with standard Gaussian `c` and `n`.
pub fn gen_subspace_data(spec: &SubspaceDatasetSpec) -> Result<SubspaceData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut basis_rng = root.split(1);
    let bases = (0..spec.k_true)
        .map(|_| orthonormal_columns(&basis_rng.normal_matrix(spec.ambient, spec.subspace_dim, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = root.split(2);
    let mut tokens = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let k = rng.below(spec.k_true);
        let coeffs: Matrix<f64> = rng.normal_matrix(spec.subspace_dim, spec.tokens_per_sample, 1.0);
        let mut x = bases[k].matmul(&coeffs)?;
        if spec.noise_sigma > 0.0 {
            let noise: Matrix<f64> = rng.normal_matrix(spec.ambient, spec.tokens_per_sample, spec.noise_sigma);
            x.add_assign(&noise)?;
        }
        tokens.push(x);
        labels.push(k);
    }
    Ok(SubspaceData { bases, tokens, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_decoding() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        rec[2] = 51;
        let (label, px) = decode_record(&rec).unwrap();
        assert_eq!(label, 7);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1], 0.2);
        rec[0] = 255;
        assert!(decode_record(&rec).is_err());
        assert!(decode_record(&rec[..100]).is_err());
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
    }

    #[test]
    fn shuffle_is_pure() {
        assert_eq!(shuffle(1, 2, 50), shuffle(1, 2, 50));
        assert_ne!(shuffle(1, 2, 50), shuffle(1, 3, 50));
        let mut s = shuffle(4, 0, 100);
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn crop_without_offset_or_flip_is_identity() {
        let img: Vec<f32> = (0..2 * 6 * 6).map(|x| x as f32).collect();
        assert_eq!(crop_flip(&img, 2, 6, CROP_PAD, CROP_PAD, false), img);
        let flipped = crop_flip(&img, 2, 6, CROP_PAD, CROP_PAD, true);
        assert_eq!(flipped[0], img[5]);
        let shifted = crop_flip(&img, 2, 6, CROP_PAD + 1, CROP_PAD, false);
        assert_eq!(shifted[0], img[6]);
        assert_eq!(shifted[5 * 6], 0.0);
    }

    #[test]
    fn stats_text_round_trip() {
        let s = NormStats {
            mean: vec![0.49, 0.48, 0.45],
            std: vec![0.25, 0.24, 0.26],
        };
        assert_eq!(NormStats::from_text(&s.to_text()).unwrap(), s);
        assert!(NormStats::from_text("mean 1 2\n").is_err());
    }
}
