//! Binary tensor container shared by checkpoints, datasets and diagnostic
//! exports.
//!
//! Layout: `b"CRA1"`, version (`u32` LE), header length (`u64` LE) and a
//! canonical JSON header, then tensors until end of file. Each tensor is its
//! name length (`u32`), UTF-8 name, rank (`u32`), dims (`u64` each) and the
//! little-endian payload. The header's `dtype` key names the payload type.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{Matrix, Precision, Scalar};
use crate::optim::OptState;

pub const MAGIC: &[u8; 4] = b"CRA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<T>> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(Error::Format(format!(
                "rank-{} tensor is not a matrix",
                self.dims.len()
            ))),
        }
    }

    /// Stacks equally shaped matrices into a rank-3 tensor.
    pub fn stack(ms: &[Matrix<T>]) -> Result<Self> {
        let (r, c) = ms.first().map(Matrix::shape).unwrap_or((0, 0));
        if ms.iter().any(|m| m.shape() != (r, c)) {
            return Err(Error::Format("stacked matrices differ in shape".into()));
        }
        let data = ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Ok(Self {
            dims: vec![ms.len(), r, c],
            data,
        })
    }
}

/// A header plus named tensors of one scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub header: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated at byte {} (wanted {n} more)", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().expect("8 bytes")))
}

fn parse_header(bytes: &[u8]) -> Result<(Value, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad magic: not a tensor container".into()));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let len = read_u64(bytes, &mut pos)? as usize;
    let header: Value = serde_json::from_slice(take(bytes, &mut pos, len)?)?;
    Ok((header, pos))
}

/// Payload type recorded in a container's header.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let (header, _) = parse_header(bytes)?;
    match header.get("dtype").and_then(Value::as_str) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => Err(Error::Format(format!("unknown dtype {other:?}"))),
    }
}

impl<T: Scalar> Container<T> {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = match &self.header {
            Value::Object(m) => m.clone(),
            Value::Null => Default::default(),
            _ => return Err(Error::Format("container header must be a JSON object".into())),
        };
        header.insert("dtype".into(), Value::String(T::PRECISION.to_string()));
        let text = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(16 + text.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut header, mut pos) = parse_header(bytes)?;
        let dtype = header.get("dtype").and_then(Value::as_str).unwrap_or("");
        if dtype != T::PRECISION.to_string() {
            return Err(Error::Format(format!(
                "payload dtype {dtype:?} does not match requested {}",
                T::PRECISION
            )));
        }
        if let Value::Object(m) = &mut header {
            m.remove("dtype");
        }
        let mut tensors = Vec::new();
        while pos < bytes.len() {
            let n = read_u32(bytes, &mut pos)? as usize;
            let name = String::from_utf8(take(bytes, &mut pos, n)?.to_vec())
                .map_err(|_| Error::Format(format!("tensor name at byte {pos} is not UTF-8")))?;
            let rank = read_u32(bytes, &mut pos)? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(bytes, &mut pos).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: dims {dims:?} overflow")))?;
            let raw = take(bytes, &mut pos, count.checked_mul(T::BYTES).unwrap_or(usize::MAX))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor { dims, data }));
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Training position stored with a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: u64,
}

/// Model, optimizer moments and the surrounding run description.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    /// Free-form run description (the CLI stores its full run config).
    pub run: Value,
    pub progress: Progress,
    pub model: ModelState<T>,
    pub opt: Option<OptState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container<T>> {
        let header = serde_json::json!({
            "kind": "checkpoint",
            "model": serde_json::to_value(self.model.config())?,
            "progress": serde_json::to_value(self.progress)?,
            "run": self.run,
        });
        let mut c = Container::new(header);
        for (spec, p) in self.model.specs().iter().zip(self.model.params()) {
            c.push(spec.name.clone(), Tensor::from_matrix(p));
        }
        if let Some(opt) = &self.opt {
            c.header["opt_step"] = Value::from(opt.step);
            for (spec, m) in self.model.specs().iter().zip(&opt.m) {
                c.push(format!("opt.m.{}", spec.name), Tensor::from_matrix(m));
            }
            for (spec, v) in self.model.specs().iter().zip(&opt.v) {
                c.push(format!("opt.v.{}", spec.name), Tensor::from_matrix(v));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.header.get("kind").and_then(Value::as_str) != Some("checkpoint") {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let config: ModelConfig = field(&c.header, "model")?;
        let progress: Progress = field(&c.header, "progress")?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in &c.tensors {
            let mat = t.to_matrix()?;
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.push((rest.to_string(), mat));
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.push((rest.to_string(), mat));
            } else {
                params.push((name.clone(), mat));
            }
        }
        let model = ModelState::from_named(&config, params)?;
        let opt = match c.header.get("opt_step").and_then(Value::as_u64) {
            Some(step) => {
                let order = |mut named: Vec<(String, Matrix<T>)>| -> Result<Vec<Matrix<T>>> {
                    model
                        .specs()
                        .iter()
                        .map(|s| {
                            let i = named
                                .iter()
                                .position(|(n, _)| *n == s.name)
                                .ok_or_else(|| Error::Format(format!("missing optimizer moment for {}", s.name)))?;
                            Ok(named.swap_remove(i).1)
                        })
                        .collect()
                };
                Some(OptState {
                    m: order(m)?,
                    v: order(v)?,
                    step,
                })
            }
            None => None,
        };
        Ok(Self {
            run: c.header.get("run").cloned().unwrap_or(Value::Null),
            progress,
            model,
            opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn field<D: DeserializeOwned>(header: &Value, key: &str) -> Result<D> {
    let v = header
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint header lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}
