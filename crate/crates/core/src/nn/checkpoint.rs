//! Binary checkpoint container.
//!
//! ```text
//! magic          8 bytes   "SPHGCKPT"
//! version        u32 LE
//! header_len     u32 LE
//! header         header_len bytes of UTF-8 `key=value` lines, keys sorted
//! tensor_count   u32 LE
//! per tensor:
//!   name_len     u32 LE
//!   name         name_len bytes UTF-8
//!   ndim         u32 LE
//!   dims         ndim × u64 LE
//!   values       prod(dims) × f64 LE
//! ```
//!
//! The header always carries `layer_dims`, `dropout_rate`, `use_batchnorm`,
//! `activation` and `rng_seed`; callers may add keys through
//! [`Checkpoint::meta`]. Tensors follow the model's declaration order, with
//! each batchnorm layer's running mean and variance after its γ and β.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Activation, BatchNorm, Dense, MlpConfig, MlpModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"SPHGCKPT";
pub const FORMAT_VERSION: u32 = 1;

const RESERVED: [&str; 5] = ["layer_dims", "dropout_rate", "use_batchnorm", "activation", "rng_seed"];

/// A model plus free-form header metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub meta: BTreeMap<String, String>,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn tensors_of(model: &MlpModel) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        out.push(Tensor {
            name: format!("layer{l}.weight"),
            dims: vec![layer.weight.rows(), layer.weight.cols()],
            values: layer.weight.as_slice().to_vec(),
        });
        out.push(Tensor {
            name: format!("layer{l}.bias"),
            dims: vec![layer.bias.len()],
            values: layer.bias.clone(),
        });
        if let Some(Some(bn)) = model.norms.get(l) {
            for (suffix, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push(Tensor {
                    name: format!("layer{l}.bn.{suffix}"),
                    dims: vec![v.len()],
                    values: v.clone(),
                });
            }
        }
    }
    out
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = &ckpt.model.config;
    let mut header = BTreeMap::new();
    for (k, v) in &ckpt.meta {
        if RESERVED.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("unusable checkpoint header key `{k}`")));
        }
        header.insert(k.clone(), v.clone());
    }
    header.insert(
        "layer_dims".into(),
        cfg.layer_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    header.insert("dropout_rate".into(), cfg.dropout_rate.to_string());
    header.insert("use_batchnorm".into(), cfg.use_batchnorm.to_string());
    header.insert("activation".into(), "relu".into());
    header.insert("rng_seed".into(), ckpt.model.rng_seed.to_string());
    let header_text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(header_text.as_bytes());
    let tensors = tensors_of(&ckpt.model);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::invalid("checkpoint text is not UTF-8"))
    }
}

fn mismatch(expected: impl Into<String>, found: impl Into<String>) -> Error {
    Error::ArtifactMismatch {
        artifact: "checkpoint".into(),
        expected: expected.into(),
        found: found.into(),
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(mismatch(
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(magic),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(mismatch(
            format!("format version {FORMAT_VERSION}"),
            format!("format version {version}"),
        ));
    }
    let header_len = r.u32()? as usize;
    let header_text = r.string(header_len)?;
    let mut meta = BTreeMap::new();
    for line in header_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("bad checkpoint header line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let mut take_meta = |k: &str| {
        meta.remove(k)
            .ok_or_else(|| Error::invalid(format!("checkpoint header lacks `{k}`")))
    };
    let layer_dims = take_meta("layer_dims")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::invalid("bad layer_dims in checkpoint"))?;
    let dropout_rate: f64 = take_meta("dropout_rate")?
        .parse()
        .map_err(|_| Error::invalid("bad dropout_rate in checkpoint"))?;
    let use_batchnorm: bool = take_meta("use_batchnorm")?
        .parse()
        .map_err(|_| Error::invalid("bad use_batchnorm in checkpoint"))?;
    let activation = take_meta("activation")?;
    if activation != "relu" {
        return Err(mismatch("activation relu", format!("activation {activation}")));
    }
    let rng_seed: u64 = take_meta("rng_seed")?
        .parse()
        .map_err(|_| Error::invalid("bad rng_seed in checkpoint"))?;
    let config = MlpConfig {
        layer_dims,
        dropout_rate,
        use_batchnorm,
        activation: Activation::Relu,
    };
    config.validate()?;

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::invalid("tensor too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after checkpoint tensors"));
    }

    let mut take = |name: String, dims: Vec<usize>| -> Result<Vec<f64>> {
        let (found_dims, values) = tensors
            .remove(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
        if found_dims != dims {
            return Err(mismatch(format!("{name} shape {dims:?}"), format!("{name} shape {found_dims:?}")));
        }
        Ok(values)
    };
    let mut layers = Vec::new();
    let mut norms = Vec::new();
    for (l, w) in config.layer_dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = Matrix::from_vec(fan_out, fan_in, take(format!("layer{l}.weight"), vec![fan_out, fan_in])?)?;
        let bias = take(format!("layer{l}.bias"), vec![fan_out])?;
        layers.push(Dense { weight, bias });
        if l < config.num_hidden() {
            norms.push(if use_batchnorm {
                Some(BatchNorm {
                    gamma: take(format!("layer{l}.bn.gamma"), vec![fan_out])?,
                    beta: take(format!("layer{l}.bn.beta"), vec![fan_out])?,
                    running_mean: take(format!("layer{l}.bn.running_mean"), vec![fan_out])?,
                    running_var: take(format!("layer{l}.bn.running_var"), vec![fan_out])?,
                })
            } else {
                None
            });
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::invalid(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    let model = MlpModel {
        config,
        layers,
        norms,
        rng_seed,
    };
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoints_round_trip_bit_exactly(
            dims in prop::collection::vec(1usize..6, 2..5),
            bn in any::<bool>(),
            seed in any::<u64>(),
            dropout in 0.0f64..0.9,
        ) {
            let mut cfg = MlpConfig::new(dims);
            cfg.use_batchnorm = bn;
            cfg.dropout_rate = dropout;
            let mut model = init_model(&cfg, seed).unwrap();
            for bn in model.norms.iter_mut().flatten() {
                bn.running_var.iter_mut().for_each(|v| *v = 0.3);
            }
            let mut meta = BTreeMap::new();
            meta.insert("role".to_string(), "stage1".to_string());
            let ckpt = Checkpoint { model, meta };
            let bytes = write_checkpoint(&ckpt).unwrap();
            let back = read_checkpoint(&bytes).unwrap();
            prop_assert_eq!(&back, &ckpt);
            prop_assert_eq!(write_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn wrong_version_names_both_sides() {
        let model = init_model(&MlpConfig::new(vec![2, 2]), 0).unwrap();
        let mut bytes = write_checkpoint(&Checkpoint { model, meta: BTreeMap::new() }).unwrap();
        bytes[8] = 9;
        let err = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("format version 1") && err.contains("format version 9"), "{err}");
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let model = init_model(&MlpConfig::new(vec![2, 3, 2]), 0).unwrap();
        let bytes = write_checkpoint(&Checkpoint { model, meta: BTreeMap::new() }).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(b"not a checkpoint at all").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
    }

    #[test]
    fn reserved_meta_keys_are_refused() {
        let model = init_model(&MlpConfig::new(vec![2, 2]), 0).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("layer_dims".to_string(), "1".to_string());
        assert!(write_checkpoint(&Checkpoint { model, meta }).is_err());
    }
}
