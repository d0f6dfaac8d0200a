//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "RATTNCK1"
//! 4 bytes   u32 header length H
//! H bytes   UTF-8 header
//! rest      f32 parameter data, concatenated in manifest order
//! ```
//!
//! The header is line-oriented: model configuration as `key = value`
//! lines, free-form metadata as `meta.<name> = value`, then one
//! `param <name> <d0>x<d1>...` line per tensor in data order. Loading
//! validates the manifest against the layout implied by the configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvconfig::KvDoc;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RATTNCK1";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub meta: Vec<(String, String)>,
}

fn dims_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Serializes parameters as 32-bit floats.
pub fn to_bytes<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<Tensor<T>>, meta: &[(String, String)]) -> Result<Vec<u8>> {
    let layout = cfg.param_layout();
    let named = params.named();
    if layout.len() != named.len() {
        return Err(Error::Format(format!(
            "{} tensors for a layout of {}",
            named.len(),
            layout.len()
        )));
    }
    let mut header = cfg.to_kv();
    for (k, v) in meta {
        if k.contains(['=', '\n', '#']) || v.contains(['\n', '#']) {
            return Err(Error::Format(format!("metadata `{k}` is not representable")));
        }
        let _ = writeln!(header, "meta.{k} = {v}");
    }
    for ((name, shape), (pname, t)) in layout.iter().zip(&named) {
        if name != pname || shape.as_slice() != t.shape() {
            return Err(Error::Format(format!("tensor `{pname}` {:?} does not match layout", t.shape())));
        }
        let _ = writeln!(header, "param {name} {}", dims_str(shape));
    }
    let total: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    let hlen = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;

    let mut kv = String::new();
    let mut manifest = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, dims) = rest
                .rsplit_once(' ')
                .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad dims in `{line}`")))?;
            manifest.push((name.to_string(), shape));
        } else {
            kv.push_str(line);
            kv.push('\n');
        }
    }
    let mut doc = KvDoc::parse(&kv)?;
    let meta = doc
        .take_prefixed("meta.")
        .into_iter()
        .map(|(k, v)| (k["meta.".len()..].to_string(), v))
        .collect();
    let mut config = ModelConfig::desk(16);
    config.apply_kv(&mut doc)?;
    doc.finish()?;
    config.validate()?;
    let layout = config.param_layout();
    if layout != manifest {
        return Err(Error::Format("parameter manifest does not match the configuration".into()));
    }

    let mut data = &bytes[12 + hlen..];
    let mut values = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let n: usize = shape.iter().product();
        if data.len() < 4 * n {
            return Err(Error::Format(format!("truncated data in `{name}`")));
        }
        let vals: Vec<f32> = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[4 * n..];
        values.push(Tensor::new(shape, vals)?);
    }
    if !data.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", data.len())));
    }
    Ok(Checkpoint {
        params: ModelParams::from_values(&config, values)?,
        config,
        meta,
    })
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<T>>,
    meta: &[(String, String)],
) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, params, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
