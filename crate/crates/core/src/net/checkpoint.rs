//! Checkpoint file: an 8-byte magic, a little-endian u32 header length, a
//! UTF-8 manifest of `key value` lines (representation settings plus one
//! `tensor <name> <dtype> <dims...>` line per block), then the raw
//! little-endian tensor data in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Architecture, Classifier, ModelParams};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Projection};
use crate::kernel::{KernelKind, KernelParams, MlpKernel, MLP_PARAM_COUNT};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVADVCK1";

pub fn write_checkpoint(clf: &Classifier) -> Vec<u8> {
    let spec = &clf.spec;
    let arch = clf.model.arch;
    let mut header = String::new();
    let mut line = |s: String| {
        header.push_str(&s);
        header.push('\n');
    };
    line("format 1".into());
    line(format!("grid.width {}", spec.width));
    line(format!("grid.height {}", spec.height));
    line(format!("grid.bins {}", spec.bins));
    line(format!("grid.projection {}", spec.projection.name()));
    line(format!("kernel.kind {}", spec.kernel.kind.name()));
    line(format!("kernel.tau {}", spec.kernel.tau));
    line(format!("classes {}", arch.classes));
    for (name, shape) in arch.blocks() {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        line(format!("tensor {name} f32 {}", dims.join(" ")));
    }
    if let KernelKind::Mlp(_) = spec.kernel.kind {
        line(format!("tensor kernel.mlp f64 {MLP_PARAM_COUNT}"));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &clf.model.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let KernelKind::Mlp(m) = &spec.kernel.kind {
        for v in &m.weights {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Classifier> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(malformed("not a checkpoint"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| malformed("header truncated"))?;
    let header = std::str::from_utf8(header).map_err(|_| malformed("header is not UTF-8"))?;

    let mut fields = std::collections::BTreeMap::new();
    let mut tensors = Vec::new();
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| malformed("tensor without name"))?;
                let dtype = parts.next().ok_or_else(|| malformed("tensor without dtype"))?;
                let dims = parts
                    .map(|d| d.parse::<usize>().map_err(|_| malformed(format!("bad dim in {line}"))))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_string(), dtype.to_string(), dims));
            }
            Some(key) => {
                fields.insert(key.to_string(), parts.collect::<Vec<_>>().join(" "));
            }
            None => {}
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| malformed(format!("missing {k}")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| malformed(format!("bad {k}"))) };

    let width = u16::try_from(num("grid.width")?).map_err(|_| malformed("width"))?;
    let height = u16::try_from(num("grid.height")?).map_err(|_| malformed("height"))?;
    let bins = num("grid.bins")?;
    let projection = Projection::parse(get("grid.projection")?).ok_or_else(|| malformed("projection"))?;
    let tau: f64 = get("kernel.tau")?.parse().map_err(|_| malformed("tau"))?;
    let classes = num("classes")?;
    let kind = get("kernel.kind")?.clone();

    let mut spec = GridSpec::est(width, height, bins).with_projection(projection);
    let arch = Architecture::new(spec.channels(), width.into(), height.into(), classes)?;
    let expected: Vec<(String, Vec<usize>)> =
        arch.blocks().into_iter().map(|(n, s)| (n.to_string(), s)).collect();

    let mut body = &bytes[12 + header_len..];
    let mut model = ModelParams::zeros(arch);
    let mut cursor = 0;
    let mut mlp = None;
    let mut f32_index = 0;
    for (name, dtype, dims) in &tensors {
        let n: usize = dims.iter().product();
        match (name.as_str(), dtype.as_str()) {
            ("kernel.mlp", "f64") => {
                let (chunk, rest) = body.split_at_checked(8 * n).ok_or_else(|| malformed("data truncated"))?;
                body = rest;
                let w = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                mlp = Some(MlpKernel::from_weights(w)?);
            }
            (_, "f32") => {
                let slot = expected.get(f32_index);
                f32_index += 1;
                if slot.is_none_or(|(en, es)| en != name || es != dims) {
                    return Err(malformed(format!("unexpected tensor {name} {dims:?}")));
                }
                let (chunk, rest) = body.split_at_checked(4 * n).ok_or_else(|| malformed("data truncated"))?;
                body = rest;
                let dst = model
                    .data
                    .get_mut(cursor..cursor + n)
                    .ok_or_else(|| malformed("too many parameters"))?;
                for (d, b) in dst.iter_mut().zip(chunk.chunks_exact(4)) {
                    *d = f32::from_le_bytes(b.try_into().unwrap());
                }
                cursor += n;
            }
            _ => return Err(malformed(format!("unsupported tensor {name} {dtype}"))),
        }
    }
    if cursor != model.data.len() || !body.is_empty() {
        return Err(malformed("parameter count does not match architecture"));
    }
    spec.kernel = match (kind.as_str(), mlp) {
        ("trilinear", None) => KernelParams::trilinear(tau),
        ("exponential", None) => KernelParams::exponential(tau),
        ("mlp", Some(m)) => KernelParams::mlp(tau, m),
        (k, _) => return Err(malformed(format!("kernel {k} inconsistent with stored tensors"))),
    };
    spec.validate()?;
    Ok(Classifier { spec, model })
}

pub fn save_checkpoint(clf: &Classifier, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&write_checkpoint(clf))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    read_checkpoint(&fs::read(path)?)
}
