//! Flat binary containers for adapters and layers, plus a JSON sidecar of
//! hyperparameters. Round-trips are bit-exact.
//!
//! Adapter container layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "ADPT"
//! version    u32      1
//! variant    u8       tag, see Variant order
//! rank       u32
//! d, f       u32 each
//! alpha      f64
//! eps        f64
//! n_learn    u8
//! n_frozen   u8
//! entries    n_learn + n_frozen times:
//!   name_len u8, name bytes (ascii),
//!   rows u32, cols u32, rows*cols f64 (little-endian)
//! ```
//!
//! Layer container layout:
//!
//! ```text
//! magic      4 bytes  "LAYR"
//! version    u32      1
//! d, f       u32 each
//! frob_w_bar f64
//! w_bar      d*f f64
//! bias       f   f64
//! offset     d*f f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, Param, PretrainedLayer, Variant};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const ADAPTER_MAGIC: &[u8; 4] = b"ADPT";
const LAYER_MAGIC: &[u8; 4] = b"LAYR";
const VERSION: u32 = 1;

/// Human-readable hyperparameters written next to the binary container.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub variant: String,
    pub rank: usize,
    pub d: usize,
    pub f: usize,
    pub alpha: f64,
    pub eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl Sidecar {
    pub fn of(adapter: &Adapter, layer: &PretrainedLayer) -> Sidecar {
        Sidecar {
            variant: adapter.variant().name().to_string(),
            rank: adapter.rank(),
            d: layer.input_dim(),
            f: layer.output_dim(),
            alpha: adapter.alpha(),
            eps: adapter.eps(),
            lambda: adapter.lambda(),
        }
    }
}

pub fn adapter_to_bytes(adapter: &Adapter, layer: &PretrainedLayer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(adapter.variant().tag());
    out.extend_from_slice(&(adapter.rank() as u32).to_le_bytes());
    out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
    out.extend_from_slice(&adapter.alpha().to_le_bytes());
    out.extend_from_slice(&adapter.eps().to_le_bytes());
    out.push(adapter.learnable.len() as u8);
    out.push(adapter.frozen.len() as u8);
    for p in adapter.learnable.iter().chain(&adapter.frozen) {
        push_entry(&mut out, p);
    }
    out
}

fn push_entry(out: &mut Vec<u8>, p: &Param) {
    out.push(p.name.len() as u8);
    out.extend_from_slice(p.name.as_bytes());
    push_matrix(out, &p.value);
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<Adapter> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(ADAPTER_MAGIC, "adapter")?;
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported adapter version {version}")));
    }
    let tag = cur.u8()?;
    let variant = Variant::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))?;
    let rank = cur.u32()? as usize;
    let _d = cur.u32()?;
    let _f = cur.u32()?;
    let alpha = cur.f64()?;
    let eps = cur.f64()?;
    let n_learn = cur.u8()? as usize;
    let n_frozen = cur.u8()? as usize;
    let mut learnable = Vec::with_capacity(n_learn);
    for _ in 0..n_learn {
        learnable.push(cur.entry()?);
    }
    let mut frozen = Vec::with_capacity(n_frozen);
    for _ in 0..n_frozen {
        frozen.push(cur.entry()?);
    }
    cur.expect_end()?;
    Ok(Adapter::from_parts(variant, rank, alpha, eps, learnable, frozen))
}

pub fn layer_to_bytes(layer: &PretrainedLayer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LAYER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
    out.extend_from_slice(&layer.frob_w_bar().to_le_bytes());
    for &v in layer.w_bar().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in layer.bias().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in layer.w_init_offset().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn layer_from_bytes(bytes: &[u8]) -> Result<PretrainedLayer> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(LAYER_MAGIC, "layer")?;
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported layer version {version}")));
    }
    let d = cur.u32()? as usize;
    let f = cur.u32()? as usize;
    let frob = cur.f64()?;
    let w_bar = cur.matrix_data(d, f)?;
    let bias = cur.matrix_data(f, 1)?;
    let offset = cur.matrix_data(d, f)?;
    cur.expect_end()?;
    let layer = PretrainedLayer::new(w_bar, bias)?;
    let layer = layer.with_offset(offset);
    // frob is cached at save time from the original weights; trust the file but
    // reject gross corruption.
    if (layer.w_bar().frobenius_norm() - frob).abs() > 1e-6 * (1.0 + frob) {
        return Err(Error::Format("layer norm cache mismatch".into()));
    }
    Ok(layer)
}

pub fn save_adapter(path: &Path, adapter: &Adapter, layer: &PretrainedLayer) -> Result<()> {
    std::fs::write(path, adapter_to_bytes(adapter, layer))?;
    let sidecar = Sidecar::of(adapter, layer);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(path.with_extension("json"), json + "\n")?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<Adapter> {
    adapter_from_bytes(&std::fs::read(path)?)
}

pub fn save_layer(path: &Path, layer: &PretrainedLayer) -> Result<()> {
    std::fs::write(path, layer_to_bytes(layer))?;
    Ok(())
}

pub fn load_layer(path: &Path) -> Result<PretrainedLayer> {
    layer_from_bytes(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect_magic(&mut self, magic: &[u8; 4], kind: &str) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!("not a {kind} container")));
        }
        Ok(())
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after container",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<Param> {
        let len = self.u8()? as usize;
        let name_bytes = self.take(len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let name = canonical_name(name)?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let value = self.matrix_data(rows, cols)?;
        Ok(Param { name, value })
    }

    fn matrix_data(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("matrix dims overflow".into()))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn canonical_name(name: &str) -> Result<&'static str> {
    const NAMES: [&str; 10] = ["B", "A", "D", "C", "u", "v", "U", "V", "lambda", "m"];
    NAMES
        .into_iter()
        .find(|n| *n == name)
        .ok_or_else(|| Error::Format(format!("unknown parameter name {name:?}")))
}
