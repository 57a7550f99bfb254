//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLOMW1"
//! u32                      number of weighted layers
//! per weighted layer, in network order:
//!     u8                   kind tag (1 = conv, 2 = fc)
//!     2 tensors (weights, then bias), each:
//!         u32              rank
//!         u32 × rank       dimensions
//!         f64 × product    values, row-major
//! ```
//!
//! Loading is strict: any mismatch against the spec, a short read or
//! trailing bytes is a format error.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{
    expected_param_shapes, LayerParams, LayerSpec, Network, NetworkError, NetworkSpec, Result,
};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"SLOMW1";

const TAG_CONV: u8 = 1;
const TAG_FC: u8 = 2;

pub fn write_weights(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    let weighted: Vec<(usize, &LayerParams)> = net
        .params()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    out.extend_from_slice(&(weighted.len() as u32).to_le_bytes());
    for (i, p) in weighted {
        let tag = match net.spec().layers()[i] {
            LayerSpec::Conv { .. } => TAG_CONV,
            _ => TAG_FC,
        };
        out.push(tag);
        for t in [&p.weights, &p.bias] {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Writes atomically: the bytes go to a sibling temp file that is renamed
/// into place, so a failed save never leaves a partial file at `path`.
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let bytes = write_weights(net);
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_weights(spec: &NetworkSpec, path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    read_weights(spec, &bytes)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NetworkError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank != expected.len() {
            return Err(NetworkError::Format(format!(
                "tensor rank {rank}, expected {}",
                expected.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(NetworkError::Format(format!(
                "tensor shape {shape:?}, expected {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub fn read_weights(spec: &NetworkSpec, bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(NetworkError::Format("bad magic".into()));
    }
    let weighted: Vec<usize> = spec
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_weighted())
        .map(|(i, _)| i)
        .collect();
    let count = cur.u32()? as usize;
    if count != weighted.len() {
        return Err(NetworkError::Format(format!(
            "file has {count} weighted layers, spec has {}",
            weighted.len()
        )));
    }
    let mut params: Vec<Option<LayerParams>> = vec![None; spec.layers().len()];
    for &i in &weighted {
        let tag = cur.u8()?;
        let expected_tag = match spec.layers()[i] {
            LayerSpec::Conv { .. } => TAG_CONV,
            _ => TAG_FC,
        };
        if tag != expected_tag {
            return Err(NetworkError::Format(format!(
                "layer {i}: kind tag {tag}, expected {expected_tag}"
            )));
        }
        let (wshape, bshape) = expected_param_shapes(spec, i).expect("weighted layer");
        let weights = cur.tensor(&wshape)?;
        let bias = cur.tensor(&bshape)?;
        params[i] = Some(LayerParams { weights, bias });
    }
    if cur.pos != bytes.len() {
        return Err(NetworkError::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let mut net = Network::from_params(spec, params, 0)?;
    net.mark_trained();
    Ok(net)
}
