//! Binary weight format.
//!
//! ```text
//! "SUBT" | version u32 | tensor count u32
//! per tensor: name len u32 | name bytes | ndims u32 | dims u32... | f32 payload
//! per tensor: momentum f32 payload (same shapes, same order)
//! iteration u64
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{ModelState, Param, SubitNetSpec};
use super::tensor::Tensor;
use super::{NnetError, Result};

pub const MAGIC: &[u8; 4] = b"SUBT";
pub const VERSION: u32 = 1;

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in &state.params {
        for v in p.momentum.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("payload too large")?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Decodes a checkpoint and infers the architecture from its tensor shapes.
pub fn decode(bytes: &[u8]) -> std::result::Result<ModelState, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let ndims = r.u32()? as usize;
        if ndims > 8 {
            return Err(format!("tensor {name} has {ndims} dims"));
        }
        let shape = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let data = r.f32s(n)?;
        params.push(Param {
            name,
            value: Tensor::new(shape.clone(), data).map_err(|e| e.to_string())?,
            momentum: Tensor::zeros(shape),
        });
    }
    for p in &mut params {
        let data = r.f32s(p.value.len())?;
        p.momentum = Tensor::new(p.value.shape().to_vec(), data).map_err(|e| e.to_string())?;
    }
    let iteration = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let spec = infer_spec(&params)?;
    let state = ModelState {
        spec,
        params,
        iteration,
    };
    state.check_matches_spec().map_err(|e| e.to_string())?;
    Ok(state)
}

fn infer_spec(params: &[Param]) -> std::result::Result<SubitNetSpec, String> {
    if params.len() < 4 || params.len() % 2 != 0 {
        return Err(format!("{} tensors cannot form a network", params.len()));
    }
    let convs = (params.len() - 2) / 2;
    let first = params[0].value.shape();
    if first.len() != 4 {
        return Err("first tensor is not a conv weight".into());
    }
    let block_channels = (0..convs).map(|i| params[2 * i].value.shape()[0]).collect();
    let fc = params[params.len() - 2].value.shape();
    if fc.len() != 2 {
        return Err("fc.weight must be rank 2".into());
    }
    // The input side is not stored; only the default side is implied.
    let spec = SubitNetSpec {
        input_side: SubitNetSpec::default().input_side,
        in_channels: first[1],
        block_channels,
        kernel: first[2],
        num_classes: fc[0],
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| NnetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(state)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| NnetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode(&bytes).map_err(|reason| NnetError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
