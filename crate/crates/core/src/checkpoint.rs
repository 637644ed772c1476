//! Binary checkpoint format.
//!
//! ```text
//! "EXPL"                       magic
//! u32                          format version
//! u64 x 6                      d_model, n_layers, n_heads, text_vocab, speech_vocab, max_len
//! u32 + bytes                  run-config hash (UTF-8, may be empty)
//! repeated until EOF:
//!   u32 + bytes                tensor name
//!   u32                        rank
//!   u64 x rank                 dims
//!   f32 x prod(dims)           payload
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{weight_shapes, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EXPL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config_hash: String,
}

pub fn encode(params: &ModelParams<f32>, config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = &params.config;
    for v in [c.d_model, c.n_layers, c.n_heads, c.text_vocab, c.speech_vocab, c.max_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    write_str(&mut out, config_hash);
    for (name, t) in params.weights.named() {
        write_str(&mut out, &name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = usize::try_from(r.u64()?).map_err(|_| "config field overflows usize")?;
    }
    let config = ModelConfig {
        d_model: dims[0],
        n_layers: dims[1],
        n_heads: dims[2],
        text_vocab: dims[3],
        speech_vocab: dims[4],
        max_len: dims[5],
    };
    config.validate().map_err(|e| e.to_string())?;
    let config_hash = r.string()?;

    let mut tensors = HashMap::new();
    while !r.done() {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("tensor size overflow")?;
        let raw = r.take(n.checked_mul(4).ok_or("tensor size overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }

    let expected = weight_shapes(&config);
    let weights = expected.try_map(|name, shape| {
        let t = tensors.remove(name).ok_or_else(|| format!("missing tensor {name}"))?;
        if t.shape() != shape.as_slice() {
            return Err(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()));
        }
        Ok(t)
    })?;
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    Ok(Checkpoint {
        params: ModelParams { config, weights },
        config_hash,
    })
}

pub fn save(path: &Path, params: &ModelParams<f32>, config_hash: &str) -> Result<()> {
    let bytes = encode(params, config_hash);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            text_vocab: 4,
            speech_vocab: 5,
            max_len: 10,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ModelParams::<f32>::init(&cfg(), 5).unwrap();
        // values whose bit patterns would not survive a decimal round trip
        p.weights.b_out.data_mut()[0] = f32::from_bits(0x3f80_0001);
        p.weights.b_out.data_mut()[1] = -0.0;
        let bytes = encode(&p, "abc123");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config_hash, "abc123");
        for ((_, a), (_, b)) in p.weights.named().iter().zip(back.params.weights.named()) {
            let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode(&back.params, "abc123"), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let p = ModelParams::<f32>::init(&cfg(), 5).unwrap();
        let mut bytes = encode(&p, "");
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert_eq!(decode(&corrupt).unwrap_err(), "bad magic");
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).unwrap_err().contains("truncated"));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let p = ModelParams::<f32>::init(&cfg(), 5).unwrap();
        let bytes = encode(&p, "");
        let b_out_bytes = 4 + "b_out".len() + 4 + 8 + 4 * 5;
        let cut = &bytes[..bytes.len() - b_out_bytes];
        assert!(decode(cut).unwrap_err().contains("missing tensor b_out"));
    }
}
