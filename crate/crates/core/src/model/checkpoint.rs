//! Binary checkpoint format.
//!
//! ```text
//! "TYCK" | version: u32 | config_len: u32 | config JSON
//! repeated: name_len: u16 | name | rank: u8 | dims: u64 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian; tensors follow canonical name order.

use std::fs;
use std::io;
use std::path::Path;

use super::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 4] = b"TYCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

pub fn to_bytes(params: &Parameters<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    let mut out = Vec::with_capacity(16 + config.len() + params.numel() as usize * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for (spec, data) in params.named() {
        let name = spec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(spec.shape.len() as u8);
        for &dim in &spec.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Parameters<f32>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(malformed("missing TYCK magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| malformed(format!("config: {e}")))?;
    let mut params = Parameters::<f32>::zeros(config).map_err(|e| malformed(e.to_string()))?;
    for (spec, data) in params.named_mut() {
        let name_len = r.u16("tensor name length")? as usize;
        let name =
            std::str::from_utf8(r.take(name_len, "tensor name")?).map_err(|_| malformed("tensor name is not UTF-8"))?;
        if name != spec.name {
            return Err(malformed(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        if shape != spec.shape {
            return Err(malformed(format!(
                "tensor {name}: shape {shape:?} does not match config {:?}",
                spec.shape
            )));
        }
        let raw = r.take(data.len() * 4, "tensor data")?;
        for (x, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if !r.done() {
        return Err(malformed("trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save(params: &Parameters<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Parameters<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Parameters<f32> {
        Parameters::init(ModelConfig::new(2, 8, 2, 13, 16), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn header_layout() {
        let p = params();
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..4], b"TYCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let clen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(&bytes[12..12 + clen]).unwrap();
        assert_eq!(cfg, p.config);
        // First tensor is the embedding: name, rank 2, dims [13, 8], then the first float.
        let mut at = 12 + clen;
        assert_eq!(u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()), 9);
        at += 2;
        assert_eq!(&bytes[at..at + 9], b"embedding");
        at += 9;
        assert_eq!(bytes[at], 2);
        at += 1;
        assert_eq!(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()), 13);
        assert_eq!(u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap()), 8);
        at += 16;
        assert_eq!(
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()),
            p.embedding[0]
        );
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let back = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&params());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version).is_err());
    }
}
