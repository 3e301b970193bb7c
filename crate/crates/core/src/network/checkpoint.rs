//! Versioned binary checkpoints.
//!
//! ```text
//! magic      8 bytes  "UIESNNCK"
//! version    u32 LE
//! header     u32 LE length + UTF-8 TOML of the network configuration
//! blobs      u32 LE count, then per parameter in declaration order:
//!            u16 LE name length, name, u64 LE element count, f32 LE values
//! ```

use std::fs;
use std::path::Path;

use super::config::NetworkConfig;
use super::graph::LayerGraph;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"UIESNNCK";
pub const VERSION: u32 = 1;

pub fn serialize<S: Scalar>(graph: &LayerGraph<S>) -> Result<Vec<u8>> {
    let header = toml::to_string(graph.config()).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let params = graph.params();
    let mut out = Vec::with_capacity(64 + header.len() + graph.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, values) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            let f = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated stream while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<LayerGraph<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let cfg: NetworkConfig = toml::from_str(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut graph = LayerGraph::<f32>::skeleton(&cfg).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let expected: Vec<(String, usize)> = graph.params().iter().map(|(n, p)| (n.clone(), p.len())).collect();
    let count = r.u32("blob count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter blobs, network declares {}",
            expected.len()
        )));
    }
    let mut slots = graph.params_mut();
    for ((name, len), slot) in expected.iter().zip(slots.iter_mut()) {
        let name_len = r.u16("blob name length")? as usize;
        let got = r.take(name_len, "blob name")?;
        if got != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected blob `{name}`, found `{}`",
                String::from_utf8_lossy(got)
            )));
        }
        let n = r.u64("blob length")? as usize;
        if n != *len {
            return Err(Error::Checkpoint(format!("blob `{name}` has {n} values, expected {len}")));
        }
        let raw = r.take(n.saturating_mul(4), "blob data")?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(graph)
}

pub fn save<S: Scalar>(graph: &LayerGraph<S>, path: &Path) -> Result<()> {
    fs::write(path, serialize(graph)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LayerGraph<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LayerGraph<f32> {
        let cfg = NetworkConfig {
            depth: 3,
            base_channels: 2,
            height: 16,
            width: 16,
            ..Default::default()
        };
        LayerGraph::build(&cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let g = small();
        let bytes = serialize(&g).unwrap();
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = serialize(&small()).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(deserialize(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = serialize(&small()).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(deserialize(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = deserialize(&v2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut extra = bytes;
        extra.push(0);
        assert!(deserialize(&extra).is_err());
    }
}
