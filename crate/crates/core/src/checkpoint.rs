//! Named-tensor archive used for generator, training-state and extractor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "IN2CKPT\0"
//! version      u32      1
//! header_len   u64
//! header       JSON (kind, fingerprint, seed, step, epoch, config, extra)
//! n_tensors    u32
//! per tensor   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim, data f64 x numel
//! digest       32 bytes SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IN2CKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    /// SHA-256 of the canonical JSON of the model configuration.
    pub fingerprint: String,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    /// Sorted by name.
    pub tensors: Vec<(String, Tensor)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of a serializable configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("length overflows".into()))
    }
}

impl Checkpoint {
    pub fn new(header: Header, mut tensors: Vec<(String, Tensor)>) -> Self {
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Self { header, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i].1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 32 || &buf[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint archive (bad magic)".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("digest mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after tensors".into()));
        }
        Ok(Self::new(header, tensors))
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
        let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
        let bytes = self.to_bytes();
        let result = (|| {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        })();
        result.map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless this archive was written for `kind` under a configuration
    /// with the given fingerprint.
    pub fn expect(&self, kind: &str, fingerprint: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Incompatible(format!(
                "archive holds `{}`, expected `{kind}`",
                self.header.kind
            )));
        }
        if self.header.fingerprint != fingerprint {
            return Err(Error::Incompatible(format!(
                "config fingerprint {} does not match current {fingerprint}",
                self.header.fingerprint
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            Header {
                kind: "test".into(),
                fingerprint: fingerprint(&serde_json::json!({"a": 1})),
                seed: 3,
                step: 10,
                epoch: 1,
                config: serde_json::json!({"a": 1, "b": [0.1, 2.5e-7]}),
                extra: serde_json::Value::Null,
            },
            vec![
                ("z".into(), Tensor::new(vec![2], vec![1.5, -0.0])),
                ("a.w".into(), Tensor::from_fn(vec![2, 3], |i| i as f64 / 7.0)),
            ],
        )
    }

    #[test]
    fn bytes_round_trip_is_idempotent() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("a.w").unwrap().shape(), &[2, 3]);
        assert!(back.tensor("missing").is_none());
    }

    #[test]
    fn truncation_and_tampering_are_corruption() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn fingerprint_mismatch_is_incompatible() {
        let c = sample();
        assert!(c.expect("test", &c.header.fingerprint.clone()).is_ok());
        assert!(matches!(c.expect("test", "00"), Err(Error::Incompatible(_))));
        assert!(matches!(c.expect("other", &c.header.fingerprint), Err(Error::Incompatible(_))));
    }
}
