//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "CAMRCKPT"
//! u32    format version
//! u64 n, n bytes   model configuration (JSON)
//! u64    training step
//! u64 n, n bytes   RNG state (JSON)
//! u64    optimizer update count
//! u32    tensor count
//! tensors: u32 name length, name, u64 rows, u64 cols, rows*cols f64
//!          (parameters, then first moments "m.<name>", then second
//!          moments "v.<name>")
//! 32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DiTConfig, ParamStore};
use crate::optim::Adam;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"CAMRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DiTConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_blob(&mut out, serde_json::to_string(&self.config).expect("config json").as_bytes());
        put_u64(&mut out, self.step);
        put_blob(&mut out, serde_json::to_string(&self.rng).expect("rng json").as_bytes());
        put_u64(&mut out, self.adam.t);
        let n = self.params.len();
        put_u32(&mut out, (3 * n) as u32);
        let names = self.params.names();
        let groups: [(&str, &[Matrix]); 3] = [
            ("", self.params.values()),
            ("m.", &self.adam.m),
            ("v.", &self.adam.v),
        ];
        for (prefix, mats) in groups {
            for (name, m) in names.iter().zip(mats) {
                let full = format!("{prefix}{name}");
                put_u32(&mut out, full.len() as u32);
                out.extend_from_slice(full.as_bytes());
                put_u64(&mut out, m.rows() as u64);
                put_u64(&mut out, m.cols() as u64);
                for &x in m.data() {
                    let mut b = [0u8; 8];
                    LittleEndian::write_f64(&mut b, x);
                    out.extend_from_slice(&b);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config: DiTConfig = serde_json::from_slice(r.blob()?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let step = r.u64()?;
        let rng: ChaCha8Rng = serde_json::from_slice(r.blob()?)
            .map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        if count % 3 != 0 {
            return Err(Error::Checkpoint("tensor count is not a multiple of 3".into()));
        }
        let n = count / 3;
        let mut params = ParamStore::default();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(LittleEndian::read_f64).collect();
            let mat = Matrix::from_vec(rows, cols, data);
            match i / n {
                0 => params.push(name, mat),
                g => {
                    let base = &params.names()[i % n];
                    let want = format!("{}{base}", if g == 1 { "m." } else { "v." });
                    if name != want || params.values()[i % n].shape() != mat.shape() {
                        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
                    }
                    if g == 1 {
                        m.push(mat)
                    } else {
                        v.push(mat)
                    }
                }
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
            adam: Adam { m, v, t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    /// Loads a checkpoint; with `expected`, rejects a different model
    /// configuration.
    pub fn load(path: &Path, expected: Option<&DiTConfig>) -> Result<Self> {
        let ck = Self::from_bytes(&crate::io::read_bytes(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let Some(cfg) = expected {
            if cfg != &ck.config {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
        }
        Ok(ck)
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::SeedableRng;

    fn small() -> DiTConfig {
        DiTConfig {
            depth: 1,
            heads: 2,
            d: 8,
            d_c: 8,
            patch_s: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::init(small(), &mut rng).unwrap();
        let ck = Checkpoint {
            config: model.config.clone(),
            step: 17,
            adam: Adam::new(model.params.values()),
            params: model.params,
            rng,
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::init(small(), &mut rng).unwrap();
        Checkpoint {
            config: model.config.clone(),
            step: 0,
            adam: Adam::new(model.params.values()),
            params: model.params,
            rng,
        }
        .save(&path)
        .unwrap();
        let other = DiTConfig {
            depth: 2,
            ..small()
        };
        assert!(matches!(Checkpoint::load(&path, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load(&path, Some(&small())).is_ok());
    }
}
