//! Named-parameter archive. Layout, all little-endian:
//!
//! ```text
//! "CML1" | config digest [32] | K u32 | epoch u32
//! | history len u32 | history f64...
//! | config JSON len u32 | config JSON
//! | record count u32 | records
//! record: name len u16 | name | ndim u8 | dims u32... | data f64...
//! ```

use std::fs;
use std::path::Path;

use super::config::EncoderConfig;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CML1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub epoch: u32,
    /// Mean training loss per epoch, oldest first.
    pub history: Vec<f64>,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: ParamStore) -> Self {
        Self {
            config,
            params,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        self.config.digest()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.total_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(self.config.k() as u32).to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for h in &self.history {
            out.extend_from_slice(&h.to_le_bytes());
        }
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let k = r.u32()? as usize;
        let epoch = r.u32()?;
        let n_hist = r.u32()? as usize;
        let history = (0..n_hist).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let json_len = r.u32()? as usize;
        let config: EncoderConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::format(path, format!("bad config block: {e}")))?;
        if config.digest() != digest {
            return Err(Error::format(
                path,
                "stored config does not match its digest",
            ));
        }
        if config.k() != k {
            return Err(Error::format(
                path,
                format!("header K {k} disagrees with config K {}", config.k()),
            ));
        }
        let n_rec = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n_rec {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if params.contains(&name) {
                return Err(Error::format(path, format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self {
            config,
            params,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn load_for(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.ensure_config(expected)?;
        Ok(ck)
    }

    pub fn ensure_config(&self, expected: &EncoderConfig) -> Result<()> {
        if self.digest() != expected.digest() {
            return Err(Error::DigestMismatch);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_params;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        Checkpoint {
            config: cfg,
            params,
            epoch: 7,
            history: vec![1.5, 0.75],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cml");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), ck.encode());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CML1");
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cml");
        ck.save(&path).unwrap();
        let other = EncoderConfig {
            clusters: 4,
            ..Default::default()
        };
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(Error::DigestMismatch)
        ));
        Checkpoint::load_for(&path, &EncoderConfig::default()).unwrap();
    }

    #[test]
    fn corrupt_files_name_the_path() {
        let ck = sample();
        let bytes = ck.encode();
        let path = Path::new("some/where.cml");
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3], path).unwrap_err();
        assert!(err.to_string().contains("some/where.cml"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, path)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut tampered = bytes;
        tampered[5] ^= 1;
        assert!(Checkpoint::decode(&tampered, path).is_err());
    }
}
