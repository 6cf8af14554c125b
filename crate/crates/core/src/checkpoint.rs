//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `NBINVCKP`, little-endian `u32` format version,
//! `u32` header length, UTF-8 JSON [`Header`], then every parameter and buffer
//! in visit order followed by any extra tensors, all as little-endian floats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::nn::{Parameterized, Real};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NBINVCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// What the payload holds, e.g. `nbnet`, `extractor`, `gan`.
    pub kind: String,
    pub dtype: String,
    pub tensor_lens: Vec<usize>,
    pub extra_lens: Vec<usize>,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn build<T: Real, P: Parameterized<T> + ?Sized>(
        kind: &str,
        meta: serde_json::Value,
        model: &P,
        extra: &[Vec<T>],
    ) -> Self {
        let mut payload = Vec::new();
        let mut tensor_lens = Vec::new();
        let mut push = |s: &[T]| {
            tensor_lens.push(s.len());
            for &v in s {
                v.write_le(&mut payload);
            }
        };
        model.visit_params(&mut push);
        model.visit_buffers(&mut push);
        for e in extra {
            for &v in e {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            dtype: T::DTYPE.to_string(),
            tensor_lens,
            extra_lens: extra.iter().map(Vec::len).collect(),
            meta,
        };
        Self { header, payload }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| {
            Error::Checkpoint(format!("truncated header (format version {version})"))
        })?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("corrupt header (format version {version}): {e}")))?;
        Ok(Self { header, payload: bytes[16 + hlen..].to_vec() })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}` (format version {})",
                self.header.kind, self.header.format_version
            )));
        }
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.header.meta.clone())?)
    }

    /// Loads parameters and buffers into `model`, returning the extra tensors.
    pub fn restore<T: Real, P: Parameterized<T> + ?Sized>(&self, model: &mut P) -> Result<Vec<Vec<T>>> {
        if self.header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype {} does not match model dtype {}",
                self.header.dtype,
                T::DTYPE
            )));
        }
        let total: usize = self.header.tensor_lens.iter().chain(&self.header.extra_lens).sum();
        if total * T::BYTES != self.payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {} values (format version {})",
                self.payload.len(),
                total,
                self.header.format_version
            )));
        }
        let mut chunks = self.payload.chunks_exact(T::BYTES).map(T::read_le);
        let mut idx = 0;
        let mut mismatch = None;
        let lens = &self.header.tensor_lens;
        let mut fill = |s: &mut [T]| {
            if lens.get(idx) != Some(&s.len()) {
                mismatch.get_or_insert((idx, s.len()));
            } else {
                for v in s.iter_mut() {
                    *v = chunks.next().expect("length checked");
                }
            }
            idx += 1;
        };
        model.visit_params_mut(&mut fill);
        model.visit_buffers_mut(&mut fill);
        if let Some((i, len)) = mismatch {
            return Err(Error::Checkpoint(format!(
                "tensor {i} has {len} values in the model but {:?} in the checkpoint",
                lens.get(i)
            )));
        }
        if idx != lens.len() {
            return Err(Error::Checkpoint(format!(
                "model has {idx} tensors, checkpoint has {}",
                lens.len()
            )));
        }
        Ok(self
            .header
            .extra_lens
            .iter()
            .map(|&n| chunks.by_ref().take(n).collect())
            .collect())
    }
}

/// Periodic checkpoints in one directory: `{prefix}-{step:08}.ckpt` files of
/// which the newest `keep` survive, plus `{prefix}-best.ckpt` for the lowest loss.
#[derive(Clone, Debug)]
pub struct Rotation {
    dir: PathBuf,
    prefix: String,
    keep: usize,
    best: Option<f64>,
}

impl Rotation {
    pub fn new(dir: &Path, prefix: &str, keep: usize) -> Self {
        Self { dir: dir.to_path_buf(), prefix: prefix.to_string(), keep: keep.max(1), best: None }
    }

    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("{}-{step:08}.ckpt", self.prefix))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join(format!("{}-best.ckpt", self.prefix))
    }

    /// Sorted `(step, path)` of the periodic checkpoints on disk.
    pub fn existing(&self) -> Result<Vec<(u64, PathBuf)>> {
        let mut found = Vec::new();
        if !self.dir.exists() {
            return Ok(found);
        }
        let head = format!("{}-", self.prefix);
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(step) = name
                .strip_prefix(&head)
                .and_then(|r| r.strip_suffix(".ckpt"))
                .and_then(|r| r.parse::<u64>().ok())
            {
                found.push((step, path));
            }
        }
        found.sort();
        Ok(found)
    }

    pub fn latest(&self) -> Result<Option<PathBuf>> {
        Ok(self.existing()?.pop().map(|(_, p)| p))
    }

    /// Writes `ck` for `step`, prunes old files and refreshes the best copy.
    pub fn save(&mut self, ck: &Checkpoint, step: u64, loss: f64) -> Result<PathBuf> {
        let path = self.path_for(step);
        ck.write(&path)?;
        let existing = self.existing()?;
        for (_, old) in existing.iter().take(existing.len().saturating_sub(self.keep)) {
            fs::remove_file(old)?;
        }
        if loss.is_finite() && self.best.map_or(true, |b| loss < b) {
            self.best = Some(loss);
            ck.write(&self.best_path())?;
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm2d, Conv2d, Init, Layer, Sequential};
    use rand::SeedableRng;

    fn model() -> Sequential<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(4, true);
        bn.running_var[2] = 3.5;
        Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 4, 3, 1, 1, false, Init::Normal { std: 0.02 }, &mut rng)),
            Layer::BatchNorm(bn),
        ])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let ck = Checkpoint::build("test", serde_json::json!({"a": 1}), &m, &[vec![1.5f32, 2.5]]);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut fresh = Sequential::from_kinds(&m.kinds());
        let extra = back.restore(&mut fresh).unwrap();
        assert_eq!(fresh, m);
        assert_eq!(extra, vec![vec![1.5, 2.5]]);
        assert_eq!(back.header.meta["a"], 1);
    }

    #[test]
    fn rejects_corruption_with_version() {
        let m = model();
        let mut bytes = Checkpoint::build("test", serde_json::Value::Null, &m, &[]).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"garbage-garbage-garbage"), Err(Error::Checkpoint(_))));
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 3);
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let err = ck.restore(&mut model()).unwrap_err().to_string();
        assert!(err.contains("format version 1"), "{err}");
    }

    #[test]
    fn rotation_keeps_last_three_and_best() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let mut rot = Rotation::new(dir.path(), "run", 3);
        for (step, loss) in [(1, 5.0), (2, 1.0), (3, 4.0), (4, 3.0), (5, 2.0)] {
            let ck = Checkpoint::build("test", serde_json::json!({ "step": step }), &m, &[]);
            rot.save(&ck, step, loss).unwrap();
        }
        let steps: Vec<u64> = rot.existing().unwrap().into_iter().map(|(s, _)| s).collect();
        assert_eq!(steps, vec![3, 4, 5]);
        let best = Checkpoint::read(&rot.best_path()).unwrap();
        assert_eq!(best.header.meta["step"], 2);
        assert_eq!(rot.latest().unwrap(), Some(rot.path_for(5)));
    }

    #[test]
    fn rejects_wrong_kind_and_dtype() {
        let m = model();
        let ck = Checkpoint::build("gan", serde_json::Value::Null, &m, &[]);
        assert!(ck.expect_kind("nbnet").is_err());
        let mut m64 = Sequential::<f64>::from_kinds(&m.kinds());
        assert!(ck.restore(&mut m64).is_err());
    }
}
