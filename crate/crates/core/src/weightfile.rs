//! Binary container for named `f64` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic  "FLATW1\0"                       7 bytes
//!            u32    section count
//!            per section:
//!              u32  name length, then UTF-8 name
//!              u32  rank, then `rank` u32 dims
//!              f64  payload, product(dims) values
//! len-4      u32    CRC-32 (IEEE) of bytes [7, len-4)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numgrid::Mat;

pub const MAGIC: &[u8; 7] = b"FLATW1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(name, vec![n], data)
    }

    pub fn from_mat(name: impl Into<String>, m: &Mat) -> Self {
        Tensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn to_mat(&self) -> Result<Mat> {
        match self.dims.as_slice() {
            &[r, c] => Mat::from_vec(r, c, self.data.clone()),
            other => Err(Error::Shape(format!(
                "section {} has dims {other:?}, expected a matrix",
                self.name
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        match self.dims.as_slice() {
            &[_] => Ok(self.data.clone()),
            other => Err(Error::Shape(format!(
                "section {} has dims {other:?}, expected a vector",
                self.name
            ))),
        }
    }
}

/// An ordered list of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("missing weight section {name:?}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"FLATW1\\0\"".into(),
            });
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Truncated {
                offset: MAGIC.len() as u64,
                expected: 8,
                found: (bytes.len() - MAGIC.len()) as u64,
            });
        }
        let end = bytes.len() - 4;
        let mut r = Reader {
            buf: &bytes[..end],
            pos: MAGIC.len(),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_off = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: name_off as u64 + 4,
                    msg: "section name is not UTF-8".into(),
                })?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    msg: format!("section {name:?} dims {dims:?} overflow"),
                })?;
            let payload = r.take(count)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != end {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} unexpected bytes before checksum", end - r.pos),
            });
        }
        let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[MAGIC.len()..end]);
        if stored != actual {
            return Err(Error::Format {
                offset: end as u64,
                msg: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(WeightFile { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: n as u64,
                found: left as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let mut wf = WeightFile::default();
        wf.push(Tensor::new("backbone.stem", vec![2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.1).collect()));
        wf.push(Tensor::vector("bias", vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        wf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let wf = sample();
        let bytes = wf.to_bytes();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors[1].data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[2] ^= 0xff;
        match WeightFile::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn declared_payload_longer_than_file_is_truncation() {
        let mut wf = WeightFile::default();
        wf.push(Tensor::vector("v", vec![1.0, 2.0]));
        let mut bytes = wf.to_bytes();
        // Declared dim lives right before the payload: magic, count, name
        // length, "v", rank.
        let dim_off = 7 + 4 + 4 + 1 + 4;
        bytes[dim_off..dim_off + 4].copy_from_slice(&5u32.to_le_bytes());
        match WeightFile::from_bytes(&bytes) {
            Err(Error::Truncated { offset, expected, found }) => {
                assert_eq!(offset, dim_off as u64 + 4);
                assert_eq!(expected, 40);
                assert_eq!(found, 16);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn payload_flip_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(Error::Format { offset, .. }) if offset == (n - 4) as u64
        ));
    }

    #[test]
    fn short_file_is_truncated() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            WeightFile::from_bytes(&bytes[..9]),
            Err(Error::Truncated { .. })
        ));
        assert!(WeightFile::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        sample().save(&p).unwrap();
        assert_eq!(WeightFile::load(&p).unwrap(), sample());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
