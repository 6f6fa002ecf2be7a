//! Portable weight container (`.swnt`).
//!
//! All integers are little-endian:
//!
//! ```text
//! magic      4 bytes  "SWNT"
//! version    u32      currently 1
//! meta_len   u32      length of the metadata document
//! metadata   bytes    UTF-8 (JSON model config, may be empty)
//! count      u32      number of records
//! record × count:
//!   name_len u32
//!   name     bytes    UTF-8
//!   rank     u32
//!   extents  u64 × rank
//!   values   f32 × product(extents)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SWNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct WeightFile {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl WeightFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic, not an SWNT file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = r.string(meta_len)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| {
                    Error::WeightFormat(format!("extent of {name} does not fit in memory"))
                })?);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                Error::WeightFormat(format!("record {name} is too large"))
            })?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, values).map_err(|e| e.context(format!("record {name}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::WeightFormat("name is not valid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightFile {
        WeightFile {
            metadata: "{\"k\":1}".into(),
            tensors: vec![
                ("a.weight".into(), Tensor::new(vec![2, 3], vec![1., -2., 3.5, 0., 1e-7, -0.0]).unwrap()),
                ("scalar".into(), Tensor::new(vec![], vec![42.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"SWNT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 7);
        assert_eq!(&bytes[12..19], b"{\"k\":1}");
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().encode();
        assert!(WeightFile::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightFile::decode(&bad), Err(Error::WeightFormat(_))));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(WeightFile::decode(&trailing).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_roundtrip(
            meta in "[a-z{}:\"0-9]{0,20}",
            recs in proptest::collection::vec(
                ("[a-z._0-9]{1,12}", proptest::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            ),
        ) {
            let tensors = recs.into_iter().map(|(name, shape, seed)| {
                let n: usize = shape.iter().product();
                let vals = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 2001) as f32 - 1000.0) / 7.0).collect();
                (name, Tensor::new(shape, vals).unwrap())
            }).collect();
            let wf = WeightFile { metadata: meta, tensors };
            let bytes = wf.encode();
            let back = WeightFile::decode(&bytes).unwrap();
            prop_assert_eq!(&back.metadata, &wf.metadata);
            prop_assert_eq!(back.tensors.len(), wf.tensors.len());
            for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&wf.tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert!(t1.bit_eq(t2));
            }
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
