//! Versioned little-endian checkpoint container.
//!
//! Layout: magic, format version (u32), stage tag, step (u64), config text,
//! array count, then per array: name, element type (u8), rank, dims (u64 each),
//! byte length (u64) and raw little-endian values. A SHA-256 of everything
//! before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"RMXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<u8>,
}

impl Array {
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        Ok(match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            other => return Err(Error::Checkpoint(format!("unsupported element type {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub config: String,
    pub arrays: Vec<Array>,
}

fn dtype_code(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported element type {other:?}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u64).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(stage: &str, step: u64, config: &str) -> Self {
        Self { stage: stage.to_string(), step, config: config.to_string(), arrays: Vec::new() }
    }

    /// Appends every array of `store` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, shape, dtype, data) in store.export_bytes()? {
            self.arrays.push(Array { name: format!("{prefix}{name}"), shape, dtype, data });
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|a| a.name.starts_with(prefix))
    }

    /// Loads the arrays under `prefix` into `store`; names and shapes must match exactly.
    pub fn load_into(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let mut map = BTreeMap::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
            map.insert(a.name[prefix.len()..].to_string(), (a.shape.clone(), a.to_f64()?));
        }
        if map.is_empty() {
            return Err(Error::Checkpoint(format!("stage `{}` holds no arrays under `{prefix}`", self.stage)));
        }
        store.import(&map)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.stage);
        out.extend(self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend((self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if a.data.len() != n * a.dtype.size_in_bytes() {
                return Err(Error::Checkpoint(format!("array `{}` byte length disagrees with its shape", a.name)));
            }
            put_str(&mut out, &a.name);
            out.push(dtype_code(a.dtype)?);
            out.extend((a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend((*d as u64).to_le_bytes());
            }
            out.extend((a.data.len() as u64).to_le_bytes());
            out.extend(&a.data);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut r = Reader { buf, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let body = &buf[..buf.len() - 32];
        if Sha256::digest(body).as_slice() != &buf[buf.len() - 32..] {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let stage = r.string()?;
        let step = r.u64()?;
        let config = r.string()?;
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(Error::Checkpoint(format!("unknown element type code {c}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = r.len()?;
            let data = r.take(n)?.to_vec();
            if n != shape.iter().product::<usize>() * dtype.size_in_bytes() {
                return Err(Error::Checkpoint(format!("array `{name}` byte length disagrees with its shape")));
            }
            arrays.push(Array { name, shape, dtype, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { stage, step, config, arrays })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, ParamBuilder};
    use candle_core::Device;

    fn store(seed: u64, dtype: DType) -> ParamStore {
        let pb = ParamBuilder::new(seed, dtype, &Device::Cpu);
        Linear::new(&pb.pp("a"), 5, 3).unwrap();
        Linear::new(&pb.pp("b"), 3, 2).unwrap();
        pb.finish()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for dtype in [DType::F32, DType::F64] {
            let s = store(1, dtype);
            let mut ck = Checkpoint::new("pretrain", 42, "p = 8\n");
            ck.add_store("backbone.", &s).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let other = store(2, dtype);
            back.load_into("backbone.", &other).unwrap();
            assert_eq!(other.checksum().unwrap(), s.checksum().unwrap());
        }
    }

    #[test]
    fn rejects_version_corruption_and_foreign_shapes() {
        let mut ck = Checkpoint::new("s", 0, "");
        ck.add_store("", &store(1, DType::F32)).unwrap();
        let mut bytes = ck.to_bytes().unwrap();
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());

        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        Linear::new(&pb.pp("a"), 4, 3).unwrap();
        Linear::new(&pb.pp("b"), 3, 2).unwrap();
        assert!(ck.load_into("", &pb.finish()).is_err());
    }
}
