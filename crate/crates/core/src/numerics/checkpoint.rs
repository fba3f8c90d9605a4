//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic        8 bytes  "OCDCKPT\0"
//! version      u32
//! step         u64
//! seed         u64
//! config_hash  u32 length + utf-8 bytes
//! metadata     u32 count, then (u32 len + key, u32 len + value) pairs
//! parameters   u32 count, then per parameter:
//!              u32 len + name, u32 rank, u64 × rank dims, f64 × numel values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"OCDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form training metadata (kind, task, epoch, normalizer, ...).
    pub entries: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Malformed("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 1 << 24 {
            return Err(CheckpointError::Malformed(format!("string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Malformed("unexpected end of file".into()))?;
        String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }
}

impl Checkpoint {
    pub fn new(params: ParamStore, meta: CheckpointMeta) -> Self {
        Self { params, meta }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.meta.step.to_le_bytes())?;
        w.write_all(&self.meta.seed.to_le_bytes())?;
        put_str(&mut w, &self.meta.config_hash)?;
        w.write_all(&(self.meta.entries.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta.entries {
            put_str(&mut w, k)?;
            put_str(&mut w, v)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            put_str(&mut w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, CheckpointError> {
        let mut r = Reader(r);
        if &r.bytes::<8>()? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let config_hash = r.string()?;
        let mut entries = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            entries.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.bytes::<8>().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.insert(name, t);
        }
        let mut rest = [0u8; 1];
        if r.0.read(&mut rest)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            params,
            meta: CheckpointMeta {
                step,
                seed,
                config_hash,
                entries,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
