//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"CANT" | u32 version | u32 len + JSON blob | u32 tensor count
//! per tensor: u16 name len | name | u8 dtype (1 = f64) | u8 rank | rank x u64 dims | data
//! u64 rng state | u32 epoch
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CANT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub rng_state: u64,
    pub epoch: u32,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let blob = serde_json::to_vec(&self.config)?;
        let len = u32::try_from(blob.len()).map_err(|_| bad("config blob too large"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&blob)?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| bad(format!("tensor name too long: {name}")))?;
            w.write_all(&n.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| bad("tensor rank too large"))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.write_all(&self.rng_state.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut blob = vec![0u8; len];
        read_exact(&mut r, &mut blob)?;
        let config = serde_json::from_slice(&blob)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(&mut r, &mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let mut b1 = [0u8; 2];
            read_exact(&mut r, &mut b1)?;
            if b1[0] != DTYPE_F64 {
                return Err(bad(format!("tensor {name}: unsupported dtype {}", b1[0])));
            }
            let mut shape = Vec::with_capacity(b1[1] as usize);
            for _ in 0..b1[1] {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b8 = [0u8; 8];
            for _ in 0..numel {
                read_exact(&mut r, &mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let rng_state = read_u64(&mut r)?;
        let epoch = read_u32(&mut r)?;
        Ok(Self {
            config,
            tensors,
            rng_state,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated checkpoint"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
