//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | magic            | `b"DGGCKPT\0"`                         |
//! | version          | u32 (currently 1)                      |
//! | config length    | u64, then that many bytes of JSON      |
//! | noise step       | u64                                    |
//! | tensor count     | u32                                    |
//! | per tensor       | u32 name length, UTF-8 name, u32 rank, |
//! |                  | rank × u64 dims, dims-product × f64    |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DGGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Noise step the parameters are evaluated at.
    pub step: u64,
    pub params: ParamStore,
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    let config = serde_json::to_vec(&ck.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&ck.step.to_le_bytes())?;
    w.write_all(&(ck.params.len() as u32).to_le_bytes())?;
    for (name, t) in ck.params.names().iter().zip(ck.params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn take_vec(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(len).read_to_end(&mut b)?;
    if b.len() as u64 != len {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    if &take::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let clen = u64::from_le_bytes(take(r)?);
    let config: TrainConfig = serde_json::from_slice(&take_vec(r, clen)?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    let step = u64::from_le_bytes(take(r)?);
    let count = u32::from_le_bytes(take(r)?);
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(r)?);
        let name = String::from_utf8(take_vec(r, nlen as u64)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(r)?);
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(r)?) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take_vec(r, len as u64 * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { config, step, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejects_garbage() {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::from_rows(&[vec![1.5, -0.25], vec![f64::MIN_POSITIVE, 3.0]]).unwrap());
        params.add("b", Tensor::vector(vec![0.1]));
        let ck = Checkpoint {
            config: TrainConfig::default(),
            step: 42,
            params,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), ck);

        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
