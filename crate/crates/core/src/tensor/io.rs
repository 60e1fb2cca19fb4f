//! Flat binary tensor serialization.
//!
//! Layout (little-endian): magic `TNSR`, u32 rank, u64 extent per dimension,
//! then the f64 payload in row-major order. Used for checkpoints and
//! embedding caches.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad tensor magic {:?}", magic)));
    }
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf)?;
    let rank = u32::from_le_bytes(rank_buf);
    if rank > MAX_RANK {
        return Err(Error::Parse(format!("tensor rank {} exceeds limit", rank)));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext)?;
        let d = u64::from_le_bytes(ext);
        let d = usize::try_from(d).map_err(|_| Error::Parse("tensor extent overflow".into()))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Parse("tensor size overflow".into()))?;
        shape.push(d);
    }
    let mut data = vec![0.0f64; numel];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut file, t)?;
    file.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut file)
}
