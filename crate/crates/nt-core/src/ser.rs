//! Binary tensor serialization.
//!
//! Layout: rank as u32, then each extent as u32, then the data as 32-bit
//! little-endian floats. f64 tensors narrow to f32 on write; reading widens
//! exactly, so save/load/save is byte-identical.

use std::io::{self, Read, Write};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_tensor<W: Write, F: Scalar>(w: &mut W, t: &Tensor<F>) -> io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read, F: Scalar>(r: &mut R) -> io::Result<Tensor<F>> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(F::from_f64(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(&shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

pub fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
