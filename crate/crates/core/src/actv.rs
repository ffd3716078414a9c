//! Binary activation tensor format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "ACTV"
//! version u32      currently 1
//! dtype   u32      1 = float32, 2 = float64
//! ndim    u8
//! shape   ndim x u64
//! data    row-major scalars
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ACTV";
const VERSION: u32 = 1;

pub const DTYPE_F32: u32 = 1;
pub const DTYPE_F64: u32 = 2;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), "activation file", reason)
}

pub fn write_f32(path: &Path, data: &ArrayD<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_F32, data.shape())?;
    for &v in data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_f64(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_F64, data.shape())?;
    for &v in data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_header<W: Write>(w: &mut W, dtype: u32, shape: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&dtype.to_le_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<(u32, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let dtype = u32::from_le_bytes(u32buf);
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(bad(path, format!("unknown dtype code {dtype}")));
    }
    let mut ndim = [0u8; 1];
    r.read_exact(&mut ndim)?;
    let mut shape = Vec::with_capacity(ndim[0] as usize);
    let mut u64buf = [0u8; 8];
    for _ in 0..ndim[0] {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    Ok((dtype, shape))
}

/// Read any supported dtype, upcasting to f64.
pub fn read(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r, path)?;
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    match dtype {
        DTYPE_F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                out.push(f32::from_le_bytes(buf) as f64);
            }
        }
        _ => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out)
        .map_err(|e| bad(path, format!("shape/data mismatch: {e}")))
}

/// Read a file that must be float32, without precision changes.
pub fn read_f32(path: &Path) -> Result<ArrayD<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r, path)?;
    if dtype != DTYPE_F32 {
        return Err(bad(path, format!("expected float32 data, found dtype {dtype}")));
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f32::from_le_bytes(buf));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out)
        .map_err(|e| bad(path, format!("shape/data mismatch: {e}")))
}
