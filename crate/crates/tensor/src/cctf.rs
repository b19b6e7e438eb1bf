//! CCTF, a tiny binary tensor container.
//!
//! Layout: magic `CCTF`, version byte (1), dtype byte (0 = f32, 1 = f64),
//! rank byte, then one little-endian u32 per dimension, then the row-major
//! payload as little-endian scalars.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CCTF";
pub const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

fn fmt_err(msg: impl Into<String>) -> TensorError {
    TensorError::io("cctf", msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => fmt_err("truncated stream"),
        _ => fmt_err(e.to_string()),
    })
}

/// Serialize one tensor to a stream.
pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    if t.rank() > MAX_RANK {
        return Err(fmt_err(format!("rank {} exceeds the format limit {MAX_RANK}", t.rank())));
    }
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::WIDTH);
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| fmt_err(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf).map_err(|e| fmt_err(e.to_string()))
}

/// Header of the next tensor in a stream: (dtype byte, shape).
pub fn read_header<R: Read>(r: &mut R) -> Result<(u8, Vec<usize>)> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head)?;
    if head[..4] != MAGIC {
        return Err(fmt_err(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(fmt_err(format!("unsupported version {}", head[4])));
    }
    let dtype = head[5];
    if dtype > 1 {
        return Err(fmt_err(format!("unknown dtype tag {dtype}")));
    }
    let rank = head[6] as usize;
    if rank > MAX_RANK {
        return Err(fmt_err(format!("rank {rank} exceeds the format limit {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut dim = [0u8; 4];
    for _ in 0..rank {
        read_exact(r, &mut dim)?;
        let d = u32::from_le_bytes(dim) as usize;
        if d == 0 {
            return Err(fmt_err("zero extent in shape"));
        }
        shape.push(d);
    }
    Ok((dtype, shape))
}

/// Deserialize one tensor of scalar type `T`; the stored dtype must match.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != T::DTYPE {
        return Err(fmt_err(format!("dtype tag {} does not match requested scalar", dtype)));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt_err("element count overflows"))?;
    let mut payload = vec![0u8; count * T::WIDTH];
    read_exact(r, &mut payload)?;
    let data = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Write a tensor to a file.
pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| TensorError::io(path.display().to_string(), e.to_string()))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| at_path(path, e))?;
    w.flush().map_err(|e| TensorError::io(path.display().to_string(), e.to_string()))
}

/// Read a tensor from a file, requiring the file to contain exactly one.
pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path)
        .map_err(|e| TensorError::io(path.display().to_string(), e.to_string()))?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r).map_err(|e| at_path(path, e))?;
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(t),
        Ok(_) => Err(TensorError::io(path.display().to_string(), "trailing bytes after tensor")),
        Err(e) => Err(TensorError::io(path.display().to_string(), e.to_string())),
    }
}

/// Read a file that may hold either scalar width, converting to `T`.
pub fn load_as<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path)
        .map_err(|e| TensorError::io(path.display().to_string(), e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut head = Vec::new();
    r.read_to_end(&mut head)
        .map_err(|e| TensorError::io(path.display().to_string(), e.to_string()))?;
    let dtype = *head.get(5).ok_or_else(|| at_path(path, fmt_err("truncated stream")))?;
    let mut cursor = head.as_slice();
    let out = if dtype == f32::DTYPE {
        read_tensor::<f32, _>(&mut cursor).map(|t| t.cast::<T>())
    } else {
        read_tensor::<f64, _>(&mut cursor).map(|t| t.cast::<T>())
    };
    out.map_err(|e| at_path(path, e))
}

fn at_path(path: &Path, err: TensorError) -> TensorError {
    match err {
        TensorError::Io { msg, .. } => TensorError::io(path.display().to_string(), msg),
        other => other,
    }
}
