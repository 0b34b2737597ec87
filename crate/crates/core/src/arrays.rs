//! Flat binary array files.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   4 bytes  "SSA1"
//! dtype   u8       1 = f32, 2 = f64
//! ndim    u8
//! pad     2 bytes  zero
//! dims    ndim x u64
//! data    product(dims) elements, row major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(2);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let dtype = match bytes[4] {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(format!("unknown dtype code {other}")),
    };
    let ndim = bytes[5] as usize;
    if !(1..=2).contains(&ndim) {
        return Err(format!("unsupported rank {ndim}"));
    }
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let s = 8 + 8 * i;
            u64::from_le_bytes(bytes[s..s + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let (rows, cols) = if ndim == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| "shape overflow".to_string())?;
    let body = &bytes[header..];
    if body.len() != count * dtype.width() {
        return Err(format!(
            "payload has {} bytes, shape {rows}x{cols} needs {}",
            body.len(),
            count * dtype.width()
        ));
    }
    let data = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Tensor::from_vec(rows, cols, data))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(rows, cols, 3.0, &mut rng);
            let back = decode(&encode(&t, DType::F64)).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::full(2, 3, 1.5);
        let mut bytes = encode(&t, DType::F32);
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(decode(b"nope").is_err());
    }
}
