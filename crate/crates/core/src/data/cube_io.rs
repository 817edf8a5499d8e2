//! HSC1 cube files: magic, `u32` H/W/C, `u8` dtype code, row-major samples,
//! all little-endian.

use std::path::Path;

use crate::error::{invalid, PifError, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"HSC1";
const HEADER: usize = 4 + 12 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CubeData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl CubeData {
    pub fn dtype(&self) -> DType {
        match self {
            CubeData::F32(_) => DType::F32,
            CubeData::F64(_) => DType::F64,
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        match self {
            CubeData::F32(t) => t.cast(),
            CubeData::F64(t) => t.cast(),
        }
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> PifError {
    PifError::Format { offset, msg: msg.into() }
}

pub fn encode_cube<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = t.dims3()?;
    let dims = [h, w, c].map(|d| u32::try_from(d).map_err(|_| invalid("cube_io", format!("extent {d} exceeds u32"))));
    let mut out = Vec::with_capacity(HEADER + t.len() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    out.push(T::DTYPE.code());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn read_samples<T: Float>(payload: &[u8], shape: [usize; 3]) -> Result<Tensor<T>> {
    let n = T::DTYPE.size_of();
    Tensor::from_vec(&shape, payload.chunks_exact(n).map(T::read_le).collect())
}

pub fn decode_cube(bytes: &[u8]) -> Result<CubeData> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected HSC1"));
    }
    if bytes.len() < HEADER {
        return Err(fmt_err(bytes.len(), format!("header needs {HEADER} bytes, file has {}", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let shape = [u32_at(4), u32_at(8), u32_at(12)];
    let dtype = DType::from_code(bytes[16]).ok_or_else(|| fmt_err(16, format!("unknown dtype code {}", bytes[16])))?;
    let expected = shape
        .iter()
        .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| fmt_err(4, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(fmt_err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER..];
    Ok(match dtype {
        DType::F32 => CubeData::F32(read_samples(payload, shape)?),
        DType::F64 => CubeData::F64(read_samples(payload, shape)?),
    })
}

pub fn write_cube<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_cube(t)?)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<CubeData> {
    decode_cube(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn(&[8, 8, 4], 1.0, &mut rng);
        assert_eq!(decode_cube(&encode_cube(&a).unwrap()).unwrap(), CubeData::F32(a));
        let b = Tensor::<f64>::randn(&[3, 5, 2], 1.0, &mut rng);
        assert_eq!(decode_cube(&encode_cube(&b).unwrap()).unwrap(), CubeData::F64(b));
    }

    #[test]
    fn rejects_bad_input() {
        let a = Tensor::<f64>::zeros(&[2, 2, 2]);
        let bytes = encode_cube(&a).unwrap();
        let err = decode_cube(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 3)), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(&bad), Err(PifError::Format { offset: 0, .. })));
        let mut code = bytes.clone();
        code[16] = 7;
        assert!(matches!(decode_cube(&code), Err(PifError::Format { offset: 16, .. })));
    }
}
