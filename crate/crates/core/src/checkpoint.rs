//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RML-CKPT-1\n"
//! u32 config length, config as JSON
//! u32 parameter count
//! per parameter: u32 name length, name, u32 ndim, u64 per dim,
//!                f64 values in row-major order
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Result, RmlError};
use crate::fusion::{FusionConfig, FusionModel};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"RML-CKPT-1\n";

fn put_u32(buf: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| RmlError::Checkpoint(format!("length {x} exceeds u32")))?;
    buf.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

pub fn to_bytes<T: Scalar>(model: &FusionModel<T>) -> Result<Vec<u8>> {
    let mut buf = MAGIC.to_vec();
    let cfg = serde_json::to_vec(model.config())
        .map_err(|e| RmlError::Checkpoint(format!("config serialization: {e}")))?;
    put_u32(&mut buf, cfg.len())?;
    buf.extend_from_slice(&cfg);
    let params = model.params();
    put_u32(&mut buf, params.len())?;
    for (name, t) in params {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            RmlError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<FusionModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(RmlError::Checkpoint("missing RML-CKPT-1 header".into()));
    }
    let len = r.u32("config length")?;
    let cfg: FusionConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| RmlError::Checkpoint(format!("config: {e}")))?;
    let mut model = FusionModel::<T>::init(cfg, &mut RngStream::new(0))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("parameter count")?;
    if count != expected.len() {
        return Err(RmlError::Checkpoint(format!(
            "{count} parameters stored, config implies {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let len = r.u32("name length")?;
        let stored = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| RmlError::Checkpoint("parameter name is not UTF-8".into()))?;
        if stored != name {
            return Err(RmlError::Checkpoint(format!(
                "expected parameter '{name}', found '{stored}'"
            )));
        }
        let ndim = r.u32("ndim")?;
        let dims = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(RmlError::Checkpoint(format!(
                "parameter '{name}' has shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        values.push(Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(RmlError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    model.set_params(&values)?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &FusionModel<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| RmlError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<FusionModel<T>> {
    let bytes = fs::read(path).map_err(|e| RmlError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FusionModel<f64> {
        let cfg = FusionConfig::new(vec![3, 2]).with_dims(4, 5);
        FusionModel::init(cfg, &mut RngStream::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: FusionModel<f64> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.param_tensors(), m.param_tensors());
    }

    #[test]
    fn single_precision_round_trip() {
        let m: FusionModel<f32> = FusionModel::init(
            FusionConfig::new(vec![2]).with_dims(3, 3),
            &mut RngStream::new(1),
        )
        .unwrap();
        let back: FusionModel<f32> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.param_tensors(), m.param_tensors());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad), Err(RmlError::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
    }
}
