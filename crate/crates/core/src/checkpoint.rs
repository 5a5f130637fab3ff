//! Binary checkpoint container.
//!
//! ```text
//! "S2TDPT"  magic
//! u32       format version
//! u32 + ..  configuration text (UTF-8)
//! u32       tensor count
//! per tensor:
//!   u8      kind (0 parameter, 1 running statistic)
//!   u32 + ..  name
//!   u32     rank, then u64 per axis
//!   f32[]   values
//! ```
//!
//! All integers and floats are little-endian. No timestamps are written, so
//! identical models produce identical files.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"S2TDPT";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>, run: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = run.emit();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors: Vec<(u8, &str, &crate::tensor::Tensor<T>)> = model
        .store
        .params()
        .map(|(n, t)| (0u8, n, t))
        .chain(model.store.buffers().map(|(n, t)| (1u8, n, t)))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (kind, name, t) in tensors {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of checkpoint, wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format { offset: at as u64, message: "invalid UTF-8".into() })
    }
}

/// Rebuilds a model and its run configuration from checkpoint bytes.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, RunConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format { offset: 0, message: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let run = RunConfig::parse(&r.string()?)?;
    let mut model = Model::<T>::new(run.model.clone(), run.train.seed)?;
    let count = r.u32()? as usize;
    let expected = model.store.params().count() + model.store.buffers().count();
    if count != expected {
        return Err(r.fail(format!("checkpoint holds {count} tensors, model has {expected}")));
    }
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let at = r.pos;
        let target = match kind {
            0 => model.store.find_param(&name).map(|id| model.store.param_mut(id)),
            1 => model.store.find_buffer(&name).map(|id| model.store.buffer_mut(id)),
            k => return Err(Error::Format { offset: at as u64 - 1, message: format!("unknown tensor kind {k}") }),
        };
        let target = target.ok_or_else(|| Error::Format { offset: at as u64, message: format!("unexpected tensor {name:?}") })?;
        if target.shape() != shape.as_slice() {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("tensor {name:?} has shape {shape:?}, model expects {:?}", target.shape()),
            });
        }
        let n = target.numel();
        let raw = r.take(n * 4)?;
        for (d, c) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *d = T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((model, run))
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, run: &RunConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, run))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, RunConfig)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SpsStage};

    fn small() -> RunConfig {
        let mut run = RunConfig {
            model: ModelConfig { embed_dim: 16, stem_channels: 4, sps_stages: vec![SpsStage::sped(16)], depth: 1, ..ModelConfig::toy() },
            ..RunConfig::default()
        };
        run.train.seed = 3;
        run
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let run = small();
        let mut m = Model::<f32>::new(run.model.clone(), 99).unwrap();
        let id = m.store.find_buffer("sps.stem_bn.running_mean").unwrap();
        m.store.buffer_mut(id).data_mut()[0] = 0.375;
        let bytes = to_bytes(&m, &run);
        let (back, run2) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(run2, run);
        for ((a, x), (b, y)) in m.store.params().zip(back.store.params()) {
            assert_eq!(a, b);
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(back.store.buffer(id).data()[0], 0.375);
        assert_eq!(to_bytes(&back, &run2), bytes);
    }

    #[test]
    fn corrupt_input_reports_offset() {
        let run = small();
        let m = Model::<f32>::new(run.model.clone(), 0).unwrap();
        let bytes = to_bytes(&m, &run);
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 2]), Err(Error::Format { .. })));
        assert!(matches!(from_bytes::<f32>(b"NOTCKPT..."), Err(Error::Format { offset: 0, .. })));
    }
}
