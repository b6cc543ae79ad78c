//! Binary model archive: config, vocabulary and every parameter tensor.
//!
//! Layout (little endian): magic, `u32` version, `u8` element width (4 or 8),
//! length-prefixed config JSON, length-prefixed vocabulary JSON, `u32` tensor
//! count, then per tensor its name, rank, dims and raw values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lexer::Vocabulary;
use crate::model::{Afpnet, Detector, ModelParams};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"AFPNETCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

pub fn to_bytes<T: Scalar>(detector: &Detector<T>) -> Result<Vec<u8>> {
    let width = std::mem::size_of::<T>();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(width as u8);
    put_bytes(&mut out, serde_json::to_string(detector.config())?.as_bytes());
    put_bytes(&mut out, detector.vocab.to_json()?.as_bytes());
    let tensors = detector.model.params().tensors();
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        put_bytes(&mut out, t.name.as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(&mut out, d as u64);
        }
        for v in t.data {
            if width == 4 {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn exact<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact(what)?))
    }

    fn bytes(&mut self, what: &str) -> Result<Vec<u8>> {
        let len = self.u64(what)? as usize;
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if len > remaining {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses an archive, casting stored values to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Detector<T>> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.exact::<8>("magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = r.exact::<1>("element width")?[0];
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported element width {width}")));
    }
    let config: ModelConfig = serde_json::from_str(&r.string("config")?)?;
    config.validate()?;
    let vocab = Vocabulary::from_json(&r.string("vocabulary")?)?;

    let mut params = ModelParams::<T>::zeros(&config, vocab.len());
    let count = r.u32("tensor count")? as usize;
    let expected = params.tensors().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors stored, model has {expected}")));
    }
    for t in params.tensors_mut() {
        let name = r.string("tensor name")?;
        if name != t.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", t.name)));
        }
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                t.shape
            )));
        }
        for slot in t.data.iter_mut() {
            let v = if width == 4 {
                f32::from_le_bytes(r.exact(&name)?) as f64
            } else {
                f64::from_le_bytes(r.exact(&name)?)
            };
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds a non-finite value")));
            }
            *slot = T::lit(v);
        }
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Detector::new(Afpnet::new(config, params)?, vocab)
}

pub fn save<T: Scalar>(detector: &Detector<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(detector)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Detector<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
