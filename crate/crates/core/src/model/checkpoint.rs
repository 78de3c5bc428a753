//! Binary parameter checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes   "CARSACK1"
//! n_config     u32
//! n_config ×   name_len u16 | name (UTF-8) | value f64
//! n_arrays     u32
//! n_arrays ×   name_len u16 | name (UTF-8) | rows u32 | cols u32 | rows·cols × f64 (row-major)
//! ```
//!
//! Config entries are `hidden`, `attn_dim`, `pool_layers`, `pool_keep`,
//! `fc_hidden` and `classes`, optionally followed by `components`, the
//! number of components of the data the model was trained on. Arrays
//! appear in [`ModelParams::named`] order.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::adcore::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CARSACK1";

/// Parameters plus the component count they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub components: Option<usize>,
}

fn config_entries(c: &ModelConfig) -> [(&'static str, f64); 6] {
    [
        ("hidden", c.hidden as f64),
        ("attn_dim", c.attn_dim as f64),
        ("pool_layers", c.pool_layers as f64),
        ("pool_keep", c.pool_keep),
        ("fc_hidden", c.fc_hidden as f64),
        ("classes", c.classes as f64),
    ]
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let mut buf = Vec::with_capacity(64 + params.count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let mut entries = config_entries(&params.config).to_vec();
    if let Some(m) = ckpt.components {
        entries.push(("components", m as f64));
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, v) in entries {
        put_name(&mut buf, name);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, a) in named {
        put_name(&mut buf, &name);
        buf.extend_from_slice(&(a.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(a.cols() as u32).to_le_bytes());
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.path,
                0,
                format!("truncated checkpoint at byte {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::parse(self.path, 0, "non-UTF-8 entry name"))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, 0, "not a CARSA checkpoint (bad magic)"));
    }

    let mut config = ModelConfig::default();
    let mut components = None;
    let n_config = r.u32()?;
    for _ in 0..n_config {
        let name = r.name()?;
        let v = r.f64()?;
        let as_count = || -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::parse(path, 0, format!("config {name} = {v} is not a count")))
            }
        };
        match name.as_str() {
            "hidden" => config.hidden = as_count()?,
            "attn_dim" => config.attn_dim = as_count()?,
            "pool_layers" => config.pool_layers = as_count()?,
            "pool_keep" => config.pool_keep = v,
            "fc_hidden" => config.fc_hidden = as_count()?,
            "classes" => config.classes = as_count()?,
            "components" => components = Some(as_count()?),
            other => {
                return Err(Error::parse(path, 0, format!("unknown config entry {other:?}")))
            }
        }
    }
    config.validate()?;

    let mut params = ModelParams::zeros(&config)?;
    let n_arrays = r.u32()? as usize;
    let mut slots = params.named_mut();
    if n_arrays != slots.len() {
        return Err(Error::parse(
            path,
            0,
            format!("checkpoint holds {n_arrays} arrays, configuration needs {}", slots.len()),
        ));
    }
    for (expected, slot) in slots.iter_mut() {
        let name = r.name()?;
        if &name != expected {
            return Err(Error::parse(
                path,
                0,
                format!("array {name:?} found where {expected:?} was expected"),
            ));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != slot.shape() {
            return Err(Error::parse(
                path,
                0,
                format!("{name} has shape ({rows}, {cols}), expected {:?}", slot.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        **slot = Array::from_vec(rows, cols, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, 0, "trailing bytes after checkpoint"));
    }
    drop(slots);
    Ok(Checkpoint { params, components })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 3,
            attn_dim: 4,
            pool_layers: 2,
            pool_keep: 0.75,
            fc_hidden: 5,
            classes: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ModelParams::init(&small(), 11).unwrap();
        params.w1.data_mut()[0] = -0.0;
        params.b2.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            params: params.clone(),
            components: Some(17),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.components, Some(17));
        let back = loaded.params;
        assert_eq!(back.config, params.config);
        for ((n1, a), (n2, b)) in params.named().into_iter().zip(back.named()) {
            assert_eq!(n1, n2);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{n1}");
        }
        assert_eq!(
            to_bytes(&Checkpoint { params: back, components: Some(17) }),
            to_bytes(&ckpt)
        );
    }

    #[test]
    fn layout_starts_with_magic_and_config() {
        let params = ModelParams::zeros(&small()).unwrap();
        let bytes = to_bytes(&Checkpoint { params, components: None });
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 6);
        assert_eq!(&bytes[14..20], b"hidden");
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3.0);
    }

    #[test]
    fn rejects_corruption() {
        let params = ModelParams::zeros(&small()).unwrap();
        let bytes = to_bytes(&Checkpoint { params, components: None });
        let p = Path::new("mem");
        assert!(from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra, p).is_err());
    }
}
