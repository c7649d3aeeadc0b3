//! Binary weights file.
//!
//! Layout (little-endian): magic `VFIQA\0`, format version `u16`, tensor
//! count `u32`, then per tensor: name length `u16` and UTF-8 bytes, dtype
//! tag `u8`, rank `u8`, dims as `u32`, raw data. Model hyperparameters are
//! stored as `config.*` tensors alongside the weights.

use std::path::Path;

use vfiqa_tensor::{DType, Element, Tensor};

use crate::config::{ModelConfig, PyramidConfig, StConfig};
use crate::error::{Error, Result};
use crate::model::MetricModel;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 6] = b"VFIQA\0";
pub const FORMAT_VERSION: u16 = 1;
const TAG_U32: u8 = 2;

enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

struct Record {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], tag: u8, data: &[u8]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.push(u8::try_from(dims.len()).map_err(|_| Error::Format(format!("`{name}` has too many axes")))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("`{name}` extent {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(data);
    Ok(())
}

fn config_records(cfg: &ModelConfig) -> Vec<(&'static str, Vec<u32>)> {
    let st = &cfg.st;
    vec![
        ("config.frames", vec![cfg.frames as u32]),
        ("config.channels", cfg.pyramid.channels.iter().map(|&c| c as u32).collect()),
        ("config.embed_dim", vec![st.embed_dim as u32]),
        ("config.heads", vec![st.heads as u32]),
        ("config.window", vec![st.window as u32]),
        ("config.use_layer_norm", vec![st.use_layer_norm as u32]),
        ("config.blocks_per_level", vec![st.blocks_per_level as u32]),
        ("config.mlp_ratio", vec![st.mlp_ratio as u32]),
    ]
}

pub fn to_bytes<T: Element>(model: &MetricModel<T>) -> Result<Vec<u8>> {
    let configs = config_records(&model.config);
    let count = configs.len() + 1 + model.params.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, values) in &configs {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        put_record(&mut out, name, &[values.len()], TAG_U32, &bytes)?;
    }
    let slope = model.config.pyramid.leaky_slope.to_le_bytes();
    put_record(&mut out, "config.leaky_slope", &[1], DType::F64.tag(), &slope)?;
    for (name, t) in model.params.iter() {
        put_record(&mut out, name, t.shape(), T::DTYPE.tag(), &T::to_le_bytes_vec(t.data()))?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a vfiqa weights file (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let width = match tag {
            0 | TAG_U32 => 4,
            1 => 8,
            t => return Err(Error::Format(format!("`{name}` has unknown dtype tag {t}"))),
        };
        let raw = r.take(numel.saturating_mul(width), &name)?;
        let payload = match tag {
            0 => Payload::F32(f32::from_le_bytes_slice(raw)),
            1 => Payload::F64(f64::from_le_bytes_slice(raw)),
            _ => Payload::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        records.push(Record { name, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<MetricModel<T>> {
    let records = read_records(bytes)?;
    let find_u32 = |name: &str| -> Result<&[u32]> {
        match records.iter().find(|r| r.name == name).map(|r| &r.payload) {
            Some(Payload::U32(v)) if !v.is_empty() => Ok(v),
            _ => Err(Error::Format(format!("missing or malformed `{name}`"))),
        }
    };
    let scalar = |name: &str| find_u32(name).map(|v| v[0] as usize);
    let leaky_slope = match records.iter().find(|r| r.name == "config.leaky_slope").map(|r| &r.payload) {
        Some(Payload::F64(v)) if v.len() == 1 => v[0],
        _ => return Err(Error::Format("missing or malformed `config.leaky_slope`".into())),
    };
    let config = ModelConfig {
        frames: scalar("config.frames")?,
        pyramid: PyramidConfig {
            channels: find_u32("config.channels")?.iter().map(|&c| c as usize).collect(),
            leaky_slope,
        },
        st: StConfig {
            embed_dim: scalar("config.embed_dim")?,
            heads: scalar("config.heads")?,
            window: scalar("config.window")?,
            use_layer_norm: scalar("config.use_layer_norm")? != 0,
            blocks_per_level: scalar("config.blocks_per_level")?,
            mlp_ratio: scalar("config.mlp_ratio")?,
        },
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let mut params = ParamStore::new();
    for r in records.into_iter().filter(|r| !r.name.starts_with("config.")) {
        let data: Vec<T> = match r.payload {
            Payload::F32(v) if T::DTYPE == DType::F32 => v.into_iter().map(|x| T::from_f32(x).unwrap()).collect(),
            Payload::F64(v) if T::DTYPE == DType::F64 => v.into_iter().map(|x| T::from_f64(x).unwrap()).collect(),
            Payload::F32(v) => v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect(),
            Payload::F64(v) => v.into_iter().map(T::from_f64_lossy).collect(),
            Payload::U32(_) => return Err(Error::Format(format!("weight `{}` stored as integers", r.name))),
        };
        params.insert(r.name, Tensor::new(r.dims, data)?)?;
    }
    MetricModel::from_parts(config, params)
}

pub fn save<T: Element>(model: &MetricModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(Error::io(path))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<MetricModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MetricModel<f32> {
        let mut cfg = ModelConfig::with_frames(2);
        cfg.st.use_layer_norm = true;
        MetricModel::new(cfg, 9).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&model()).unwrap();
        assert_eq!(&bytes[..6], b"VFIQA\0");
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), FORMAT_VERSION);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, model().params.len() + 9);
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        let m = model();
        let back: MetricModel<f32> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let wide = m.to_f64();
        let back: MetricModel<f64> = from_bytes(&to_bytes(&wide).unwrap()).unwrap();
        let (_, a) = wide.params.iter().nth(3).unwrap();
        let (_, b) = back.params.iter().nth(3).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes::<f32>(&magic).is_err());
        let mut version = bytes;
        version[6] = 99;
        assert!(from_bytes::<f32>(&version).is_err());
    }
}
