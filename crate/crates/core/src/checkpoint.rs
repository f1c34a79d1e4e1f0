//! Binary checkpoint format shared by every trainable network.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGK1"  version:u32  count:u32
//! count x { name_len:u32 name:utf8 dtype:u8 rank:u32 extents:u64*rank values }
//! meta_count:u32  meta_count x { key_len:u32 key value_len:u32 value }
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::tensor::{DType, Element, Tensor};
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 4] = b"MGK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Convert to `T`; exact when the stored dtype is `T`.
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    pub meta: BTreeMap<String, String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_values<T: Element>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.ok_or_else(|| Error::Checkpoint("tensor extent overflows".into()))?;
    let size = T::DTYPE.size();
    let bytes = r.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    Tensor::new(shape, bytes.chunks_exact(size).map(T::read_le).collect())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    /// Add every parameter as `prefix + name`.
    pub fn push_params<T: Element>(&mut self, prefix: &str, params: &ParamStore<T>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries under `prefix` with the prefix stripped, converted to `T`.
    pub fn with_prefix<T: Element>(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.to()))).collect()
    }

    /// Overwrite `params` from entries under `prefix`.
    pub fn load_params<T: Element>(&self, prefix: &str, params: &mut ParamStore<T>) -> Result<()> {
        let entries = self.with_prefix::<T>(prefix);
        params.load_named(entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta_str(key)?;
        raw.parse().map_err(|_| Error::Checkpoint(format!("metadata `{key}` = `{raw}` does not parse")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype() as u8);
            match t {
                StoredTensor::F32(t) => put_values(&mut out, t),
                StoredTensor::F64(t) => put_values(&mut out, t),
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let t = match DType::from_tag(tag) {
                Some(DType::F32) => StoredTensor::F32(read_values(&mut r)?),
                Some(DType::F64) => StoredTensor::F64(read_values(&mut r)?),
                None => return Err(Error::Checkpoint(format!("unknown dtype tag {tag}"))),
            };
            ck.tensors.push((name, t));
        }
        let meta = r.u32()?;
        for _ in 0..meta {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        digest_bytes(&self.to_bytes())
    }

    /// Write atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn list<V: ToString>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::Checkpoint(format!("bad list entry `{p}`"))))
        .collect()
}

/// Hex SHA-256 of `bytes`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn put_unet_config(ck: &mut Checkpoint, prefix: &str, cfg: &UNetConfig) {
    ck.set_meta(format!("{prefix}image_size"), cfg.image_size);
    ck.set_meta(format!("{prefix}in_channels"), cfg.in_channels);
    ck.set_meta(format!("{prefix}base_channels"), cfg.base_channels);
    ck.set_meta(format!("{prefix}channel_mults"), list(&cfg.channel_mults));
    ck.set_meta(format!("{prefix}blocks_per_scale"), cfg.blocks_per_scale);
    ck.set_meta(format!("{prefix}time_embed_dim"), cfg.time_embed_dim);
    ck.set_meta(format!("{prefix}cond_embed_classes"), cfg.cond_embed_classes);
}

pub fn get_unet_config(ck: &Checkpoint, prefix: &str) -> Result<UNetConfig> {
    Ok(UNetConfig {
        image_size: ck.meta_parse(&format!("{prefix}image_size"))?,
        in_channels: ck.meta_parse(&format!("{prefix}in_channels"))?,
        base_channels: ck.meta_parse(&format!("{prefix}base_channels"))?,
        channel_mults: parse_list(ck.meta_str(&format!("{prefix}channel_mults"))?)?,
        blocks_per_scale: ck.meta_parse(&format!("{prefix}blocks_per_scale"))?,
        time_embed_dim: ck.meta_parse(&format!("{prefix}time_embed_dim"))?,
        cond_embed_classes: ck.meta_parse(&format!("{prefix}cond_embed_classes"))?,
    })
}

/// Floats are stored through their bit pattern so the round trip is exact.
pub fn put_schedule_config(ck: &mut Checkpoint, cfg: &ScheduleConfig) {
    ck.set_meta("schedule.kind", cfg.kind.as_str());
    ck.set_meta("schedule.t_train", cfg.t_train);
    ck.set_meta("schedule.beta_start", format!("{:#018x}", cfg.beta_start.to_bits()));
    ck.set_meta("schedule.beta_end", format!("{:#018x}", cfg.beta_end.to_bits()));
    ck.set_meta("schedule.t_sample", cfg.t_sample);
}

fn parse_f64_bits(s: &str) -> Result<f64> {
    let hex = s.strip_prefix("0x").ok_or_else(|| Error::Checkpoint(format!("bad float bits `{s}`")))?;
    u64::from_str_radix(hex, 16).map(f64::from_bits).map_err(|_| Error::Checkpoint(format!("bad float bits `{s}`")))
}

pub fn get_schedule_config(ck: &Checkpoint) -> Result<ScheduleConfig> {
    Ok(ScheduleConfig {
        kind: ScheduleKind::parse(ck.meta_str("schedule.kind")?)?,
        t_train: ck.meta_parse("schedule.t_train")?,
        beta_start: parse_f64_bits(ck.meta_str("schedule.beta_start")?)?,
        beta_end: parse_f64_bits(ck.meta_str("schedule.beta_end")?)?,
        t_sample: ck.meta_parse("schedule.t_sample")?,
    })
}
