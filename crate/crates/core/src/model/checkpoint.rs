//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "SGKD" | version u16 | entry count u64
//! per entry: name length u32 | name bytes | dtype u8 | rank u32 | extents u64… | values
//! config length u64 | canonical key-sorted `key=value` lines
//! CRC-64/XZ of every preceding byte, u64
//! ```
//!
//! Entries hold every parameter plus `<bn>.running_mean` / `<bn>.running_var`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{SiameseConfig, SiameseModel};
use crate::error::{Error, Result};
use crate::nn::{Mode, RunningStats};
use crate::tensor::{DType, ParamMap, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGKD";
pub const CHECKPOINT_VERSION: u16 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn config_block<T>(model: &SiameseModel<T>) -> String {
    let c = &model.config;
    let mut kv = BTreeMap::new();
    kv.insert("model.n_filters".to_string(), c.n_filters.to_string());
    kv.insert("model.filter_schedule".into(), join(&c.filter_schedule));
    kv.insert("model.strides".into(), join(&c.strides));
    kv.insert(
        "model.pool_after".into(),
        join(&c.pool_after.iter().map(|&p| u8::from(p)).collect::<Vec<_>>()),
    );
    kv.insert("model.input_side".into(), c.input_side.to_string());
    kv.insert("model.num_classes".into(), c.num_classes.to_string());
    kv.insert("model.dropout_p".into(), c.dropout_p.to_string());
    kv.insert("model.shared".into(), c.shared.to_string());
    kv.insert("state.iteration".into(), model.iteration.to_string());
    kv.insert(
        "state.mode".into(),
        match model.mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        }
        .into(),
    );
    for (name, rs) in &model.bn_state {
        let tracked = rs.tracked.map_or("none".to_string(), |t| t.to_string());
        kv.insert(format!("bn_tracked.{name}"), tracked);
    }
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn write_entry<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Real>(model: &SiameseModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let n_entries = model.params.len() + 2 * model.bn_state.len();
    out.extend_from_slice(&(n_entries as u64).to_le_bytes());
    for (name, t) in &model.params {
        write_entry(&mut out, name, t);
    }
    for (name, rs) in &model.bn_state {
        let c = rs.channels();
        write_entry(&mut out, &format!("{name}.running_mean"), &Tensor::new(&[c], rs.mean.clone()).unwrap());
        write_entry(&mut out, &format!("{name}.running_var"), &Tensor::new(&[c], rs.var.clone()).unwrap());
    }
    let cfg = config_block(model);
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let sum = CRC64.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save<T: Real>(model: &SiameseModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<SiameseModel<T>> {
    load_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

fn parse_list<V: std::str::FromStr>(s: &str) -> Option<Vec<V>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub fn load_bytes<T: Real>(bytes: &[u8]) -> Result<SiameseModel<T>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 6 + 8 + 8 {
        return Err(Error::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let n_entries = r.len()?;
    let mut entries: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag for `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{name}` stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("`{name}` extents overflow")))?;
        let raw = r.take(count.checked_mul(dtype.size()).ok_or(Error::Truncated)?)?;
        let data = raw.chunks(dtype.size()).map(T::read_le).collect();
        entries.insert(name, Tensor::new(&shape, data)?);
    }
    let cfg_len = r.len()?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }

    let mut kv = BTreeMap::new();
    for line in cfg_text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing config key `{k}`")))
    };
    let bad = |k: &str| Error::Checkpoint(format!("bad value for `{k}`"));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
    let config = SiameseConfig {
        n_filters: num("model.n_filters")?,
        filter_schedule: parse_list(get("model.filter_schedule")?).ok_or_else(|| bad("model.filter_schedule"))?,
        strides: parse_list(get("model.strides")?).ok_or_else(|| bad("model.strides"))?,
        pool_after: parse_list::<u8>(get("model.pool_after")?)
            .ok_or_else(|| bad("model.pool_after"))?
            .into_iter()
            .map(|v| v != 0)
            .collect(),
        input_side: num("model.input_side")?,
        num_classes: num("model.num_classes")?,
        dropout_p: get("model.dropout_p")?.parse().map_err(|_| bad("model.dropout_p"))?,
        shared: get("model.shared")?.parse().map_err(|_| bad("model.shared"))?,
    };
    config.validate()?;
    let iteration = get("state.iteration")?.parse().map_err(|_| bad("state.iteration"))?;
    let mode = match get("state.mode")? {
        "train" => Mode::Train,
        "eval" => Mode::Eval,
        _ => return Err(bad("state.mode")),
    };

    let mut params = ParamMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = entries
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        params.insert(name, t);
    }
    let mut bn_state = BTreeMap::new();
    for (name, c) in config.bn_layers() {
        let mut take = |suffix: &str| -> Result<Vec<T>> {
            let key = format!("{name}.{suffix}");
            let t = entries.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
            if t.shape() != [c] {
                return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", t.shape())));
            }
            Ok(t.into_data())
        };
        let mean = take("running_mean")?;
        let var = take("running_var")?;
        let key = format!("bn_tracked.{name}");
        let tracked = match get(&key)? {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad(&key))?),
        };
        bn_state.insert(name, RunningStats { mean, var, tracked });
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected entry `{extra}`")));
    }
    Ok(SiameseModel { config, params, bn_state, mode, iteration })
}
