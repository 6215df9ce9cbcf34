//! Named parameter storage with per-parameter adaptive-moment state, and the
//! binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "NMDR" 0x01  count:u32
//! repeated count times:
//!   name_len:u32  name:utf8  rank:u32  dims:u32*rank  data:f32*product(dims)
//! ```
//!
//! Moment tensors are stored as `<name>.m1` / `<name>.m2` and the step counter
//! as a one-element tensor named `step`.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMDR";
pub const FORMAT_VERSION: u8 = 0x01;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real = f32> {
    pub m1: Tensor<T>,
    pub m2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        self.moments.insert(
            name.to_string(),
            Moments {
                m1: Tensor::zeros(t.shape()),
                m2: Tensor::zeros(t.shape()),
            },
        );
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<(&mut Tensor<T>, &mut Moments<T>)> {
        let p = self.params.get_mut(name)?;
        let m = self.moments.get_mut(name)?;
        Some((p, m))
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Overwrites the value of an existing parameter (moments untouched).
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: {:?} vs {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        *slot = t;
        Ok(())
    }

    /// Copies every parameter whose name starts with `from` into `target`,
    /// renaming the prefix to `to`. Missing targets are inserted.
    pub fn copy_prefixed_into(&self, from: &str, to: &str, target: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in &self.params {
            if let Some(rest) = name.strip_prefix(from) {
                let new_name = format!("{to}{rest}");
                if target.contains(&new_name) {
                    target.set(&new_name, t.clone())?;
                } else {
                    target.insert(&new_name, t.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Converts element type (moments and step included).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            moments: self
                .moments
                .iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        Moments {
                            m1: m.m1.cast(),
                            m2: m.m2.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

impl ParamSet<f32> {
    /// Bitwise content hash over names, values, moments and step.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.params {
            k.hash(&mut h);
            v.bit_hash(&mut h);
        }
        for m in self.moments.values() {
            m.m1.bit_hash(&mut h);
            m.m2.bit_hash(&mut h);
        }
        self.step.hash(&mut h);
        h.finish()
    }

    /// Flattens into checkpoint entries. `step_key` names the step scalar.
    pub fn to_entries(&self, step_key: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(self.params.len() * 3 + 1);
        for (k, v) in &self.params {
            out.push((k.clone(), v.clone()));
            let m = &self.moments[k];
            out.push((format!("{k}.m1"), m.m1.clone()));
            out.push((format!("{k}.m2"), m.m2.clone()));
        }
        out.push((step_key.to_string(), Tensor::scalar(self.step as f32)));
        out
    }

    /// Rebuilds from entries produced by [`ParamSet::to_entries`]. Only names
    /// starting with `prefix` are considered (empty prefix takes everything).
    pub fn from_entries(entries: &BTreeMap<String, Tensor<f32>>, prefix: &str, step_key: &str) -> Result<Self> {
        let mut ps = ParamSet::new();
        for (k, v) in entries {
            if !k.starts_with(prefix) || k == step_key || k.ends_with(".m1") || k.ends_with(".m2") {
                continue;
            }
            ps.insert(k, v.clone())?;
            let get_m = |suffix: &str| -> Result<Tensor<f32>> {
                let t = entries
                    .get(&format!("{k}.{suffix}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing moment `{k}.{suffix}`")))?;
                if t.shape() != v.shape() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for `{k}`")));
                }
                Ok(t.clone())
            };
            let m = Moments {
                m1: get_m("m1")?,
                m2: get_m("m2")?,
            };
            ps.moments.insert(k.clone(), m);
        }
        let step = entries
            .get(step_key)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{step_key}`")))?
            .item();
        if step < 0.0 || step.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("invalid step counter {step}")));
        }
        ps.step = step as u64;
        Ok(ps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_entries("step"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        Self::from_entries(&entries, "", "step")
    }
}

pub fn encode_checkpoint(entries: &[(String, Tensor<f32>)], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode_checkpoint(r: &mut impl Read) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    if magic[4] != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", magic[4])));
    }
    let count = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(nb).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    encode_checkpoint(entries, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    decode_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.insert("wm.a", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.25]])).unwrap();
        ps.insert("wm.b", Tensor::scalar(7.0)).unwrap();
        ps
    }

    #[test]
    fn duplicate_and_nonfinite_rejected() {
        let mut ps = sample_set();
        assert!(matches!(ps.insert("wm.a", Tensor::scalar(0.0)), Err(Error::DuplicateParameter(_))));
        assert!(matches!(ps.insert("x", Tensor::scalar(f32::NAN)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn header_layout_is_exact() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut buf = Vec::new();
        encode_checkpoint(&ps.to_entries("step"), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NMDR");
        assert_eq!(buf[4], 0x01);
        // four entries: w, w.m1, w.m2, step
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), 4);
        // first entry: name "w"
        assert_eq!(u32::from_le_bytes(buf[9..13].try_into().unwrap()), 1);
        assert_eq!(buf[13], b'w');
        assert_eq!(u32::from_le_bytes(buf[14..18].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(buf[18..22].try_into().unwrap()), 1); // dim
        assert_eq!(f32::from_le_bytes(buf[22..26].try_into().unwrap()), 1.0);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let mut buf = Vec::new();
        encode_checkpoint(&sample_set().to_entries("step"), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut ver = buf.clone();
        ver[4] = 2;
        assert!(matches!(decode_checkpoint(&mut ver.as_slice()), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(decode_checkpoint(&mut &short[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nmdr");
        let mut ps = sample_set();
        ps.bump_step();
        ps.bump_step();
        ps.save(&path).unwrap();
        let back = ParamSet::load(&path).unwrap();
        assert_eq!(back, ps);
        assert_eq!(back.step(), 2);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), rows in 1usize..4) {
            let cols = vals.len();
            let data: Vec<f32> = (0..rows).flat_map(|_| vals.iter().copied()).collect();
            let mut ps = ParamSet::new();
            ps.insert("layer.w", Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
            let mut buf = Vec::new();
            encode_checkpoint(&ps.to_entries("step"), &mut buf).unwrap();
            let entries = decode_checkpoint(&mut buf.as_slice()).unwrap();
            let back = ParamSet::from_entries(&entries, "", "step").unwrap();
            prop_assert_eq!(back, ps);
        }
    }
}
