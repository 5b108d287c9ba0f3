//! Named parameter storage, freeze masks and the binary checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "PCNCKPT\0"
//! version    u32      1
//! count      u32      number of records
//! record*    name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!            payload f64 × product(dims), row-major
//! ```
//!
//! Parameter records are named `<group>.<layer>.<tensor>`; records whose
//! name starts with `meta.` carry run metadata (stage, part grid size).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which sub-network a parameter belongs to; stages freeze whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Trunk,
    Rpn,
    Original,
    Context,
    PartHead,
    Lstm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Trunk,
        ParamGroup::Rpn,
        ParamGroup::Original,
        ParamGroup::Context,
        ParamGroup::PartHead,
        ParamGroup::Lstm,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Trunk => "trunk",
            ParamGroup::Rpn => "rpn",
            ParamGroup::Original => "original",
            ParamGroup::Context => "context",
            ParamGroup::PartHead => "part",
            ParamGroup::Lstm => "lstm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A set of parameter groups, used as the trainable mask of a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn empty() -> Self {
        GroupSet(0)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; its group comes from the name prefix.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let group = ParamGroup::from_name(&name)
            .unwrap_or_else(|| panic!("parameter `{name}` has no group prefix"));
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces values by name from checkpoint records; every parameter
    /// must be present with the same shape.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = (*t).clone();
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

/// Materializes parameters as graph leaves for one forward pass. Parameters
/// outside the trainable set enter as constants, so no gradient is computed
/// through them.
pub struct Binder<'a> {
    params: &'a Params,
    trainable: GroupSet,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params, trainable: GroupSet) -> Self {
        Binder {
            params,
            trainable,
            vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'a Params {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let v = g.leaf(e.value.clone(), self.trainable.contains(e.group));
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of trainable parameters that took part in the pass.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !g.requires_grad(v) {
                    return None;
                }
                g.grad(v).map(|t| (ParamId(i), t.clone()))
            })
            .collect()
    }
}

pub fn write_checkpoint(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()) as Real);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
