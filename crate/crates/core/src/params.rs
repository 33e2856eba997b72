//! Learnable parameter storage, grouped for gradient modulation.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The two separately modulated halves of a QDMA unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QdmaPart {
    /// Differential attention plus the refinement layer.
    Attn,
    /// Temporal convolution bypass.
    Tcn,
}

impl QdmaPart {
    pub const ALL: [QdmaPart; 2] = [QdmaPart::Attn, QdmaPart::Tcn];

    pub fn id(self) -> &'static str {
        match self {
            QdmaPart::Attn => "qdma.attn",
            QdmaPart::Tcn => "qdma.tcn",
        }
    }
}

impl fmt::Display for QdmaPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Qdma { modality: Modality, part: QdmaPart },
    Shared,
}

impl ParamGroup {
    pub fn qdma(modality: Modality, part: QdmaPart) -> Self {
        ParamGroup::Qdma { modality, part }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.0.iter().enumerate().map(|(i, v)| (ParamId(i), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Number of scalar entries, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a gradient-carrying leaf.
    pub fn load(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Stable hash of all parameter bits, for trajectory comparisons.
    pub fn bit_hash(&self) -> u64 {
        let mut h = Fnv64::default();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// FNV-1a; unlike `DefaultHasher` its output is fixed across releases.
pub(crate) struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}
