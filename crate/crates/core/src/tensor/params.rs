use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Partition of the trainable parameters. Every parameter belongs to
/// exactly one group; fine-tuning regimes are expressed as sets of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    Decoder,
    HyperEncoder,
    HyperDecoder,
    EntropyModel,
    Task,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Encoder,
        Group::Decoder,
        Group::HyperEncoder,
        Group::HyperDecoder,
        Group::EntropyModel,
        Group::Task,
    ];

    /// The five groups that make up the codec.
    pub const CODEC: [Group; 5] = [
        Group::Encoder,
        Group::Decoder,
        Group::HyperEncoder,
        Group::HyperDecoder,
        Group::EntropyModel,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Group::Encoder => 0,
            Group::Decoder => 1,
            Group::HyperEncoder => 2,
            Group::HyperDecoder => 3,
            Group::EntropyModel => 4,
            Group::Task => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::HyperEncoder => "hyper_encoder",
            Group::HyperDecoder => "hyper_decoder",
            Group::EntropyModel => "entropy_model",
            Group::Task => "task",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub group: Group,
    /// Gradient from the last backward pass, same shape as `value`.
    pub grad: Option<Tensor>,
}

/// Named trainable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(
            name,
            Parameter {
                value,
                group,
                grad: None,
            },
        );
        Ok(())
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter {name:?}")));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn groups(&self) -> BTreeSet<Group> {
        self.entries.values().map(|p| p.group).collect()
    }

    /// Sub-set holding only parameters of the given groups.
    pub fn subset(&self, groups: &[Group]) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| groups.contains(&p.group))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over names, group tags, shapes and little-endian values.
    /// Gradients are not part of the digest.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    pub fn group_digest(&self, group: Group) -> String {
        self.digest_filtered(|g| g == group)
    }

    pub fn group_digests(&self) -> BTreeMap<Group, String> {
        Group::ALL
            .into_iter()
            .map(|g| (g, self.group_digest(g)))
            .collect()
    }

    fn digest_filtered(&self, keep: impl Fn(Group) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| keep(p.group)) {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update([p.group.tag()]);
            hasher.update((p.value.shape().len() as u64).to_le_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
