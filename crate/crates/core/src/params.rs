//! Shared (task-independent) parameters, grouped by subnetwork.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Subnetwork a shared tensor belongs to. Freezing and decay act on groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frame projection into the encoder.
    EncoderInput,
    EncoderAttention,
    /// Feedforward sublayers, their norms, and the encoder's final norm.
    EncoderFeedForward,
    CtcHead,
    /// Everything in the attention decoder, including its embedding and output layer.
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::EncoderInput,
        ParamGroup::EncoderAttention,
        ParamGroup::EncoderFeedForward,
        ParamGroup::CtcHead,
        ParamGroup::Decoder,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::EncoderInput
                | ParamGroup::EncoderAttention
                | ParamGroup::EncoderFeedForward
                | ParamGroup::CtcHead
        )
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::EncoderInput => "encoder_input",
            ParamGroup::EncoderAttention => "encoder_attention",
            ParamGroup::EncoderFeedForward => "encoder_feedforward",
            ParamGroup::CtcHead => "ctc_head",
            ParamGroup::Decoder => "decoder",
        };
        f.write_str(s)
    }
}

/// Set of groups, stored as one flag per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn none() -> Self {
        GroupSet(0)
    }

    pub fn all() -> Self {
        ParamGroup::ALL.iter().copied().collect()
    }

    fn bit(g: ParamGroup) -> u8 {
        1 << (g as u8)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn with(mut self, g: ParamGroup) -> Self {
        self.0 |= Self::bit(g);
        self
    }

    pub fn without(mut self, g: ParamGroup) -> Self {
        self.0 &= !Self::bit(g);
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<ParamGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ParamGroup>>(iter: I) -> Self {
        iter.into_iter().fold(GroupSet::none(), GroupSet::with)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl SharedParams {
    pub(crate) fn from_parts(
        names: Vec<String>,
        groups: Vec<ParamGroup>,
        tensors: Vec<Tensor>,
    ) -> Self {
        assert!(names.len() == groups.len() && names.len() == tensors.len());
        SharedParams {
            names,
            groups,
            tensors,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Number of scalars, N.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn group_scalar_count(&self, group: ParamGroup) -> usize {
        self.iter_group(group).map(|(_, t)| t.len()).sum()
    }

    pub fn iter_group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .filter(move |((_, g), _)| **g == group)
            .map(|((n, _), t)| (n.as_str(), t))
    }

    pub fn fingerprint_group(&self, group: ParamGroup) -> String {
        fingerprint(self.iter_group(group))
    }

    pub fn fingerprints(&self) -> BTreeMap<ParamGroup, String> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.fingerprint_group(g)))
            .collect()
    }

    /// Digest over every shared tensor.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.names.iter().map(String::as_str).zip(&self.tensors))
    }
}

/// SHA-256 over names, shapes and little-endian values.
pub fn fingerprint<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
