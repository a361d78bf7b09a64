use std::collections::BTreeMap;

use super::rng::{uniform, Rng};
use super::Tensor;

/// Named parameters keyed by dot-separated path, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.map.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.map.remove(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose path starts with `prefix`, paths unchanged.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let map = self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { map }
    }

    /// Entries under `prefix`, with the prefix removed from their paths.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let map = self.map.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))).collect();
        ParamStore { map }
    }

    /// Every path with `prefix` prepended.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let map = self.map.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect();
        ParamStore { map }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    pub fn same_paths(&self, other: &ParamStore) -> bool {
        self.map.len() == other.map.len() && self.map.keys().zip(other.map.keys()).all(|(a, b)| a == b)
    }

    /// Order-sensitive fingerprint of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.map {
            for b in k.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for x in v.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Registers `path.weight` `[fan_in, fan_out]` uniform in `±sqrt(1/fan_in)`
    /// and, when requested, a zero `path.bias`.
    pub fn init_linear(&mut self, rng: &mut Rng, path: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = (1.0 / fan_in as f64).sqrt();
        self.insert(format!("{path}.weight"), uniform(rng, &[fan_in, fan_out], -bound, bound));
        if bias {
            self.insert(format!("{path}.bias"), Tensor::zeros(&[fan_out]));
        }
    }

    /// Registers `path.gamma = 1` and `path.beta = 0` of width `d`.
    pub fn init_norm(&mut self, path: &str, d: usize) {
        self.insert(format!("{path}.gamma"), Tensor::full(&[d], 1.0));
        self.insert(format!("{path}.beta"), Tensor::zeros(&[d]));
    }
}
