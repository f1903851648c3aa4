//! Named parameter tensors with a frozen/trainable partition.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Numeric mode of a model's stored parameters.
///
/// Arithmetic is always carried out in f64. `Standard` rounds every stored
/// parameter to f32 after initialization and after each update, and
/// checkpoints store f32; `Verification` keeps f64 end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Standard,
    Verification,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Standard => v as f32 as f64,
            Precision::Verification => v,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::Standard => "standard",
            Precision::Verification => "verification",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" | "f32" => Ok(Precision::Standard),
            "verification" | "f64" => Ok(Precision::Verification),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Parameters in insertion order with name lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>, trainable: bool) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.entries {
            p.trainable = pred(&p.name);
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::Standard {
            for p in &mut self.entries {
                p.value.mapv_inplace(|v| precision.round(v));
            }
        }
    }

    /// SHA-256 over name, shape and little-endian f64 bytes of every
    /// parameter selected by `filter`, in store order.
    pub fn digest(&self, filter: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.entries.iter().filter(|p| filter(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn full_digest(&self) -> String {
        self.digest(|_| true)
    }

    /// Names of parameters whose values differ from `other` (same layout).
    pub fn changed_since(&self, other: &ParamStore) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| {
                other
                    .by_name(&p.name)
                    .is_none_or(|q| q.value.iter().map(|v| v.to_bits()).ne(p.value.iter().map(|v| v.to_bits())))
            })
            .map(|p| p.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn digest_tracks_values_and_names() {
        let mut a = ParamStore::new();
        a.insert("w", array![[1.0, 2.0]], true);
        a.insert("b", array![[0.5]], false);
        let d0 = a.full_digest();
        let frozen = a.digest(|p| !p.trainable);
        a.get_mut(0).value[[0, 0]] = 1.5;
        assert_ne!(a.full_digest(), d0);
        assert_eq!(a.digest(|p| !p.trainable), frozen);
        let b = a.clone();
        assert!(a.changed_since(&b).is_empty());
        a.get_mut(1).value[[0, 0]] = 0.0;
        assert_eq!(a.changed_since(&b), vec!["b".to_string()]);
    }

    #[test]
    fn standard_precision_rounds_to_f32() {
        let mut a = ParamStore::new();
        a.insert("w", array![[0.1]], true);
        a.round_to(Precision::Verification);
        assert_eq!(a.get(0).value[[0, 0]], 0.1);
        a.round_to(Precision::Standard);
        assert_eq!(a.get(0).value[[0, 0]], 0.1f32 as f64);
    }
}
