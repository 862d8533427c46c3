//! Named gradient collections.
//!
//! A [`GradientSet`] mirrors the model's named parameter tensors. Entries
//! are kept in a sorted map so merging and norm computation visit tensors
//! in a fixed order, which keeps training bitwise reproducible.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    entries: BTreeMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the gradient tensor for `name`.
    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.entries.insert(name.into(), grad);
    }

    /// Adds `grad` elementwise into the named entry, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        match self.entries.get_mut(name) {
            Some(existing) => {
                assert_eq!(existing.len(), grad.len(), "gradient shape changed for {name}");
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    /// Adds `scale * other` into `self`, entry by entry.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (name, grad) in &other.entries {
            match self.entries.get_mut(name) {
                Some(existing) => {
                    assert_eq!(existing.len(), grad.len(), "gradient shape changed for {name}");
                    for (e, g) in existing.iter_mut().zip(grad) {
                        *e += scale * g;
                    }
                }
                None => {
                    self.entries
                        .insert(name.clone(), grad.iter().map(|g| scale * g).collect());
                }
            }
        }
    }

    /// Multiplies every entry by `scale`.
    pub fn scale(&mut self, scale: f64) {
        for grad in self.entries.values_mut() {
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// l2 norm of the concatenation of all entries.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().flatten().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
