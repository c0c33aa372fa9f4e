use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

pub const PARAMS_FORMAT: &str = "metacrs-params";
pub const PARAMS_VERSION: u32 = 1;

/// Named, shape-tagged bundle of tensors. Iteration order is by name, which
/// keeps every reduction over a bundle deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FileRepr {
    format: String,
    version: u32,
    tensors: Vec<Record>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Inserts a tensor of the given shape with entries drawn from
    /// `N(0, std²)`; `std = 0` gives zeros.
    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let mut t = Tensor::zeros(shape);
        if std > 0.0 {
            t.data_mut().iter_mut().for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal));
        }
        self.insert(name, t);
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        ensure!(
            self.entries.len() == other.entries.len(),
            Dimension,
            "bundles hold {} vs {} tensors",
            self.entries.len(),
            other.entries.len()
        );
        for ((ka, ta), (kb, tb)) in self.entries.iter().zip(&other.entries) {
            ensure!(ka == kb, Dimension, "tensor names differ: {ka} vs {kb}");
            ensure!(
                ta.shape() == tb.shape(),
                Dimension,
                "{ka}: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) -> Result<()> {
        self.check_same_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Sub-bundle of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Union of two bundles with disjoint names.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, t) in &other.entries {
            ensure!(!out.contains(k), Contract, "duplicate parameter {k}");
            out.insert(k.clone(), t.clone());
        }
        Ok(out)
    }

    /// Overwrites entries of `self` with the same-named entries of `other`.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<()> {
        for (k, t) in &other.entries {
            let slot = self
                .entries
                .get_mut(k)
                .ok_or_else(|| Error::Contract(format!("parameter {k} missing")))?;
            ensure!(slot.shape() == t.shape(), Dimension, "{k}: shape mismatch");
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let repr = FileRepr {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            tensors: self
                .entries
                .iter()
                .map(|(name, t)| Record {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: FileRepr = serde_json::from_str(text)?;
        ensure!(
            repr.format == PARAMS_FORMAT,
            Validation,
            "unexpected format tag {:?}",
            repr.format
        );
        ensure!(
            repr.version == PARAMS_VERSION,
            Validation,
            "unsupported params version {}",
            repr.version
        );
        let mut out = ParamSet::new();
        for r in repr.tensors {
            ensure!(!out.contains(&r.name), Validation, "duplicate tensor {}", r.name);
            out.insert(r.name, Tensor::new(r.shape, r.values)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in prop::collection::vec(-1e300f64..1e300, 1..40),
                                        tiny in prop::collection::vec(-1e-300f64..1e-300, 1..5)) {
            let mut ps = ParamSet::new();
            ps.insert("a.w", Tensor::vector(values.clone()).unwrap());
            ps.insert("b", Tensor::vector(tiny.clone()).unwrap());
            let back = ParamSet::from_json(&ps.to_json().unwrap()).unwrap();
            for (x, y) in back.tensor("a.w").unwrap().data().iter().zip(&values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in back.tensor("b").unwrap().data().iter().zip(&tiny) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_foreign_header() {
        let text = r#"{"format":"other","version":1,"tensors":[]}"#;
        assert!(ParamSet::from_json(text).is_err());
        let text = r#"{"format":"metacrs-params","version":9,"tensors":[]}"#;
        assert!(ParamSet::from_json(text).is_err());
    }

    #[test]
    fn add_scaled_checks_layout() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut b = ParamSet::new();
        b.insert("x", Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(a.add_scaled(&b, 1.0), Err(Error::Dimension(_))));
    }
}
