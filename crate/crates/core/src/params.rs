//! Named parameter arrays with per-entry freeze flags.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an entry is (re)initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f32> {
        match *self {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    shape: Vec<usize>,
    values: Vec<f32>,
    pub frozen: bool,
    pub init: Init,
}

impl ParamEntry {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Insertion-ordered map from parameter name to entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: Vec<(String, ParamEntry)>,
    index: HashMap<String, usize>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>, init: Init) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((
            name,
            ParamEntry {
                shape,
                values,
                frozen: false,
                init,
            },
        ));
        Ok(())
    }

    /// Adds an entry initialized from `init`, drawing from `rng`.
    pub fn init<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut R) -> Result<()> {
        let n = shape.iter().product();
        let values = init.sample(n, rng);
        self.insert(name, shape, values, init)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Values of `name`, or a shape error naming the missing entry.
    pub fn values(&self, name: &str) -> Result<&[f32]> {
        self.get(name)
            .map(ParamEntry::values)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.len()).sum()
    }

    /// All values concatenated as little-endian bytes, in insertion order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|(_, e)| e.values.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }
}
