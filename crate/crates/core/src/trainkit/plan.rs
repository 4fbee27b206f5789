//! Cross-validation folds and finetuning freeze/reinit plans.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Sorts `ids`, shuffles them with a seeded ChaCha8 stream and deals them
/// round-robin into `k` validation folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("case ids must be unique".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in sorted.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok((0..k)
        .map(|f| {
            let mut val = folds[f].clone();
            val.sort();
            let mut train: Vec<String> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect();
            train.sort();
            FoldSplit { fold: f, train, val }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneVariant {
    /// Continue from the checkpoint values.
    A,
    /// Re-initialize the trainable entries first.
    B,
}

/// Parameter-name prefixes that stay trainable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub prefixes: Vec<String>,
}

impl Default for Selector {
    /// Final MedNeXt decoder stage and every deep-supervision head.
    fn default() -> Self {
        Self {
            prefixes: vec!["dec0.".into(), "head".into()],
        }
    }
}

impl Selector {
    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Freezes everything outside `selector`; variant B also redraws the
/// selected entries from their stored initializers with `seed`.
pub fn finetune_plan(model: &ParamTree, variant: FinetuneVariant, selector: &Selector, seed: u64) -> Result<ParamTree> {
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matched = 0;
    for (name, e) in out.iter_mut() {
        let hit = selector.matches(name);
        e.frozen = !hit;
        if hit {
            matched += 1;
            if variant == FinetuneVariant::B {
                let fresh = e.init.sample(e.len(), &mut rng);
                e.values_mut().copy_from_slice(&fresh);
            }
        }
    }
    if matched == 0 {
        return Err(Error::Config(format!(
            "finetune selector {:?} matches no parameter",
            selector.prefixes
        )));
    }
    Ok(out)
}
