//! Class-imbalance handling: every model sees all reals, original fakes are
//! split into disjoint per-model subsets, generated fakes are shared.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Record, Source, Split};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub n_models: usize,
    pub seed: u64,
    pub real_ids: Vec<String>,
    pub generated_ids: Vec<String>,
    /// Original-fake ids per model.
    pub subsets: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainsetCounts {
    pub real: usize,
    pub fake: usize,
    pub fake_subset: usize,
    pub fake_generated: usize,
}

/// Split `fake_ids` over `n_models` by seeded shuffle then round-robin.
pub fn partition_ids(
    real_ids: Vec<String>,
    fake_ids: Vec<String>,
    generated_ids: Vec<String>,
    n_models: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_models < 1 {
        return Err(Error::config("sampling.n_models", "must be at least 1"));
    }
    if fake_ids.len() < n_models {
        return Err(Error::InvalidInput(format!(
            "{} original fakes cannot fill {n_models} subsets",
            fake_ids.len()
        )));
    }
    let mut shuffled = fake_ids;
    shuffled.shuffle(&mut rng_for(seed, &["partition"]));
    let mut subsets = vec![Vec::with_capacity(shuffled.len() / n_models + 1); n_models];
    for (i, id) in shuffled.into_iter().enumerate() {
        subsets[i % n_models].push(id);
    }
    Ok(PartitionPlan {
        n_models,
        seed,
        real_ids,
        generated_ids,
        subsets,
    })
}

/// Plan over the training split of a manifest.
pub fn partition_fakes(manifest: &DatasetManifest, n_models: usize, seed: u64) -> Result<PartitionPlan> {
    let ids = |pred: fn(Source) -> bool| -> Vec<String> {
        manifest
            .split(Split::Train)
            .filter(|r| pred(r.source))
            .map(|r| r.id.clone())
            .collect()
    };
    partition_ids(
        ids(Source::is_real),
        ids(|s| matches!(s, Source::FakeMethod(_))),
        ids(|s| s == Source::FakeGenerated),
        n_models,
        seed,
    )
}

impl PartitionPlan {
    fn check_index(&self, model_index: usize) -> Result<()> {
        if model_index >= self.n_models {
            return Err(Error::InvalidInput(format!(
                "model index {model_index} out of range for {} models",
                self.n_models
            )));
        }
        Ok(())
    }

    pub fn counts(&self, model_index: usize) -> Result<TrainsetCounts> {
        self.check_index(model_index)?;
        let fake_subset = self.subsets[model_index].len();
        let fake_generated = self.generated_ids.len();
        Ok(TrainsetCounts {
            real: self.real_ids.len(),
            fake: fake_subset + fake_generated,
            fake_subset,
            fake_generated,
        })
    }

    /// All ids in one model's training set: reals, its subset, generated fakes.
    pub fn trainset_ids(&self, model_index: usize) -> Result<Vec<&str>> {
        self.check_index(model_index)?;
        Ok(self
            .real_ids
            .iter()
            .chain(&self.subsets[model_index])
            .chain(&self.generated_ids)
            .map(String::as_str)
            .collect())
    }

    /// Check the subsets are pairwise disjoint, cover exactly `all_fakes`,
    /// and differ in size by at most one.
    pub fn validate(&self, all_fakes: &[String]) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.subsets.len() != self.n_models {
            return bad(format!("{} subsets for {} models", self.subsets.len(), self.n_models));
        }
        let mut seen = HashSet::with_capacity(all_fakes.len());
        for (k, subset) in self.subsets.iter().enumerate() {
            for id in subset {
                if !seen.insert(id.as_str()) {
                    return bad(format!("fake `{id}` appears twice (subset {k})"));
                }
            }
        }
        if seen.len() != all_fakes.len() || all_fakes.iter().any(|id| !seen.contains(id.as_str())) {
            return bad("fake subsets do not cover the original fakes".into());
        }
        let sizes = self.subsets.iter().map(Vec::len);
        let (lo, hi) = sizes.fold((usize::MAX, 0), |(lo, hi), n| (lo.min(n), hi.max(n)));
        if hi - lo > 1 {
            return bad(format!("subset sizes range {lo}..={hi}"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The records of one model's training set, in manifest order.
pub fn build_model_trainset(
    manifest: &DatasetManifest,
    plan: &PartitionPlan,
    model_index: usize,
) -> Result<(Vec<Record>, TrainsetCounts)> {
    let counts = plan.counts(model_index)?;
    let wanted: HashSet<&str> = plan.trainset_ids(model_index)?.into_iter().collect();
    let records: Vec<Record> = manifest
        .split(Split::Train)
        .filter(|r| wanted.contains(r.id.as_str()))
        .cloned()
        .collect();
    if records.len() != wanted.len() {
        return Err(Error::InvalidInput(format!(
            "plan names {} ids but the manifest holds {} of them",
            wanted.len(),
            records.len()
        )));
    }
    Ok((records, counts))
}
