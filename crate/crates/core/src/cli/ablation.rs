//! One backbone trained under each ablation variant for each seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{AblationVariant, RunConfig};
use super::recipe::{train_one, write_file, write_json, Corpus, Layout};
use crate::augment::offline_augment;
use crate::error::{Error, Result};
use crate::manifest::Split;
use crate::pipeline::Dataset;
use crate::sampling::partition_fakes;
use crate::synth::generate_dataset;

/// Published large-scale results for the four variants, kept for
/// side-by-side reading. The desk benchmark does not reproduce them.
pub const REFERENCE_TABLE: [(AblationVariant, f64, f64, f64); 4] = [
    (AblationVariant::NoOfflineAug, 0.9303, 0.9339, 0.8947),
    (AblationVariant::NoOnlineAug, 0.8659, 0.8574, 0.9232),
    (AblationVariant::BceInsteadSupcon, 0.9163, 0.9131, 0.9581),
    (AblationVariant::Full, 0.9447, 0.9453, 0.9422),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationScore {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "F1 Score")]
    pub f1: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "Configuration")]
    pub configuration: String,
    pub mean: AblationScore,
    pub per_seed: Vec<AblationScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    #[serde(rename = "Configuration")]
    pub configuration: String,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "F1 Score")]
    pub f1: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub backbone: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub reference: Vec<ReferenceRow>,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.configuration == variant.name())
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.configuration.len())
            .chain(["Configuration".len()])
            .max()
            .unwrap_or(0)
            + 6;
        let line = |out: &mut String, name: &str, s: &AblationScore| {
            writeln!(
                out,
                "{name:<width$}  {:>8.4}  {:>8.4}  {:>9.4}",
                s.accuracy, s.f1, s.precision
            )
            .expect("writing to string");
        };
        let mut out = format!("backbone: {}\n", self.backbone);
        writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>9}", "Configuration", "Accuracy", "F1 Score", "Precision")
            .expect("writing to string");
        for r in &self.rows {
            line(&mut out, &format!("{} mean", r.configuration), &r.mean);
            for s in &r.per_seed {
                line(&mut out, &format!("  seed {}", s.seed.unwrap_or_default()), s);
            }
        }
        out
    }
}

fn mean(scores: &[AblationScore]) -> AblationScore {
    let n = scores.len() as f64;
    AblationScore {
        seed: None,
        accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
    }
}

/// Run every configured variant over every seed and write
/// `ablation/table.{json,txt}`. Each run lives in
/// `ablation/seed-{s}/{variant}` and matches a standalone recipe run with
/// the same seed on the designated backbone.
pub fn ablate(cfg: &RunConfig, threads: usize) -> Result<AblationTable> {
    let index = cfg.ablation_index()?;
    let root = Layout::new(&cfg.out_dir).ablation_dir();
    let mut per_variant: Vec<Vec<AblationScore>> = vec![Vec::new(); cfg.ablation.configs.len()];
    for &seed in &cfg.ablation.seeds {
        let seed_dir = root.join(format!("seed-{seed}"));
        let data_dir = seed_dir.join("data");
        let base = generate_dataset(&cfg.data, seed, &data_dir, threads)?;
        let val = Dataset::load_split(&base, Split::Val)?;
        for (k, &variant) in cfg.ablation.configs.iter().enumerate() {
            let mut run = variant.apply(cfg);
            run.seed = seed;
            run.out_dir = seed_dir.join(variant.name());
            let wrap = |e: Error| Error::InvalidInput(format!("ablation `{}` seed {seed}: {e}", variant.name()));
            let manifest = offline_augment(&base, run.augment.offline_fraction, seed, &data_dir.join("images_aug"))
                .map_err(wrap)?;
            let plan = partition_fakes(&manifest, run.sampling.n_models, seed).map_err(wrap)?;
            let layout = Layout::new(&run.out_dir);
            write_file(&layout.root.join("config.resolved.json"), run.to_json())?;
            plan.save(&layout.partition())?;
            let train = Dataset::load_split(&manifest, Split::Train)?;
            let corpus = Corpus {
                manifest,
                plan,
                train,
                val: val.clone(),
            };
            let out = train_one(&run, &corpus, index, &layout.model_dir(&run, index)).map_err(wrap)?;
            per_variant[k].push(AblationScore {
                seed: Some(seed),
                accuracy: out.metrics.accuracy,
                f1: out.metrics.f1,
                precision: out.metrics.precision,
            });
        }
    }
    let table = AblationTable {
        backbone: cfg.backbones[index].kind.name().to_string(),
        seeds: cfg.ablation.seeds.clone(),
        rows: cfg
            .ablation
            .configs
            .iter()
            .zip(&per_variant)
            .map(|(v, scores)| AblationRow {
                configuration: v.name().to_string(),
                mean: mean(scores),
                per_seed: scores.clone(),
            })
            .collect(),
        reference: REFERENCE_TABLE
            .iter()
            .map(|&(v, accuracy, f1, precision)| ReferenceRow {
                configuration: v.name().to_string(),
                accuracy,
                f1,
                precision,
            })
            .collect(),
    };
    write_json(&root.join("table.json"), &table)?;
    write_file(&root.join("table.txt"), table.to_text())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn variants_differ_from_full_in_one_field() {
        let base = RunConfig::default();
        let full = AblationVariant::Full.apply(&base);
        assert_eq!(full, base);
        let changed = |v: AblationVariant| {
            let c = v.apply(&base);
            let mut diffs = HashSet::new();
            if c.augment.offline_fraction != base.augment.offline_fraction {
                diffs.insert("offline");
            }
            if c.augment.online != base.augment.online {
                diffs.insert("online");
            }
            if c.stage1.loss != base.stage1.loss {
                diffs.insert("loss");
            }
            let mut rest = c.clone();
            rest.augment = base.augment.clone();
            rest.stage1.loss = base.stage1.loss;
            assert_eq!(rest, base);
            diffs
        };
        assert_eq!(changed(AblationVariant::NoOfflineAug), HashSet::from(["offline"]));
        assert_eq!(changed(AblationVariant::NoOnlineAug), HashSet::from(["online"]));
        assert_eq!(changed(AblationVariant::BceInsteadSupcon), HashSet::from(["loss"]));
    }
}
