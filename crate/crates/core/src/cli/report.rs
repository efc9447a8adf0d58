//! Aggregated metrics and embedding diagnostics for a finished run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::recipe::{read_json, write_file, write_json, Layout};
use crate::diagnostics::{pca_project, projection_csv, projection_svg, silhouette_score, DEFAULT_MAX_PER_CLASS};
use crate::error::Result;
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::MetricsReport;
use crate::nn::Model;
use crate::pipeline::{embed, init_backbone, load_checkpoint, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub backbone: String,
    pub metrics: MetricsReport,
    pub silhouette_before: f64,
    pub silhouette_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub models: Vec<ModelSummary>,
    pub ensemble: MetricsReport,
}

/// Aligned text table with one row per model plus the ensemble row.
pub fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Model".len());
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>8}  {:>8}\n",
        "Model", "Accuracy", "F1 Score", "Precision", "Recall", "AUC"
    );
    for (name, m) in rows {
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>9}  {:>8}  {:>8}",
            name,
            fmt(Some(m.accuracy)),
            fmt(Some(m.f1)),
            fmt(Some(m.precision)),
            fmt(Some(m.recall)),
            fmt(m.auc)
        )
        .expect("writing to string");
    }
    out
}

fn project(model: &Model, val: &Dataset, stem: &str, title: &str, layout: &Layout, seed: u64) -> Result<f64> {
    let z = embed(model, val)?;
    let labels = val.labels();
    let points = pca_project(&z)?;
    let ids: Vec<String> = val.samples.iter().map(|s| s.id.clone()).collect();
    let dir = layout.report_dir();
    write_file(&dir.join(format!("{stem}.csv")), projection_csv(&ids, &points, &labels))?;
    write_file(&dir.join(format!("{stem}.svg")), projection_svg(&points, &labels, title))?;
    silhouette_score(&z, &labels, DEFAULT_MAX_PER_CLASS, seed)
}

/// Read the per-model and ensemble metrics, embed the validation split with
/// each backbone at initialization and after stage 1, and write
/// `report/summary.{json,txt}` plus the projection scatters.
pub fn report(cfg: &RunConfig) -> Result<Summary> {
    let layout = Layout::new(&cfg.out_dir);
    let manifest = DatasetManifest::load(&layout.manifest_aug())?;
    let val = Dataset::load_split(&manifest, Split::Val)?;
    let mut models = Vec::new();
    for i in 0..cfg.backbones.len() {
        let dir = layout.model_dir(cfg, i);
        let name = cfg.model_dir_name(i);
        let metrics: MetricsReport = read_json(&dir.join("metrics.json"))?;
        let trained = load_checkpoint(&dir.join("backbone.ckpt"))?;
        let initial = init_backbone(&trained.backbone_spec, trained.config.seed)?;
        let before = project(&initial, &val, &format!("{name}-before"), &format!("{name} before"), &layout, cfg.seed)?;
        let after = project(&trained.backbone, &val, &format!("{name}-after"), &format!("{name} after"), &layout, cfg.seed)?;
        models.push(ModelSummary {
            name,
            backbone: cfg.backbones[i].kind.name().to_string(),
            metrics,
            silhouette_before: before,
            silhouette_after: after,
        });
    }
    let ensemble: MetricsReport = read_json(&layout.ensemble_dir().join("metrics.json"))?;
    let summary = Summary { models, ensemble };

    let mut rows: Vec<(String, &MetricsReport)> = summary.models.iter().map(|m| (m.name.clone(), &m.metrics)).collect();
    rows.push(("ensemble".to_string(), &summary.ensemble));
    let mut text = metrics_table(&rows);
    text.push_str("\nSilhouette (validation embeddings)\n");
    for m in &summary.models {
        writeln!(text, "{}: {:.4} -> {:.4}", m.name, m.silhouette_before, m.silhouette_after).expect("writing to string");
    }
    write_json(&layout.report_dir().join("summary.json"), &summary)?;
    write_file(&layout.report_dir().join("summary.txt"), text)?;
    Ok(summary)
}
