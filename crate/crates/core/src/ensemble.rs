//! Three-model majority vote. When at least two models say real
//! (probability strictly above 0.5) the ensemble reports the largest member
//! probability, otherwise the smallest.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Prediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Real,
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleDecision {
    pub probs: [f64; 3],
    pub vote: Vote,
    pub rendered: f64,
}

pub fn majority_vote_render(probs: [f64; 3]) -> Result<EnsembleDecision> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    let real_votes = probs.iter().filter(|&&p| p > 0.5).count();
    let (vote, rendered) = if real_votes >= 2 {
        (Vote::Real, probs.iter().copied().fold(f64::MIN, f64::max))
    } else {
        (Vote::Fake, probs.iter().copied().fold(f64::MAX, f64::min))
    };
    Ok(EnsembleDecision { probs, vote, rendered })
}

/// One line of the decisions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub id: String,
    pub prob_m1: f64,
    pub prob_m2: f64,
    pub prob_m3: f64,
    pub vote: Vote,
    pub rendered: f64,
    pub label: u8,
}

/// Combine three per-model prediction lists, matched by sample id. Output
/// follows the order of the first list.
pub fn ensemble_predictions(models: [&[Prediction]; 3]) -> Result<Vec<EnsembleRow>> {
    let index: Vec<HashMap<&str, &Prediction>> = models
        .iter()
        .map(|m| m.iter().map(|p| (p.id.as_str(), p)).collect())
        .collect();
    for (k, m) in models.iter().enumerate() {
        if m.len() != models[0].len() || index[k].len() != m.len() {
            return Err(Error::InvalidInput(format!(
                "model {} predictions do not match model 1 one-to-one",
                k + 1
            )));
        }
    }
    models[0]
        .iter()
        .map(|p| {
            let mut probs = [0.0; 3];
            for k in 0..3 {
                let q = index[k]
                    .get(p.id.as_str())
                    .ok_or_else(|| Error::InvalidInput(format!("model {} lacks `{}`", k + 1, p.id)))?;
                if q.label != p.label {
                    return Err(Error::InvalidInput(format!("label disagreement on `{}`", p.id)));
                }
                probs[k] = q.prob;
            }
            let d = majority_vote_render(probs)?;
            Ok(EnsembleRow {
                id: p.id.clone(),
                prob_m1: probs[0],
                prob_m2: probs[1],
                prob_m3: probs[2],
                vote: d.vote,
                rendered: d.rendered,
                label: p.label,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::InvalidInput(e.to_string()))
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

/// Decisions CSV: `id,prob_m1,prob_m2,prob_m3,vote,rendered,label`.
pub fn write_decisions<W: Write>(w: W, rows: &[EnsembleRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn read_decisions<R: Read>(r: R) -> Result<Vec<EnsembleRow>> {
    read_rows(r)
}

/// Per-model predictions CSV: `id,label,prob`.
pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    write_rows(w, preds)
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<Prediction>> {
    read_rows(r)
}
