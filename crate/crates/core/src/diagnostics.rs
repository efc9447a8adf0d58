//! Embedding-separability diagnostics: a two-component PCA projection and
//! the silhouette score with labels as clusters.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::rng::rng_for;

pub const DEFAULT_MAX_PER_CLASS: usize = 2000;

fn as_matrix<T: Real>(x: &Tensor<T>) -> Result<DMatrix<f64>> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!("expected an N x d matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    Ok(DMatrix::from_row_iterator(n, d, x.data().iter().map(|v| v.f64())))
}

/// Project mean-centred rows onto the top two covariance eigenvectors. Each
/// eigenvector's largest-magnitude entry is made positive. With a single
/// input dimension the second coordinate is zero.
pub fn pca_project<T: Real>(x: &Tensor<T>) -> Result<Vec<[f64; 2]>> {
    let mut m = as_matrix(x)?;
    let (n, d) = m.shape();
    if n < 3 {
        return Err(Error::InvalidInput(format!("PCA needs at least 3 points, got {n}")));
    }
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let cov = m.transpose() * &m / (n as f64 - 1.0);
    let trace = cov.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::InvalidInput("PCA input has zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = m.row(i);
            let mut p = [0.0; 2];
            for (c, v) in comps.iter().enumerate() {
                p[c] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect())
}

/// Mean silhouette `(b - a) / max(a, b)` over points, Euclidean distance,
/// labels as clusters. A point alone in its class scores 0. Classes larger
/// than `max_per_class` are subsampled with a seeded draw.
pub fn silhouette_score<T: Real>(x: &Tensor<T>, labels: &[u8], max_per_class: usize, seed: u64) -> Result<f64> {
    let m = as_matrix(x)?;
    if labels.len() != m.nrows() {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), m.nrows())));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two classes".into()));
    }
    let mut keep = Vec::new();
    for &c in &classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() > max_per_class {
            let mut rng = rng_for(seed, &["silhouette", &c.to_string()]);
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), max_per_class)
                .into_iter()
                .map(|j| members[j])
                .collect();
            picked.sort_unstable();
            keep.extend(picked);
        } else {
            keep.extend(members);
        }
    }
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| m.row(i).iter().copied().collect()).collect();
    let labs: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();

    let mut total = 0.0;
    for i in 0..rows.len() {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for j in 0..rows.len() {
            if i == j {
                continue;
            }
            let k = classes.binary_search(&labs[j]).expect("known class");
            sums[k] += dist(&rows[i], &rows[j]);
            counts[k] += 1;
        }
        let own = classes.binary_search(&labs[i]).expect("known class");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own && counts[k] > 0)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / rows.len() as f64)
}

/// `id,x,y,label` rows.
pub fn projection_csv(ids: &[String], points: &[[f64; 2]], labels: &[u8]) -> String {
    let mut out = String::from("id,x,y,label\n");
    for ((id, p), l) in ids.iter().zip(points).zip(labels) {
        writeln!(out, "{id},{},{},{l}", p[0], p[1]).expect("writing to string");
    }
    out
}

/// Minimal scatter plot: real points blue, fake points red.
pub fn projection_svg(points: &[[f64; 2]], labels: &[u8], title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 20.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let scale = |v: f64, k: usize| {
        let span = (hi[k] - lo[k]).max(1e-12);
        PAD + (v - lo[k]) / span * (SIZE - 2.0 * PAD)
    };
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{PAD}" y="14" font-size="12">{title}</text>"#).unwrap();
    for (p, &l) in points.iter().zip(labels) {
        let color = if l == 1 { "#1f77b4" } else { "#d62728" };
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
            scale(p[0], 0),
            SIZE - scale(p[1], 1)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
