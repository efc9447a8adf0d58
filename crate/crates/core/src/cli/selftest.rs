//! Quick in-binary versions of the oracle and gradient suites.

use rand::Rng;

use crate::augment::{hsv_to_rgb, rgb_to_hsv};
use crate::ensemble::{majority_vote_render, Vote};
use crate::error::Result;
use crate::losses::{bce_logits_loss, supcon_loss, SupConConfig};
use crate::metrics::{binary_metrics, roc_auc};
use crate::nn::{build_backbone, finite_diff_check, BackboneKind, BackboneSpec, GradCheckConfig, Tensor};
use crate::rng::seeded;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn naive_supcon(z: &[f64], n: usize, d: usize, labels: &[u8], tau: f64) -> Option<f64> {
    let dot = |i: usize, j: usize| (0..d).map(|k| z[i * d + k] * z[j * d + k]).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| dot(i, a).exp()).sum();
        total += -pos.iter().map(|&p| (dot(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

fn losses(rng: &mut impl Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let tau = [0.07, 0.5, 1.0][rng.random_range(0..3)];
        let mut z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..n {
            let norm = z[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            z[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= norm);
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let got = supcon_loss(&Tensor::<f64>::new(vec![n, d], z.clone())?, &labels, &SupConConfig { temperature: tau })?;
        if let Some(want) = naive_supcon(&z, n, d, &labels, tau) {
            worst = worst.max((got.loss - want).abs());
        }
    }
    let mut bce_worst = 0.0f64;
    for _ in 0..100 {
        let x: f64 = rng.random_range(-20.0..20.0);
        let y: u8 = rng.random_range(0..2);
        let got = bce_logits_loss(&Tensor::<f64>::new(vec![1], vec![x])?, &[y])?.loss;
        let p = 1.0 / (1.0 + (-x).exp());
        let want = -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln());
        bce_worst = bce_worst.max((got - want).abs());
    }
    Ok(vec![
        check("supcon matches naive oracle", worst <= 1e-6, format!("max abs diff {worst:.2e}")),
        check("bce matches naive formula", bce_worst <= 1e-6, format!("max abs diff {bce_worst:.2e}")),
    ])
}

fn gradients() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in BackboneKind::ALL {
        let spec = BackboneSpec::preset(kind, 16, 8);
        let model = build_backbone(&spec, 3)?.cast::<f64>();
        let mut rng = seeded(4);
        let x = Tensor::<f64>::new(
            vec![4, 16, 16, 3],
            (0..4 * 16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        let w: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = move |o: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
            let v = o.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((v, Tensor::new(o.shape().to_vec(), w.clone())?))
        };
        let report = finite_diff_check(&model, &loss, &x, &GradCheckConfig::default())?;
        out.push(check(&format!("gradcheck {}", kind.name()), report.passed, report.to_string()));
    }
    Ok(out)
}

fn ensemble(rng: &mut impl Rng) -> Result<Check> {
    let mut bad = 0;
    for _ in 0..10_000 {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let d = majority_vote_render(p)?;
        let swapped = majority_vote_render([p[2], p[0], p[1]])?;
        if (d.rendered > 0.5) != (d.vote == Vote::Real) || swapped.vote != d.vote || swapped.rendered != d.rendered {
            bad += 1;
        }
    }
    Ok(check("ensemble rule invariants", bad == 0, format!("{bad} violations in 10000 triples")))
}

fn metrics(rng: &mut impl Rng) -> Result<Vec<Check>> {
    let mut auc_bad = 0;
    let mut id_bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        if roc_auc(&scores, &labels)? != wins / pairs {
            auc_bad += 1;
        }
        if binary_metrics(&scores, &labels, 0.5)?.validate().is_err() {
            id_bad += 1;
        }
    }
    Ok(vec![
        check("roc_auc equals pairwise oracle", auc_bad == 0, format!("{auc_bad} mismatches in 200 sets")),
        check("binary_metrics identities", id_bad == 0, format!("{id_bad} violations in 200 sets")),
    ])
}

fn colour(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f32;
    for _ in 0..10_000 {
        let rgb: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let back = hsv_to_rgb(rgb_to_hsv(rgb));
        for k in 0..3 {
            worst = worst.max((back[k] - rgb[k]).abs());
        }
    }
    check("hsv round trip", worst <= 1e-5, format!("max abs diff {worst:.2e}"))
}

pub fn run_selftest() -> Result<Vec<Check>> {
    let mut rng = seeded(20);
    let mut out = losses(&mut rng)?;
    out.extend(gradients()?);
    out.push(ensemble(&mut rng)?);
    out.extend(metrics(&mut rng)?);
    out.push(colour(&mut rng));
    Ok(out)
}
