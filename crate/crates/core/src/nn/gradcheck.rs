//! Central-difference verification of analytic gradients.
//!
//! The network is evaluated in `f64` so the comparison measures the
//! difference scheme, not `f32` rounding. Each forward pass reuses the same
//! RNG seed, so dropout masks are identical between evaluations.
//!
//! ReLU and max pooling are only piecewise smooth. When a coordinate's
//! `±step` stencil flips a ReLU sign or moves a pooling winner, the step is
//! halved (up to `MAX_HALVINGS` times) until the stencil stays on one
//! smooth piece; such coordinates are counted in `reduced_steps`. A
//! coordinate sitting exactly on a kink is replaced by another one from the
//! same tensor and counted in `kinks_skipped`.

use rand::seq::index::sample;

use super::layers::{Cache, Mode};
use super::model::{Gradients, Model};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

const MAX_HALVINGS: u32 = 10;

/// Maps network output to `(loss, dloss/doutput)`.
pub type LossFn<'a> = dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + 'a;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Minimum number of parameter coordinates to probe.
    pub min_coords: usize,
    /// Input coordinates to probe in addition to parameters.
    pub input_coords: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            min_coords: 64,
            input_coords: 16,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub worst: Option<CoordError>,
    /// Coordinates checked with a step below `step`.
    pub reduced_steps: usize,
    /// Coordinates with no kink-free stencil.
    pub kinks_skipped: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} coords, {} at reduced step, {} on kinks, tol {:e})",
            if self.passed { "pass" } else { "FAIL" },
            self.checked,
            self.reduced_steps,
            self.kinks_skipped,
            self.tolerance
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst {} analytic {:.6e} numeric {:.6e} err {:.3e}",
                w.location, w.analytic, w.numeric, w.error
            )?;
        }
        Ok(())
    }
}

/// ReLU signs and pooling winners of one forward pass.
#[derive(PartialEq)]
struct Pattern(Vec<Vec<usize>>);

fn eval_at(model: &Model<f64>, loss_fn: &LossFn, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<(f64, Pattern)> {
    let mut m = model.clone();
    let (out, caches) = m.forward(x, cfg.mode, &mut seeded(cfg.seed))?;
    let pattern = caches
        .iter()
        .filter_map(|c| match c {
            Cache::Relu { input } => Some(input.iter().map(|&v| (v > 0.0) as usize).collect()),
            Cache::MaxPool { argmax, .. } => Some(argmax.clone()),
            _ => None,
        })
        .collect();
    Ok((loss_fn(&out)?.0, Pattern(pattern)))
}

/// Backpropagated gradients w.r.t. the input and every parameter.
pub fn analytic_gradients(
    model: &Model<f64>,
    loss_fn: &LossFn,
    x: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<(Tensor<f64>, Gradients<f64>)> {
    let mut m = model.clone();
    let (out, caches) = m.forward(x, cfg.mode, &mut seeded(cfg.seed))?;
    let (_, g) = loss_fn(&out)?;
    m.backward(&caches, &g)
}

pub fn finite_diff_check(
    model: &Model<f64>,
    loss_fn: &LossFn,
    x: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, loss_fn, x, cfg)?;
    finite_diff_check_with(model, loss_fn, x, cfg, &analytic)
}

/// Compares supplied analytic gradients against central differences.
pub fn finite_diff_check_with(
    model: &Model<f64>,
    loss_fn: &LossFn,
    x: &Tensor<f64>,
    cfg: &GradCheckConfig,
    analytic: &(Tensor<f64>, Gradients<f64>),
) -> Result<GradCheckReport> {
    if model.params().iter().any(|p| !p.all_finite()) {
        return Err(Error::InvalidInput("model parameters are not finite".into()));
    }
    let (grad_x, grads) = analytic;
    let mut rng = seeded(cfg.seed ^ 0x9e37_79b9);
    let (_, base_pattern) = eval_at(model, loss_fn, x, cfg)?;
    let h = cfg.step;

    // (layer, tensor, len, wanted); layer == usize::MAX marks the input
    let mut targets: Vec<(usize, usize, usize, usize)> = Vec::new();
    let tensors: Vec<(usize, usize, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(li, l)| l.params().iter().enumerate().map(move |(ti, t)| (li, ti, t.len())))
        .collect();
    if !tensors.is_empty() {
        let per = cfg.min_coords.div_ceil(tensors.len()).max(1);
        targets.extend(tensors.iter().map(|&(li, ti, len)| (li, ti, len, per.min(len))));
    }
    let n_input = if tensors.is_empty() {
        cfg.min_coords.max(cfg.input_coords)
    } else {
        cfg.input_coords
    };
    targets.push((usize::MAX, 0, x.len(), n_input.min(x.len())));

    let mut worst: Option<CoordError> = None;
    let mut checked = 0;
    let mut reduced_steps = 0;
    let mut kinks_skipped = 0;
    let mut starved = false;
    for (li, ti, len, wanted) in targets {
        let mut found = 0;
        for idx in sample(&mut rng, len, len) {
            if found == wanted {
                break;
            }
            let probe = |step: f64| -> Result<Option<f64>> {
                let ((lp, pp), (lm, pm)) = if li == usize::MAX {
                    let mut xp = x.clone();
                    let base = x.data()[idx];
                    xp.data_mut()[idx] = base + step;
                    let plus = eval_at(model, loss_fn, &xp, cfg)?;
                    xp.data_mut()[idx] = base - step;
                    (plus, eval_at(model, loss_fn, &xp, cfg)?)
                } else {
                    let mut mp = model.clone();
                    let base = mp.layers()[li].params()[ti].data()[idx];
                    mp.layers_mut()[li].params_mut()[ti].data_mut()[idx] = base + step;
                    let plus = eval_at(&mp, loss_fn, x, cfg)?;
                    mp.layers_mut()[li].params_mut()[ti].data_mut()[idx] = base - step;
                    (plus, eval_at(&mp, loss_fn, x, cfg)?)
                };
                let smooth = pp == base_pattern && pm == base_pattern;
                Ok(smooth.then(|| (lp - lm) / (2.0 * step)))
            };
            let mut numeric = None;
            for k in 0..=MAX_HALVINGS {
                numeric = probe(h / f64::from(1u32 << k))?;
                if numeric.is_some() {
                    reduced_steps += (k > 0) as usize;
                    break;
                }
            }
            let Some(numeric) = numeric else {
                kinks_skipped += 1;
                continue;
            };
            let (analytic, location) = if li == usize::MAX {
                (grad_x.data()[idx], format!("input[{idx}]"))
            } else {
                let name = model.layers()[li].param_names()[ti];
                (
                    grads[li][ti].data()[idx],
                    format!("layers.{li}.{name}[{idx}] ({})", model.layers()[li].spec().kind()),
                )
            };
            found += 1;
            let error = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if worst.as_ref().is_none_or(|w| error > w.error) {
                worst = Some(CoordError {
                    location,
                    analytic,
                    numeric,
                    error,
                });
            }
        }
        starved |= found < wanted;
        checked += found;
    }
    let passed = !starved && worst.as_ref().is_none_or(|w| w.error <= cfg.tolerance);
    Ok(GradCheckReport {
        checked,
        tolerance: cfg.tolerance,
        worst,
        reduced_steps,
        kinks_skipped,
        passed,
    })
}
