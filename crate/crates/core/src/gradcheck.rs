//! Finite-difference verification of the analytic gradients, both at the
//! logit level (the loss layer in isolation) and at the parameter level
//! (through the full encoder/fusion/loss pipeline).
//!
//! Guidance decisions and their probability snapshots are frozen before
//! differencing, so the numeric gradient measures exactly the function the
//! analytic gradient claims to differentiate: selection is a constant, and
//! the guiding distribution carries no gradient.

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::guidance::{select_guidance, total_loss, ucom, GuidanceDecision, GuidanceMode, GuidanceScope, LossOptions, Stage};
use crate::model::{softmax_rows, FusedModel, FusionSpec, LogitBundle};
use crate::numerics::{Mat, RngStream};

/// `‖a − b‖_∞ / max(‖a‖_∞, ‖b‖_∞, 1e-12)`.
pub fn rel_error_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient vectors must align");
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(1e-12)
}

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-5;

/// Outcome of a gradient-check sweep over random configurations.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    /// Total number of coordinates differenced.
    pub coords: usize,
    pub max_rel_error: f64,
    /// Description of the configuration with the largest error.
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_mode(rng: &mut RngStream, modalities: usize) -> GuidanceMode {
    match rng.index(4) {
        0 => GuidanceMode::Prior { rdm: 0 },
        1 => GuidanceMode::Prior {
            rdm: modalities - 1,
        },
        2 => GuidanceMode::Confident,
        _ => GuidanceMode::Robust,
    }
}

fn random_opts(rng: &mut RngStream, modalities: usize) -> LossOptions {
    let lambda = [0.0, 0.5, 1.0, 2.0][rng.index(4)];
    let scope = if rng.bernoulli(0.5) {
        GuidanceScope::NonTarget
    } else {
        GuidanceScope::AllClass
    };
    let mut opts = LossOptions::new(lambda, Stage::Full, scope, modalities);
    opts.average_active_only = rng.bernoulli(0.5);
    for w in &mut opts.modality_ce_weights {
        *w = 0.5 + rng.uniform();
    }
    opts
}

/// Decisions from the unperturbed outputs, then held constant.
fn freeze_decisions(
    bundle: &LogitBundle,
    labels: &[usize],
    mode: GuidanceMode,
) -> Result<Vec<GuidanceDecision>> {
    let probs: Vec<Mat> = bundle
        .per_modality
        .iter()
        .map(softmax_rows)
        .collect::<Result<_>>()?;
    (0..labels.len())
        .map(|i| {
            let p: Vec<Vec<f64>> = probs.iter().map(|pm| pm.row(i).to_vec()).collect();
            let xi: Vec<f64> = bundle
                .per_modality
                .iter()
                .map(|z| ucom(z.row(i), labels[i]).map(|(v, _)| v))
                .collect::<Result<_>>()?;
            select_guidance(&p, &xi, labels[i], mode)
        })
        .collect()
}

/// Rebuild the fused logits a perturbed set of per-modality logits implies,
/// keeping the per-sample fusion weights fixed.
fn refuse(per_modality: &[Mat], weights: &Mat) -> LogitBundle {
    let (b, c) = (per_modality[0].rows(), per_modality[0].cols());
    let mut fused = Mat::zeros(b, c);
    for i in 0..b {
        let fr = fused.row_mut(i);
        for (m, z) in per_modality.iter().enumerate() {
            let w = weights.get(i, m);
            for (f, v) in fr.iter_mut().zip(z.row(i)) {
                *f += w * v;
            }
        }
    }
    LogitBundle {
        per_modality: per_modality.to_vec(),
        weights: weights.clone(),
        fused,
    }
}

/// Check the analytic gradient of the total loss with respect to every
/// per-modality logit against central finite differences, over random
/// configurations spanning 2, 3, and 10 classes and batch sizes 1 and 8.
pub fn check_logit_gradients(configs: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::from_seed(seed).derive("gradcheck-logits");
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut coords = 0usize;

    for cfg_idx in 0..configs {
        let classes = [2, 3, 10][rng.index(3)];
        let batch = [1, 8][rng.index(2)];
        let modalities = 2 + rng.index(2); // 2 or 3
        let labels: Vec<usize> = (0..batch).map(|_| rng.index(classes)).collect();

        let mut per_modality = Vec::with_capacity(modalities);
        for _ in 0..modalities {
            let mut z = Mat::zeros(batch, classes);
            for v in z.data_mut() {
                *v = 2.0 * rng.normal();
            }
            per_modality.push(z);
        }
        let mut weights = Mat::zeros(batch, modalities);
        for i in 0..batch {
            let raw: Vec<f64> = (0..modalities).map(|_| 0.1 + rng.uniform()).collect();
            let sum: f64 = raw.iter().sum();
            for (m, r) in raw.iter().enumerate() {
                weights.set(i, m, r / sum);
            }
        }
        let bundle = refuse(&per_modality, &weights);
        let mode = random_mode(&mut rng, modalities);
        let opts = random_opts(&mut rng, modalities);
        let decisions = freeze_decisions(&bundle, &labels, mode)?;

        let (_, lgrads) = total_loss(&bundle, &labels, &decisions, &opts)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for m in 0..modalities {
            for i in 0..batch {
                for k in 0..classes {
                    // Chain rule through the fixed-weight fusion.
                    let g = lgrads.per_modality[m].get(i, k)
                        + weights.get(i, m) * lgrads.fused.get(i, k);
                    analytic.push(g);

                    let eval = |delta: f64| -> Result<f64> {
                        let mut zs = per_modality.clone();
                        let v = zs[m].get(i, k);
                        zs[m].set(i, k, v + delta);
                        let b = refuse(&zs, &weights);
                        Ok(total_loss(&b, &labels, &decisions, &opts)?.0.total)
                    };
                    let plus = eval(FD_STEP)?;
                    let minus = eval(-FD_STEP)?;
                    numeric.push((plus - minus) / (2.0 * FD_STEP));
                }
            }
        }
        coords += analytic.len();
        let rel = rel_error_inf(&analytic, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = format!(
                "config {cfg_idx}: C={classes} B={batch} M={modalities} lambda={} mode={mode:?}",
                opts.lambda
            );
        }
    }
    Ok(GradCheckReport {
        configs,
        coords,
        max_rel_error: max_rel,
        worst,
        tolerance: TOLERANCE,
    })
}

/// Check the analytic parameter gradients through the whole
/// encoder/fusion/loss pipeline against central finite differences on small
/// random models. Configurations whose hidden pre-activations sit within
/// 1e-4 of a ReLU kink are redrawn, since the loss is not differentiable
/// there.
pub fn check_param_gradients(configs: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::from_seed(seed).derive("gradcheck-params");
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut coords = 0usize;

    let mut cfg_idx = 0usize;
    let mut attempts = 0usize;
    while cfg_idx < configs {
        attempts += 1;
        if attempts > configs * 50 {
            return Err(Error::invalid(
                "could not sample enough kink-free configurations",
            ));
        }
        let classes = [2, 3][rng.index(2)];
        let batch = [1, 4][rng.index(2)];
        let dims = [3usize, 4];
        let hidden = [5usize];
        let fusion = FusionSpec::Static {
            weights: vec![0.6, 0.4],
        };
        let init_stream = rng.derive_indexed("model", attempts as u64);
        let mut model = FusedModel::init(&dims, &hidden, classes, fusion, &init_stream)?;
        // Spread the weights a little so logits are not tiny.
        for enc in &mut model.encoders {
            for layer in &mut enc.layers {
                for v in layer.w.data_mut() {
                    *v *= 1.5;
                }
                for b in &mut layer.b {
                    *b = 0.1 * rng.normal();
                }
            }
        }
        let features: Vec<Mat> = dims
            .iter()
            .map(|&d| {
                let mut x = Mat::zeros(batch, d);
                for v in x.data_mut() {
                    *v = rng.normal();
                }
                x
            })
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.index(classes)).collect();
        let data = MultimodalBatch::new(features, labels.clone(), classes)?;

        let (bundle, caches) = model.forward_cached(&data)?;
        if caches
            .iter()
            .flat_map(|c| c.pre.iter().take(hidden.len()))
            .flat_map(|z| z.data().iter())
            .any(|v| v.abs() < 1e-4)
        {
            continue; // too close to a ReLU kink; redraw
        }
        let mode = random_mode(&mut rng, 2);
        let opts = random_opts(&mut rng, 2);
        let decisions = freeze_decisions(&bundle, &labels, mode)?;

        let (_, lgrads) = total_loss(&bundle, &labels, &decisions, &opts)?;
        let (grads, _) = model.backward(&bundle, &caches, &lgrads.per_modality, &lgrads.fused)?;
        let analytic: Vec<f64> = crate::model::grad_slices(&grads)
            .into_iter()
            .flatten()
            .copied()
            .collect();
        // A near-zero gradient (an accidentally well-fit random model) makes
        // the relative metric measure rounding noise instead of the
        // formulas; redraw those configurations too.
        if analytic.iter().fold(0.0f64, |a, g| a.max(g.abs())) < 1e-2 {
            continue;
        }

        let mut numeric = Vec::with_capacity(analytic.len());
        let n_tensors = model.param_slices_mut().len();
        for t in 0..n_tensors {
            let len = model.param_slices_mut()[t].len();
            for p in 0..len {
                let eval = |delta: f64| -> Result<f64> {
                    let mut perturbed = model.clone();
                    perturbed.param_slices_mut()[t][p] += delta;
                    let b = perturbed.forward(&data)?;
                    Ok(total_loss(&b, &labels, &decisions, &opts)?.0.total)
                };
                let plus = eval(FD_STEP)?;
                let minus = eval(-FD_STEP)?;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        coords += analytic.len();
        let rel = rel_error_inf(&analytic, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = format!(
                "config {cfg_idx}: C={classes} B={batch} lambda={} mode={mode:?}",
                opts.lambda
            );
        }
        cfg_idx += 1;
    }
    Ok(GradCheckReport {
        configs,
        coords,
        max_rel_error: max_rel,
        worst,
        tolerance: TOLERANCE,
    })
}
