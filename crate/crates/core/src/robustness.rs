//! Certified lower bounds on the fused classifier's robustness radius, the
//! exact closed-form radius for linear models, Lipschitz-constant handling,
//! and an attack harness that tries to falsify certificates empirically.
//!
//! The bound divides the weighted sum of per-modality margins by the norm of
//! the weighted Lipschitz constants. With exact linear constants the per-pair
//! bound coincides with the true per-pair radius; sampled constants can
//! under-estimate, so results derived from them are tagged and never called
//! certified.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::guidance::{is_correct, per_class_margin};
use crate::model::{FusedModel, FusionSpec};
use crate::numerics::{Mat, RngStream};
use crate::parallel::ordered_map;

/// How per-modality Lipschitz constants were obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMethod {
    /// `τ = ‖W_y − W_j‖₂` for single-linear-layer encoders; exact.
    ExactLinear,
    /// Empirical maximum over random probes; may under-estimate.
    Sampled { directions: usize, radius: f64 },
}

impl TauMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TauMethod::ExactLinear => "exact-linear",
            TauMethod::Sampled { .. } => "sampled",
        }
    }

    /// Only exact constants support a certification claim.
    pub fn is_certified(&self) -> bool {
        matches!(self, TauMethod::ExactLinear)
    }
}

/// Per-modality, per-class-pair Lipschitz constants for the pair margin
/// functions. Entry (a, b) bounds how fast `z_a − z_b` can change per unit
/// input perturbation of that modality.
#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    pub per_modality: Vec<Mat>,
    pub method: TauMethod,
}

impl LipschitzEstimate {
    pub fn tau(&self, modality: usize, a: usize, b: usize) -> f64 {
        self.per_modality[modality].get(a, b)
    }
}

/// Certification outcome for one sample. Misclassified samples carry no
/// bound; `r_exact` appears only for linear models with static fusion, and
/// `r_attack` only when the attack search ran and found a flip.
#[derive(Debug, Clone)]
pub struct CertificationResult {
    pub sample_id: usize,
    pub correct: bool,
    /// (label, competing class) minimizing the bound.
    pub pair: Option<(usize, usize)>,
    pub r_lb: Option<f64>,
    pub r_exact: Option<f64>,
    pub r_attack: Option<f64>,
    pub weights: Vec<f64>,
    pub tau_method: &'static str,
}

/// Lower bound on the radius at one competing class:
/// `(Σ_m w_m·ξ_m) / sqrt(Σ_m (w_m·τ_m)²)`.
pub fn robustness_lower_bound(w: &[f64], xi: &[f64], tau: &[f64]) -> Result<f64> {
    if w.len() != xi.len() || w.len() != tau.len() || w.is_empty() {
        return Err(Error::shape("weights, margins, constants must align"));
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("weights must be finite and >= 0"));
    }
    let wsum: f64 = w.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {wsum}, not 1")));
    }
    if tau.iter().any(|&t| t < 0.0 || !t.is_finite()) {
        return Err(Error::invalid("Lipschitz constants must be finite and >= 0"));
    }
    let num: f64 = w.iter().zip(xi).map(|(a, b)| a * b).sum();
    let den: f64 = w
        .iter()
        .zip(tau)
        .map(|(a, b)| (a * b) * (a * b))
        .sum::<f64>()
        .sqrt();
    if den == 0.0 {
        return Err(Error::invalid(
            "margin cannot change under perturbation (all effective constants zero); refusing an unbounded claim",
        ));
    }
    Ok(num / den)
}

/// Exact constants for single-linear-layer encoders:
/// `τ_m(a,b) = ‖W^m_a − W^m_b‖₂`.
pub fn exact_linear_tau(model: &FusedModel) -> Result<LipschitzEstimate> {
    if model.encoders.iter().any(|e| e.layers.len() != 1) {
        return Err(Error::invalid(
            "exact constants require single-linear-layer encoders",
        ));
    }
    let c = model.num_classes();
    let per_modality = model
        .encoders
        .iter()
        .map(|enc| {
            let w = &enc.layers[0].w;
            let mut tau = Mat::zeros(c, c);
            for a in 0..c {
                for b in 0..c {
                    if a == b {
                        continue;
                    }
                    let norm: f64 = w
                        .row(a)
                        .iter()
                        .zip(w.row(b))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    tau.set(a, b, norm);
                }
            }
            tau
        })
        .collect();
    Ok(LipschitzEstimate {
        per_modality,
        method: TauMethod::ExactLinear,
    })
}

/// Empirical constants: for each modality, probe `directions` random
/// perturbations of radius in (0, r] around samples from `batch` and keep the
/// worst observed margin change per unit norm, for every class pair.
pub fn estimate_lipschitz(
    model: &FusedModel,
    batch: &MultimodalBatch,
    directions: usize,
    r: f64,
    rng: &mut RngStream,
) -> Result<LipschitzEstimate> {
    if directions == 0 {
        return Err(Error::invalid("need at least one probe direction"));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid("probe radius must be finite and > 0"));
    }
    let c = model.num_classes();
    let mut per_modality = Vec::with_capacity(model.modalities());
    for m in 0..model.modalities() {
        let x = &batch.features[m];
        let base = model.encoder_logits(m, x)?;
        let dim = x.cols();
        let mut tau = Mat::zeros(c, c);
        for _ in 0..directions {
            let i = rng.index(x.rows());
            let dir = rng.unit_vector(dim);
            let radius = r * (1.0 - rng.uniform()); // in (0, r]
            let mut row = x.row(i).to_vec();
            for (v, d) in row.iter_mut().zip(&dir) {
                *v += radius * d;
            }
            let probe = model.encoder_logits(m, &Mat::from_vec(1, dim, row)?)?;
            for a in 0..c {
                for b in 0..c {
                    if a == b {
                        continue;
                    }
                    let before = base.get(i, a) - base.get(i, b);
                    let after = probe.get(0, a) - probe.get(0, b);
                    let rate = (before - after).abs() / radius;
                    if rate > tau.get(a, b) {
                        tau.set(a, b, rate);
                    }
                }
            }
        }
        per_modality.push(tau);
    }
    Ok(LipschitzEstimate {
        per_modality,
        method: TauMethod::Sampled { directions, radius: r },
    })
}

fn single_batch(model: &FusedModel, rows: &[Vec<f64>]) -> Result<MultimodalBatch> {
    let features = rows
        .iter()
        .map(|r| Mat::from_vec(1, r.len(), r.clone()))
        .collect::<Result<Vec<Mat>>>()?;
    MultimodalBatch::new(features, vec![0], model.num_classes())
}

/// Per-class exact radii for a linear model with static fusion. `per_pair[j]`
/// is `None` at the label and for unreachable pairs (margin constant under
/// any perturbation); `min` is infinite when no pair is reachable.
#[derive(Debug, Clone)]
pub struct ExactRadii {
    pub per_pair: Vec<Option<f64>>,
    pub min: f64,
}

/// Closed-form minimal perturbation of the concatenated input that equalizes
/// the fused scores of `y` and some competitor:
/// `min_j (f_y − f_j) / ‖concat_m(w_m·(W^m_y − W^m_j))‖₂`.
pub fn exact_radius_linear(model: &FusedModel, rows: &[Vec<f64>], y: usize) -> Result<ExactRadii> {
    let weights = match &model.fusion {
        FusionSpec::Static { weights } => weights.clone(),
        FusionSpec::Dynamic { .. } => {
            return Err(Error::invalid(
                "the exact oracle needs static fusion (dynamic weights move with the input)",
            ))
        }
    };
    if model.encoders.iter().any(|e| e.layers.len() != 1) {
        return Err(Error::invalid("the exact oracle needs single-linear-layer encoders"));
    }
    let c = model.num_classes();
    if y >= c {
        return Err(Error::invalid("label out of range"));
    }
    let bundle = model.forward(&single_batch(model, rows)?)?;
    let fused = bundle.fused.row(0);

    let mut per_pair = vec![None; c];
    let mut min = f64::INFINITY;
    for j in 0..c {
        if j == y {
            continue;
        }
        let gnorm_sq: f64 = model
            .encoders
            .iter()
            .zip(&weights)
            .map(|(enc, &wm)| {
                let w = &enc.layers[0].w;
                let d: f64 = w
                    .row(y)
                    .iter()
                    .zip(w.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                wm * wm * d
            })
            .sum();
        let gnorm = gnorm_sq.sqrt();
        if gnorm == 0.0 {
            continue; // margin constant under perturbation: unreachable pair
        }
        let radius = (fused[y] - fused[j]) / gnorm;
        per_pair[j] = Some(radius);
        if radius < min {
            min = radius;
        }
    }
    Ok(ExactRadii { per_pair, min })
}

/// Certify one sample: per-pair margins feed [`robustness_lower_bound`] and
/// the minimum over competing classes is reported. Misclassified samples are
/// flagged and carry no bound. Pairs whose effective constants are all zero
/// are unreachable and skipped.
pub fn certify_sample(
    model: &FusedModel,
    rows: &[Vec<f64>],
    y: usize,
    tau: &LipschitzEstimate,
    sample_id: usize,
) -> Result<CertificationResult> {
    let bundle = model.forward(&single_batch(model, rows)?)?;
    let weights = bundle.weights.row(0).to_vec();
    let c = model.num_classes();
    if y >= c {
        return Err(Error::invalid("label out of range"));
    }
    let fused = bundle.fused.row(0);
    if !is_correct(fused, y) {
        return Ok(CertificationResult {
            sample_id,
            correct: false,
            pair: None,
            r_lb: None,
            r_exact: None,
            r_attack: None,
            weights,
            tau_method: tau.method.name(),
        });
    }
    let m = model.modalities();
    let mut best: Option<(f64, usize)> = None;
    let mut any_reachable = false;
    for j in 0..c {
        if j == y {
            continue;
        }
        let xi: Vec<f64> = (0..m)
            .map(|mm| per_class_margin(bundle.per_modality[mm].row(0), y, j))
            .collect::<Result<_>>()?;
        let taus: Vec<f64> = (0..m).map(|mm| tau.tau(mm, y, j)).collect();
        let den_sq: f64 = weights
            .iter()
            .zip(&taus)
            .map(|(w, t)| (w * t) * (w * t))
            .sum();
        if den_sq == 0.0 {
            continue; // unreachable pair
        }
        any_reachable = true;
        let bound = robustness_lower_bound(&weights, &xi, &taus)?;
        if best.map_or(true, |(b, _)| bound < b) {
            best = Some((bound, j));
        }
    }
    let (r_lb, pair) = match best {
        Some((b, j)) => (Some(b), Some((y, j))),
        None if !any_reachable => (Some(f64::INFINITY), None),
        None => (None, None),
    };
    Ok(CertificationResult {
        sample_id,
        correct: true,
        pair,
        r_lb,
        r_exact: None,
        r_attack: None,
        weights,
        tau_method: tau.method.name(),
    })
}

/// Attack search configuration; defaults follow the harness contract
/// (50 ascent steps of length R/25, 8 restarts).
#[derive(Debug, Clone, Copy)]
pub struct AttackOptions {
    pub random_trials: usize,
    pub steps: usize,
    pub restarts: usize,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            random_trials: 64,
            steps: 50,
            restarts: 8,
        }
    }
}

fn concat_norm(delta: &[Vec<f64>]) -> f64 {
    delta
        .iter()
        .flat_map(|d| d.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn perturbed_rows(rows: &[Vec<f64>], delta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .zip(delta)
        .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect()
}

fn fused_logits_at(model: &FusedModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let bundle = model.forward(&single_batch(model, rows)?)?;
    Ok(bundle.fused.row(0).to_vec())
}

/// Gradient of `f_j − f_y` (fused logits) with respect to each modality's
/// input at the given point.
fn pair_input_gradient(
    model: &FusedModel,
    rows: &[Vec<f64>],
    y: usize,
    j: usize,
) -> Result<Vec<Vec<f64>>> {
    let batch = single_batch(model, rows)?;
    let (bundle, caches) = model.forward_cached(&batch)?;
    let c = model.num_classes();
    let mut gf = Mat::zeros(1, c);
    gf.set(0, j, 1.0);
    gf.set(0, y, -1.0);
    let gz: Vec<Mat> = (0..model.modalities()).map(|_| Mat::zeros(1, c)).collect();
    let (_, inputs) = model.backward(&bundle, &caches, &gz, &gf)?;
    Ok(inputs.into_iter().map(|g| g.row(0).to_vec()).collect())
}

fn project_to_ball(delta: &mut [Vec<f64>], radius: f64) {
    let norm = concat_norm(delta);
    if norm > radius && norm > 0.0 {
        let s = radius / norm;
        for d in delta.iter_mut() {
            for v in d.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Probe inside the open ball of the given radius with random directions and
/// per-pair gradient ascent; returns `(violations, min flip norm)`. A
/// violation is any probe after which the label no longer strictly dominates
/// the fused logits.
fn attack_search(
    model: &FusedModel,
    rows: &[Vec<f64>],
    y: usize,
    radius: f64,
    opts: AttackOptions,
    rng: &mut RngStream,
) -> Result<(usize, Option<f64>)> {
    if radius <= 0.0 {
        return Ok((0, None));
    }
    let r_eff = radius * (1.0 - 1e-6);
    let dims: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let c = model.num_classes();
    let mut violations = 0usize;
    let mut min_flip: Option<f64> = None;

    let record = |delta: &[Vec<f64>], flipped: bool, min_flip: &mut Option<f64>| {
        if flipped {
            let norm = concat_norm(delta);
            if min_flip.map_or(true, |m| norm < m) {
                *min_flip = Some(norm);
            }
        }
    };

    // Random-direction probes at the boundary of the joint ball.
    for _ in 0..opts.random_trials {
        let mut delta: Vec<Vec<f64>> = dims
            .iter()
            .map(|&d| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let norm = concat_norm(&delta);
        if norm == 0.0 {
            continue;
        }
        let s = r_eff / norm;
        for row in delta.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let fused = fused_logits_at(model, &perturbed_rows(rows, &delta))?;
        let flipped = !is_correct(&fused, y);
        if flipped {
            violations += 1;
        }
        record(&delta, flipped, &mut min_flip);
    }

    // Gradient ascent on each competitor's score gap.
    let step = r_eff / 25.0;
    for j in 0..c {
        if j == y {
            continue;
        }
        for restart in 0..opts.restarts {
            let mut delta: Vec<Vec<f64>> = if restart == 0 {
                dims.iter().map(|&d| vec![0.0; d]).collect()
            } else {
                let mut d: Vec<Vec<f64>> = dims.iter().map(|&d| rng.unit_vector(d)).collect();
                let scale = r_eff * rng.uniform();
                for row in d.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                project_to_ball(&mut d, r_eff);
                d
            };
            let mut flipped_here = false;
            for _ in 0..opts.steps {
                let grad = pair_input_gradient(model, &perturbed_rows(rows, &delta), y, j)?;
                let gnorm = concat_norm(&grad);
                if gnorm == 0.0 {
                    break;
                }
                for (dm, gm) in delta.iter_mut().zip(&grad) {
                    for (dv, gv) in dm.iter_mut().zip(gm) {
                        *dv += step * gv / gnorm;
                    }
                }
                project_to_ball(&mut delta, r_eff);
                let fused = fused_logits_at(model, &perturbed_rows(rows, &delta))?;
                if !is_correct(&fused, y) {
                    flipped_here = true;
                    break;
                }
            }
            if flipped_here {
                violations += 1;
                record(&delta, true, &mut min_flip);
            }
        }
    }
    Ok((violations, min_flip))
}

/// Count label flips found inside `radius` by `trials` random probes plus
/// gradient ascent (default step schedule). Zero radius means zero probes.
pub fn attack_within_radius(
    model: &FusedModel,
    rows: &[Vec<f64>],
    y: usize,
    radius: f64,
    trials: usize,
    rng: &mut RngStream,
) -> Result<usize> {
    let opts = AttackOptions {
        random_trials: trials,
        ..AttackOptions::default()
    };
    attack_search(model, rows, y, radius, opts, rng).map(|(v, _)| v)
}

/// Smallest flipping perturbation norm the attack can find, growing the
/// search radius from the certified bound outward. `None` if nothing flips
/// within `2^12` times the starting radius.
pub fn attack_min_radius(
    model: &FusedModel,
    rows: &[Vec<f64>],
    y: usize,
    start: f64,
    rng: &mut RngStream,
) -> Result<Option<f64>> {
    let opts = AttackOptions {
        random_trials: 16,
        ..AttackOptions::default()
    };
    let mut radius = if start.is_finite() && start > 0.0 { start } else { 1.0 };
    for _ in 0..12 {
        radius *= 2.0;
        let (_, min_flip) = attack_search(model, rows, y, radius, opts, rng)?;
        if min_flip.is_some() {
            return Ok(min_flip);
        }
    }
    Ok(None)
}

/// Options for batch certification.
#[derive(Debug, Clone, Copy, Default)]
pub struct CertifyOptions {
    /// Also run the attack search and report the smallest flip found.
    pub attack: bool,
}

/// Certify every sample of a batch, in sample order. The exact oracle is
/// attached automatically for linear models with static fusion; attack radii
/// use per-sample derived rng streams so results are order- and
/// thread-count-independent.
pub fn certify_batch(
    model: &FusedModel,
    batch: &MultimodalBatch,
    tau: &LipschitzEstimate,
    opts: CertifyOptions,
    rng: &RngStream,
) -> Result<Vec<CertificationResult>> {
    let linear_static = model.encoders.iter().all(|e| e.layers.len() == 1)
        && matches!(model.fusion, FusionSpec::Static { .. });
    let ids: Vec<usize> = (0..batch.len()).collect();
    let results = ordered_map(ids, |i| -> Result<CertificationResult> {
        let rows: Vec<Vec<f64>> = batch.features.iter().map(|x| x.row(i).to_vec()).collect();
        let y = batch.labels[i];
        let mut res = certify_sample(model, &rows, y, tau, i)?;
        if res.correct && linear_static {
            res.r_exact = Some(exact_radius_linear(model, &rows, y)?.min);
        }
        if res.correct && opts.attack {
            let start = res.r_lb.filter(|r| r.is_finite()).unwrap_or(1.0);
            let mut stream = rng.derive_indexed("attack", i as u64);
            res.r_attack = attack_min_radius(model, &rows, y, start, &mut stream)?;
        }
        Ok(res)
    });
    results.into_iter().collect()
}

/// Write the certification report. Unavailable radii are left blank; the
/// attack column appears only when an attack search ran.
pub fn write_certification_csv(results: &[CertificationResult], path: &Path) -> Result<()> {
    let with_attack = results.iter().any(|r| r.r_attack.is_some());
    let mut w = BufWriter::new(File::create(path)?);
    if with_attack {
        writeln!(
            w,
            "sample_id,correct,pair_y,pair_j,R_lb,R_exact,R_attack,tau_method"
        )?;
    } else {
        writeln!(w, "sample_id,correct,pair_y,pair_j,R_lb,R_exact,tau_method")?;
    }
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let (py, pj) = match r.pair {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        let mut fields = vec![
            r.sample_id.to_string(),
            r.correct.to_string(),
            py,
            pj,
            fmt(r.r_lb),
            fmt(r.r_exact),
        ];
        if with_attack {
            fields.push(fmt(r.r_attack));
        }
        fields.push(r.tau_method.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
