//! Confidence margins, per-sample selection of a guiding modality, the
//! negative-learning guidance losses, and the combined training objective
//! with analytic gradients on every logit matrix.
//!
//! The guiding (dominant) modality's probabilities are always carried as a
//! detached snapshot inside the decision record: the guidance term treats
//! them as constants, so no gradient ever reaches the guiding encoder
//! through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, LogitBundle};
use crate::numerics::{argmax, cross_entropy, softmax, Mat, PROB_FLOOR};

/// Confidence margin of `logits` at label `y`: the gap to the strongest
/// non-target class `j` (lowest index wins ties). Positive iff the label
/// strictly dominates every other class.
pub fn ucom(logits: &[f64], y: usize) -> Result<(f64, usize)> {
    if logits.len() < 2 {
        return Err(Error::invalid("margin needs at least 2 classes"));
    }
    if y >= logits.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let mut j = usize::MAX;
    let mut best = f64::NEG_INFINITY;
    for (k, &z) in logits.iter().enumerate() {
        if k != y && z > best {
            best = z;
            j = k;
        }
    }
    Ok((logits[y] - best, j))
}

/// Whether `y` strictly dominates all other classes. Ties count against the
/// label, matching the margin's sign.
pub fn is_correct(logits: &[f64], y: usize) -> bool {
    ucom(logits, y).map(|(xi, _)| xi > 0.0).unwrap_or(false)
}

/// Margin between the label and one fixed competing class.
pub fn per_class_margin(logits: &[f64], y: usize, j: usize) -> Result<f64> {
    if j == y {
        return Err(Error::invalid("competing class must differ from the label"));
    }
    if y >= logits.len() || j >= logits.len() {
        return Err(Error::invalid("class index out of range"));
    }
    Ok(logits[y] - logits[j])
}

/// Per-sample, per-modality margins plus the fused margin, all at their own
/// strongest competitors.
#[derive(Debug, Clone)]
pub struct MarginReport {
    /// B×M margins, one per (sample, modality).
    pub xi: Mat,
    /// Competing class per (sample, modality), row-major B×M.
    pub competitor: Vec<usize>,
    pub fused_xi: Vec<f64>,
    pub fused_competitor: Vec<usize>,
}

impl MarginReport {
    pub fn xi_of(&self, sample: usize, modality: usize) -> f64 {
        self.xi.get(sample, modality)
    }

    pub fn competitor_of(&self, sample: usize, modality: usize) -> usize {
        self.competitor[sample * self.xi.cols() + modality]
    }
}

/// Margins for every sample and modality of a forward pass.
pub fn margin_report(bundle: &LogitBundle, labels: &[usize]) -> Result<MarginReport> {
    let (b, m) = (bundle.batch_size(), bundle.modalities());
    if labels.len() != b {
        return Err(Error::shape("label count does not match batch"));
    }
    let mut xi = Mat::zeros(b, m);
    let mut competitor = vec![0usize; b * m];
    let mut fused_xi = Vec::with_capacity(b);
    let mut fused_competitor = Vec::with_capacity(b);
    for i in 0..b {
        for (mm, z) in bundle.per_modality.iter().enumerate() {
            let (v, j) = ucom(z.row(i), labels[i])?;
            xi.set(i, mm, v);
            competitor[i * m + mm] = j;
        }
        let (v, j) = ucom(bundle.fused.row(i), labels[i])?;
        fused_xi.push(v);
        fused_competitor.push(j);
    }
    Ok(MarginReport {
        xi,
        competitor,
        fused_xi,
        fused_competitor,
    })
}

/// How the guiding modality is chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum GuidanceMode {
    /// A fixed modality always guides.
    Prior { rdm: usize },
    /// Guide iff one modality has strictly higher target-class probability
    /// than every other.
    Confident,
    /// Guide iff one modality strictly dominates on both target-class
    /// probability and margin; confidence/margin conflicts deactivate
    /// guidance.
    Robust,
}

/// Outcome of selection for one sample. When active, every modality other
/// than `rdm` is guided; `p_rdm` is the detached probability snapshot the
/// guidance loss will treat as constant.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceDecision {
    pub active: bool,
    pub rdm: usize,
    pub p_rdm: Vec<f64>,
}

impl GuidanceDecision {
    pub fn inactive() -> Self {
        GuidanceDecision {
            active: false,
            rdm: 0,
            p_rdm: Vec::new(),
        }
    }
}

/// Index of the modality strictly dominating `values`, if any.
fn strict_dominator(values: &[f64]) -> Option<usize> {
    let top = argmax(values);
    values
        .iter()
        .enumerate()
        .all(|(m, &v)| m == top || values[top] > v)
        .then_some(top)
}

/// Pick the guiding modality for one sample from per-modality probability
/// vectors and margins.
pub fn select_guidance(
    probs: &[Vec<f64>],
    xi: &[f64],
    y: usize,
    mode: GuidanceMode,
) -> Result<GuidanceDecision> {
    if probs.len() < 2 || probs.len() != xi.len() {
        return Err(Error::invalid("need matching probs and margins for >= 2 modalities"));
    }
    if probs.iter().any(|p| y >= p.len()) {
        return Err(Error::invalid("label out of range"));
    }
    let p_target: Vec<f64> = probs.iter().map(|p| p[y]).collect();
    let rdm = match mode {
        GuidanceMode::Prior { rdm } => {
            if rdm >= probs.len() {
                return Err(Error::config("fixed guiding modality out of range"));
            }
            Some(rdm)
        }
        GuidanceMode::Confident => strict_dominator(&p_target),
        GuidanceMode::Robust => {
            let by_conf = strict_dominator(&p_target);
            let by_margin = strict_dominator(xi);
            match (by_conf, by_margin) {
                (Some(a), Some(b)) if a == b => Some(a),
                _ => None,
            }
        }
    };
    Ok(match rdm {
        Some(rdm) => GuidanceDecision {
            active: true,
            rdm,
            p_rdm: probs[rdm].clone(),
        },
        None => GuidanceDecision::inactive(),
    })
}

/// Negative-learning guidance: the guided modality's probability on each
/// non-target class is pushed down, weighted by the (detached) guiding
/// probability on that class.
pub fn mnl_loss(p_rdm: &[f64], p_im: &[f64], y: usize) -> Result<f64> {
    check_prob_pair(p_rdm, p_im, y)?;
    let mut loss = 0.0;
    for k in 0..p_rdm.len() {
        if k != y {
            loss -= p_rdm[k] * p_im[k].max(PROB_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Gradient of [`mnl_loss`] on the guided modality's logits, with
/// `p_im = softmax(z_im)`: `(1 − p_rdm[y])·p_im[k]` everywhere, minus
/// `p_rdm[k]` on non-target classes. Sums to zero.
pub fn mnl_grad_logits(p_rdm: &[f64], z_im: &[f64], y: usize) -> Result<Vec<f64>> {
    let p_im = softmax(z_im)?;
    check_prob_pair(p_rdm, &p_im, y)?;
    let off_target = 1.0 - p_rdm[y];
    Ok((0..p_im.len())
        .map(|k| off_target * p_im[k] - if k == y { 0.0 } else { p_rdm[k] })
        .collect())
}

/// Forced-alignment variant: match the guided modality to the guiding one on
/// every class, target included.
pub fn allclass_guidance_loss(p_rdm: &[f64], p_im: &[f64]) -> Result<f64> {
    if p_rdm.len() != p_im.len() {
        return Err(Error::shape("probability lengths differ"));
    }
    let mut loss = 0.0;
    for (a, p) in p_rdm.iter().zip(p_im) {
        loss -= a * p.max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

/// Gradient of [`allclass_guidance_loss`] on the guided logits: `p_im − p_rdm`.
pub fn allclass_grad_logits(p_rdm: &[f64], z_im: &[f64]) -> Result<Vec<f64>> {
    let p_im = softmax(z_im)?;
    if p_rdm.len() != p_im.len() {
        return Err(Error::shape("probability lengths differ"));
    }
    Ok(p_im.iter().zip(p_rdm).map(|(p, a)| p - a).collect())
}

fn check_prob_pair(p_rdm: &[f64], p_im: &[f64], y: usize) -> Result<()> {
    if p_rdm.len() != p_im.len() {
        return Err(Error::shape("probability lengths differ"));
    }
    if y >= p_rdm.len() {
        return Err(Error::invalid("label out of range"));
    }
    Ok(())
}

/// Which classes the guidance term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceScope {
    NonTarget,
    AllClass,
}

/// Training phase: the first stage trains with cross-entropy only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Full,
}

/// Everything the combined objective needs besides the forward outputs.
#[derive(Debug, Clone)]
pub struct LossOptions {
    pub lambda: f64,
    pub stage: Stage,
    pub scope: GuidanceScope,
    /// Per-modality cross-entropy weights (1.0 each by default).
    pub modality_ce_weights: Vec<f64>,
    /// Average the guidance term over guided samples only (default) or over
    /// the whole batch.
    pub average_active_only: bool,
}

impl LossOptions {
    pub fn new(lambda: f64, stage: Stage, scope: GuidanceScope, modalities: usize) -> Self {
        LossOptions {
            lambda,
            stage,
            scope,
            modality_ce_weights: vec![1.0; modalities],
            average_active_only: true,
        }
    }
}

/// Scalar pieces of one objective evaluation. `total` always equals
/// `fused_ce + Σ modality_ce + lambda·guidance` exactly as summed here.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub fused_ce: f64,
    pub modality_ce: Vec<f64>,
    pub guidance: f64,
    pub lambda: f64,
    pub total: f64,
    pub active: Vec<bool>,
}

/// Gradients on every logit matrix produced by [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub per_modality: Vec<Mat>,
    pub fused: Mat,
}

/// The full objective: fused cross-entropy, weighted per-modality
/// cross-entropies, and the guidance term (batch mean each), plus gradients
/// on per-modality and fused logits. During warm-up the guidance term is
/// forced to zero regardless of the decisions supplied.
pub fn total_loss(
    bundle: &LogitBundle,
    labels: &[usize],
    decisions: &[GuidanceDecision],
    opts: &LossOptions,
) -> Result<(LossBreakdown, LossGrads)> {
    let (b, c, m) = (bundle.batch_size(), bundle.num_classes(), bundle.modalities());
    if opts.lambda < 0.0 {
        return Err(Error::invalid("guidance strength must be >= 0"));
    }
    if labels.len() != b || decisions.len() != b {
        return Err(Error::shape("labels/decisions do not match batch size"));
    }
    if opts.modality_ce_weights.len() != m {
        return Err(Error::config("one cross-entropy weight per modality required"));
    }
    let bf = b as f64;
    let probs: Vec<Mat> = bundle
        .per_modality
        .iter()
        .map(softmax_rows)
        .collect::<Result<_>>()?;
    let fused_probs = softmax_rows(&bundle.fused)?;

    let mut grads = LossGrads {
        per_modality: (0..m).map(|_| Mat::zeros(b, c)).collect(),
        fused: Mat::zeros(b, c),
    };

    // Fused cross-entropy, batch mean.
    let mut fused_ce = 0.0;
    for i in 0..b {
        fused_ce += cross_entropy(bundle.fused.row(i), labels[i])?;
        for (k, g) in grads.fused.row_mut(i).iter_mut().enumerate() {
            *g = (fused_probs.get(i, k) - onehot(k, labels[i])) / bf;
        }
    }
    fused_ce /= bf;

    // Per-modality cross-entropies, batch mean each, weighted.
    let mut modality_ce = Vec::with_capacity(m);
    for mm in 0..m {
        let weight = opts.modality_ce_weights[mm];
        let mut ce = 0.0;
        for i in 0..b {
            ce += cross_entropy(bundle.per_modality[mm].row(i), labels[i])?;
            for (k, g) in grads.per_modality[mm].row_mut(i).iter_mut().enumerate() {
                *g += weight * (probs[mm].get(i, k) - onehot(k, labels[i])) / bf;
            }
        }
        modality_ce.push(weight * ce / bf);
    }

    // Guidance term over guided samples.
    let mut active = vec![false; b];
    let mut guidance = 0.0;
    if opts.stage == Stage::Full && opts.lambda > 0.0 {
        let n_active = decisions.iter().filter(|d| d.active).count();
        let denom = if opts.average_active_only {
            n_active as f64
        } else {
            bf
        };
        if n_active > 0 {
            for i in 0..b {
                let d = &decisions[i];
                if !d.active {
                    continue;
                }
                active[i] = true;
                if d.p_rdm.len() != c {
                    return Err(Error::shape("detached snapshot has wrong class count"));
                }
                for im in 0..m {
                    if im == d.rdm {
                        continue;
                    }
                    let p_im = probs[im].row(i);
                    match opts.scope {
                        GuidanceScope::NonTarget => {
                            guidance += mnl_loss(&d.p_rdm, p_im, labels[i])?;
                            let off_target = 1.0 - d.p_rdm[labels[i]];
                            let gr = grads.per_modality[im].row_mut(i);
                            for k in 0..c {
                                let g = off_target * p_im[k]
                                    - if k == labels[i] { 0.0 } else { d.p_rdm[k] };
                                gr[k] += opts.lambda * g / denom;
                            }
                        }
                        GuidanceScope::AllClass => {
                            guidance += allclass_guidance_loss(&d.p_rdm, p_im)?;
                            let gr = grads.per_modality[im].row_mut(i);
                            for k in 0..c {
                                gr[k] += opts.lambda * (p_im[k] - d.p_rdm[k]) / denom;
                            }
                        }
                    }
                }
            }
            guidance /= denom;
        }
    }

    let total = fused_ce + modality_ce.iter().sum::<f64>() + opts.lambda * guidance;
    Ok((
        LossBreakdown {
            fused_ce,
            modality_ce,
            guidance,
            lambda: opts.lambda,
            total,
            active,
        },
        grads,
    ))
}

fn onehot(k: usize, y: usize) -> f64 {
    if k == y {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::MultimodalBatch;
    use crate::model::{FusedModel, FusionSpec};
    use crate::numerics::RngStream;

    #[test]
    fn margin_picks_the_strongest_competitor() {
        let (xi, j) = ucom(&[2.0, 0.5, 1.0], 0).unwrap();
        assert_eq!((xi, j), (1.0, 2));

        let (xi, j) = ucom(&[0.5, 2.0, 1.0], 0).unwrap();
        assert_eq!((xi, j), (-1.5, 1));

        let (xi, _) = ucom(&[0.7, 0.7, 0.7], 1).unwrap();
        assert_eq!(xi, 0.0);
    }

    #[test]
    fn margin_competitor_ties_go_to_the_lowest_index() {
        let (_, j) = ucom(&[5.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(j, 1);
    }

    #[test]
    fn margin_sign_tracks_strict_dominance() {
        let mut rng = RngStream::from_seed(12);
        for _ in 0..2000 {
            let c = 2 + rng.index(5);
            let z: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let y = rng.index(c);
            let (xi, j) = ucom(&z, y).unwrap();
            assert_ne!(j, y);
            let dominant = (0..c).all(|k| k == y || z[y] > z[k]);
            assert_eq!(xi > 0.0, dominant);
            assert_eq!(is_correct(&z, y), dominant);
        }
    }

    #[test]
    fn fixed_pair_margin_examples() {
        assert_eq!(per_class_margin(&[2.0, 0.5, 1.0], 0, 1).unwrap(), 1.5);
        assert_eq!(per_class_margin(&[0.7, 0.7], 0, 1).unwrap(), 0.0);
        let scaled: Vec<f64> = [2.0, 0.5, 1.0].iter().map(|v| v * 3.5).collect();
        assert!(
            (per_class_margin(&scaled, 0, 1).unwrap() - 3.5 * 1.5).abs() < 1e-12
        );
        assert!(per_class_margin(&[1.0, 2.0], 1, 1).is_err());
    }

    #[test]
    fn fused_margin_decomposes_over_modalities() {
        // With static weights the fused margin at the fused competitor equals
        // the weight-sum of per-modality margins at that same competitor.
        let model = FusedModel::init(
            &[5, 4],
            &[8],
            4,
            FusionSpec::Static {
                weights: vec![0.3, 0.7],
            },
            &RngStream::from_seed(21),
        )
        .unwrap();
        let mut rng = RngStream::from_seed(3);
        let features = vec![
            crate::numerics::Mat::from_vec(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap(),
            crate::numerics::Mat::from_vec(6, 4, (0..24).map(|_| rng.normal()).collect()).unwrap(),
        ];
        let labels: Vec<usize> = (0..6).map(|_| rng.index(4)).collect();
        let batch = MultimodalBatch::new(features, labels.clone(), 4).unwrap();
        let bundle = model.forward(&batch).unwrap();
        let report = margin_report(&bundle, &labels).unwrap();
        for i in 0..6 {
            let j = report.fused_competitor[i];
            let recomposed: f64 = (0..2)
                .map(|m| {
                    bundle.weights.get(i, m)
                        * per_class_margin(bundle.per_modality[m].row(i), labels[i], j).unwrap()
                })
                .sum();
            assert!((report.fused_xi[i] - recomposed).abs() < 1e-10);
        }
    }

    #[test]
    fn selector_truth_table_is_exhaustive() {
        // All nine sign combinations of (confidence comparison, margin
        // comparison) between two modalities, label = 0, C = 2.
        let p = |py: f64| vec![py, 1.0 - py];
        let levels = [(0.7, 0.5), (0.6, 0.6), (0.5, 0.7)]; // p1 > p2, tie, p1 < p2
        let margins = [(1.2, 0.3), (0.8, 0.8), (0.3, 1.2)]; // xi1 > xi2, tie, xi1 < xi2
        for (pi, &(p1, p2)) in levels.iter().enumerate() {
            for (xi_i, &(x1, x2)) in margins.iter().enumerate() {
                let probs = vec![p(p1), p(p2)];
                let xi = vec![x1, x2];

                let robust = select_guidance(&probs, &xi, 0, GuidanceMode::Robust).unwrap();
                match (pi, xi_i) {
                    (0, 0) => assert!(robust.active && robust.rdm == 0),
                    (2, 2) => assert!(robust.active && robust.rdm == 1),
                    _ => assert!(!robust.active, "p case {pi}, xi case {xi_i}"),
                }

                let confident = select_guidance(&probs, &xi, 0, GuidanceMode::Confident).unwrap();
                match pi {
                    0 => assert!(confident.active && confident.rdm == 0),
                    1 => assert!(!confident.active),
                    _ => assert!(confident.active && confident.rdm == 1),
                }

                let prior =
                    select_guidance(&probs, &xi, 0, GuidanceMode::Prior { rdm: 1 }).unwrap();
                assert!(prior.active && prior.rdm == 1);
            }
        }
    }

    #[test]
    fn selector_snapshot_is_the_guiding_distribution() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.5, 0.3, 0.2]];
        let d = select_guidance(&probs, &[1.2, 0.3], 0, GuidanceMode::Robust).unwrap();
        assert!(d.active);
        assert_eq!(d.rdm, 0);
        assert_eq!(d.p_rdm, probs[0]);
    }

    #[test]
    fn selector_is_invariant_to_logit_shifts() {
        // Adding a constant to one modality's logits changes neither its
        // probabilities nor its margin, hence not the decision.
        let z1 = [2.0, 0.5, 1.0];
        let z2 = [1.0, 0.8, 0.9];
        let shifted: Vec<f64> = z1.iter().map(|v| v + 37.0).collect();
        let build = |z: &[f64]| crate::numerics::softmax(z).unwrap();
        let xi1 = ucom(&z1, 0).unwrap().0;
        let xi1s = ucom(&shifted, 0).unwrap().0;
        let xi2 = ucom(&z2, 0).unwrap().0;
        assert_eq!(xi1, xi1s);
        let a = select_guidance(&vec![build(&z1), build(&z2)], &[xi1, xi2], 0, GuidanceMode::Robust)
            .unwrap();
        let b = select_guidance(
            &vec![build(&shifted), build(&z2)],
            &[xi1s, xi2],
            0,
            GuidanceMode::Robust,
        )
        .unwrap();
        assert_eq!(a.active, b.active);
        assert_eq!(a.rdm, b.rdm);
    }

    #[test]
    fn three_modality_selection_needs_a_double_dominator() {
        let probs = vec![vec![0.8, 0.2], vec![0.6, 0.4], vec![0.5, 0.5]];
        // Modality 0 dominates both criteria.
        let d = select_guidance(&probs, &[2.0, 1.0, 0.5], 0, GuidanceMode::Robust).unwrap();
        assert!(d.active && d.rdm == 0);
        // Highest confidence and highest margin disagree: inactive.
        let d = select_guidance(&probs, &[0.5, 1.0, 2.0], 0, GuidanceMode::Robust).unwrap();
        assert!(!d.active);
    }

    #[test]
    fn guidance_loss_matches_direct_arithmetic() {
        let p_rdm = [0.7, 0.2, 0.1];
        let p_im = [0.5, 0.3, 0.2];
        let expect = -(0.2 * (0.3f64).ln() + 0.1 * (0.2f64).ln());
        let got = mnl_loss(&p_rdm, &p_im, 0).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.401738).abs() < 1e-6);
    }

    #[test]
    fn guidance_loss_vanishes_for_a_onehot_guide() {
        let got = mnl_loss(&[1.0, 0.0, 0.0], &[0.2, 0.5, 0.3], 0).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn guidance_loss_floor_is_the_guides_nontarget_entropy() {
        // Over the simplex, the loss is minimized by a student that empties
        // the target class and matches the guide's renormalized non-target
        // shape; the infimum is (1 - q_y) * H(q_nontarget).
        let q = [0.7, 0.2, 0.1];
        let h = -(2.0f64 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        let floor = 0.3 * h;
        let eps = 1e-9;
        let aligned = [eps, (1.0 - eps) * 2.0 / 3.0, (1.0 - eps) / 3.0];
        let got = mnl_loss(&q, &aligned, 0).unwrap();
        assert!((got - floor).abs() < 1e-8, "{got} vs {floor}");
        // Any other student does worse.
        for other in [[0.9, 0.05, 0.05], [0.1, 0.1, 0.8], [1.0 / 3.0; 3]] {
            assert!(mnl_loss(&q, &other, 0).unwrap() > floor);
        }
    }

    #[test]
    fn guidance_gradient_matches_direct_arithmetic() {
        // p_im = softmax(z) with z = ln(p) reproduces the worked example.
        let p_rdm = [0.7, 0.2, 0.1];
        let z_im: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let g = mnl_grad_logits(&p_rdm, &z_im, 0).unwrap();
        let expect = [0.15, -0.11, -0.04];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn guidance_gradient_sums_to_zero_and_respects_onehot_guides() {
        let mut rng = RngStream::from_seed(33);
        for _ in 0..500 {
            let c = 2 + rng.index(9);
            let y = rng.index(c);
            let z_rdm: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
            let z_im: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
            let p_rdm = crate::numerics::softmax(&z_rdm).unwrap();
            let g = mnl_grad_logits(&p_rdm, &z_im, y).unwrap();
            let sum: f64 = g.iter().sum();
            assert!(sum.abs() < 1e-12);

            let mut onehot = vec![0.0; c];
            onehot[y] = 1.0;
            let g = mnl_grad_logits(&onehot, &z_im, y).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let mut rng = RngStream::from_seed(44);
        let step = 1e-5;
        for _ in 0..100 {
            let c = 2 + rng.index(9);
            let y = rng.index(c);
            let p_rdm = crate::numerics::softmax(
                &(0..c).map(|_| rng.normal()).collect::<Vec<f64>>(),
            )
            .unwrap();
            let z: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let analytic = mnl_grad_logits(&p_rdm, &z, y).unwrap();
            for k in 0..c {
                let mut zp = z.clone();
                zp[k] += step;
                let mut zm = z.clone();
                zm[k] -= step;
                let fd = (mnl_loss(&p_rdm, &crate::numerics::softmax(&zp).unwrap(), y).unwrap()
                    - mnl_loss(&p_rdm, &crate::numerics::softmax(&zm).unwrap(), y).unwrap())
                    / (2.0 * step);
                let denom = analytic[k].abs().max(fd.abs()).max(1e-6);
                assert!((analytic[k] - fd).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn allclass_loss_matches_direct_arithmetic() {
        let p_rdm = [0.7, 0.2, 0.1];
        let p_im = [0.5, 0.3, 0.2];
        let expect = -(0.7 * (0.5f64).ln() + 0.2 * (0.3f64).ln() + 0.1 * (0.2f64).ln());
        let got = allclass_guidance_loss(&p_rdm, &p_im).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.886941).abs() < 1e-6);
        // The all-class value dominates the non-target value on the same pair.
        assert!(got >= mnl_loss(&p_rdm, &p_im, 0).unwrap());
    }

    #[test]
    fn allclass_loss_on_itself_is_entropy() {
        let p = [0.6f64, 0.3, 0.1];
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((allclass_guidance_loss(&p, &p).unwrap() - h).abs() < 1e-12);
        assert_eq!(
            allclass_guidance_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            0.0
        );
    }

    fn tiny_bundle() -> (LogitBundle, Vec<usize>) {
        let z1 = Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let z2 = Mat::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let mut weights = Mat::zeros(1, 2);
        weights.row_mut(0).copy_from_slice(&[0.5, 0.5]);
        let mut fused = Mat::zeros(1, 3);
        for (m, z) in [&z1, &z2].iter().enumerate() {
            for (f, zv) in fused.row_mut(0).iter_mut().zip(z.row(0)) {
                *f += weights.get(0, m) * zv;
            }
        }
        (
            LogitBundle {
                per_modality: vec![z1, z2],
                weights,
                fused,
            },
            vec![0],
        )
    }

    fn decisions_for(bundle: &LogitBundle, labels: &[usize], mode: GuidanceMode) -> Vec<GuidanceDecision> {
        let report = margin_report(bundle, labels).unwrap();
        (0..bundle.batch_size())
            .map(|i| {
                let probs: Vec<Vec<f64>> = bundle
                    .per_modality
                    .iter()
                    .map(|z| crate::numerics::softmax(z.row(i)).unwrap())
                    .collect();
                let xi: Vec<f64> = (0..bundle.modalities()).map(|m| report.xi_of(i, m)).collect();
                select_guidance(&probs, &xi, labels[i], mode).unwrap()
            })
            .collect()
    }

    #[test]
    fn total_loss_matches_hand_computed_components() {
        let (bundle, labels) = tiny_bundle();
        let decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        assert!(decisions[0].active && decisions[0].rdm == 0);
        let opts = LossOptions::new(1.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (breakdown, _) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();

        let e = std::f64::consts::E;
        // Fused logits [0.5, 0.5, 0], label 0.
        let fused_ce = (2.0 * (0.5f64).exp() + 1.0).ln() - 0.5;
        // Modality logits [1,0,0] and [0,1,0].
        let ce1 = (e + 2.0).ln() - 1.0;
        let ce2 = (e + 2.0).ln();
        // Guide probs [e,1,1]/(e+2); student probs [1,e,1]/(e+2).
        let d = e + 2.0;
        let mnl = -((1.0 / d) * (e / d).ln() + (1.0 / d) * (1.0 / d).ln());

        assert!((breakdown.fused_ce - fused_ce).abs() < 1e-12);
        assert!((breakdown.modality_ce[0] - ce1).abs() < 1e-12);
        assert!((breakdown.modality_ce[1] - ce2).abs() < 1e-12);
        assert!((breakdown.guidance - mnl).abs() < 1e-12);
        let total = fused_ce + ce1 + ce2 + mnl;
        assert!((breakdown.total - total).abs() < 1e-10);
    }

    #[test]
    fn warmup_forces_the_guidance_term_to_zero() {
        let (bundle, labels) = tiny_bundle();
        let decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        let opts = LossOptions::new(1.0, Stage::Warmup, GuidanceScope::NonTarget, 2);
        let (breakdown, grads) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();
        assert_eq!(breakdown.guidance, 0.0);
        assert!(breakdown.active.iter().all(|a| !a));
        // Grads reduce to the pure cross-entropy ones.
        let opts0 = LossOptions::new(0.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (_, grads0) = total_loss(&bundle, &labels, &decisions, &opts0).unwrap();
        assert_eq!(grads.per_modality, grads0.per_modality);
        assert_eq!(grads.fused, grads0.fused);
    }

    #[test]
    fn zero_lambda_reduces_to_cross_entropies() {
        let (bundle, labels) = tiny_bundle();
        let decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        let opts = LossOptions::new(0.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (breakdown, _) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();
        let expect = breakdown.fused_ce + breakdown.modality_ce.iter().sum::<f64>();
        assert!((breakdown.total - expect).abs() < 1e-12);
        assert_eq!(breakdown.guidance, 0.0);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let (bundle, labels) = tiny_bundle();
        let decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        let opts = LossOptions::new(-0.5, Stage::Full, GuidanceScope::NonTarget, 2);
        assert!(total_loss(&bundle, &labels, &decisions, &opts).is_err());
    }

    #[test]
    fn guiding_modality_receives_no_guidance_gradient() {
        // Switching lambda on changes only the guided modalities' gradients.
        let (bundle, labels) = tiny_bundle();
        let decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        let rdm = decisions[0].rdm;
        let on = LossOptions::new(1.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let off = LossOptions::new(0.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (_, g_on) = total_loss(&bundle, &labels, &decisions, &on).unwrap();
        let (_, g_off) = total_loss(&bundle, &labels, &decisions, &off).unwrap();
        assert_eq!(g_on.per_modality[rdm], g_off.per_modality[rdm]);
        assert_eq!(g_on.fused, g_off.fused);
        assert_ne!(g_on.per_modality[1 - rdm], g_off.per_modality[1 - rdm]);
    }

    #[test]
    fn perturbing_the_snapshot_changes_value_but_not_its_gradient_role() {
        // The guidance value depends on the detached snapshot, yet gradients
        // for the guiding logits stay those of its cross-entropy alone.
        let (bundle, labels) = tiny_bundle();
        let mut decisions = decisions_for(&bundle, &labels, GuidanceMode::Robust);
        let opts = LossOptions::new(1.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (b1, g1) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();
        decisions[0].p_rdm = vec![0.5, 0.25, 0.25];
        let (b2, g2) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();
        assert_ne!(b1.guidance, b2.guidance);
        assert_eq!(g1.per_modality[decisions[0].rdm], g2.per_modality[decisions[0].rdm]);
    }

    #[test]
    fn inactive_batches_contribute_no_guidance() {
        let (bundle, labels) = tiny_bundle();
        let decisions = vec![GuidanceDecision::inactive()];
        let opts = LossOptions::new(1.0, Stage::Full, GuidanceScope::NonTarget, 2);
        let (breakdown, _) = total_loss(&bundle, &labels, &decisions, &opts).unwrap();
        assert_eq!(breakdown.guidance, 0.0);
    }
}
