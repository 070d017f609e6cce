//! Two-stage training loop: a cross-entropy-only warm-up, then the full
//! objective where a per-sample guiding modality steers the weaker one.
//! Deterministic for a fixed (config, data, seed): fixed shuffle order, fixed
//! reduction order, rng streams derived per purpose.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::guidance::{
    is_correct, select_guidance, total_loss, ucom, GuidanceDecision, GuidanceMode, GuidanceScope,
    LossOptions, Stage,
};
use crate::model::{grad_slices, softmax_rows, FusedModel, FusionSpec, ModelGrads};
use crate::numerics::{Mat, RngStream};

/// Parameter-update rules. The momentum form is `v ← momentum·v + g`,
/// `p ← p − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Optimizer::SgdMomentum { lr, momentum } => {
                *lr > 0.0 && (0.0..1.0).contains(momentum)
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => *lr > 0.0 && (0.0..1.0).contains(beta1) && (0.0..1.0).contains(beta2) && *eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("optimizer hyperparameters out of range"))
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_warmup() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_lambda() -> f64 {
    1.0
}
fn default_optimizer() -> Optimizer {
    Optimizer::SgdMomentum {
        lr: 0.05,
        momentum: 0.9,
    }
}
fn default_guidance() -> GuidanceMode {
    GuidanceMode::Robust
}
fn default_scope() -> GuidanceScope {
    GuidanceScope::NonTarget
}
fn default_fusion() -> FusionSpec {
    FusionSpec::Static {
        weights: vec![0.5, 0.5],
    }
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_true() -> bool {
    true
}

/// Everything that defines a training run besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs with index < `warmup_epochs` train on cross-entropy only.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    /// Guidance strength; 0 disables guidance entirely.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_guidance")]
    pub guidance: GuidanceMode,
    #[serde(default = "default_scope")]
    pub scope: GuidanceScope,
    #[serde(default = "default_fusion")]
    pub fusion: FusionSpec,
    /// Per-modality cross-entropy weights; all 1.0 when omitted.
    #[serde(default)]
    pub modality_ce_weights: Option<Vec<f64>>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Average the guidance term over guided samples (true) or the batch.
    #[serde(default = "default_true")]
    pub average_active_only: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            warmup_epochs: default_warmup(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            lambda: default_lambda(),
            guidance: default_guidance(),
            scope: default_scope(),
            fusion: default_fusion(),
            modality_ce_weights: None,
            hidden: default_hidden(),
            average_active_only: default_true(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup cannot exceed total epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config("guidance strength must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.fusion.validate(modalities)?;
        if let Some(w) = &self.modality_ce_weights {
            if w.len() != modalities {
                return Err(Error::config("one cross-entropy weight per modality required"));
            }
            if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::config("cross-entropy weights must be finite and >= 0"));
            }
        }
        if let GuidanceMode::Prior { rdm } = self.guidance {
            if rdm >= modalities {
                return Err(Error::config("fixed guiding modality out of range"));
            }
        }
        Ok(())
    }

    fn ce_weights(&self, modalities: usize) -> Vec<f64> {
        self.modality_ce_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; modalities])
    }
}

/// One `p ← p − lr·(momentum·v + g)` update over a parameter slice.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Bias-corrected adaptive update over a parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state, one buffer set per parameter tensor.
struct OptState {
    velocity: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl OptState {
    fn new(model: &FusedModel) -> Self {
        let shapes: Vec<usize> = model
            .encoders
            .iter()
            .flat_map(|e| e.layers.iter().flat_map(|l| [l.w.data().len(), l.b.len()]))
            .collect();
        OptState {
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn apply(&mut self, model: &mut FusedModel, grads: &ModelGrads, opt: &Optimizer) {
        self.t += 1;
        let grad_views = grad_slices(grads);
        for (ti, params) in model.param_slices_mut().into_iter().enumerate() {
            match *opt {
                Optimizer::SgdMomentum { lr, momentum } => {
                    sgd_step(params, grad_views[ti], &mut self.velocity[ti], lr, momentum);
                }
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    adam_step(
                        params,
                        grad_views[ti],
                        &mut self.velocity[ti],
                        &mut self.second[ti],
                        self.t,
                        lr,
                        beta1,
                        beta2,
                        eps,
                    );
                }
            }
        }
    }
}

/// One logged row. `iter_ms` is wall-clock measurement and therefore never
/// persisted: the CSV log carries only reproducible columns so reruns with
/// the same config and seed produce byte-identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub fused_acc: f64,
    pub modality_acc: Vec<f64>,
    pub fused_ce: f64,
    pub modality_ce: Vec<f64>,
    pub guidance_loss: f64,
    pub lambda: f64,
    pub total: f64,
    /// Mean margin per modality over samples the fused model classifies
    /// correctly (0 when none are).
    pub mean_xi: Vec<f64>,
    /// Same sample set, margins on the probability scale (P_y − P_j).
    pub mean_xi_norm: Vec<f64>,
    /// Fraction of samples with an active guidance decision.
    pub guidance_rate: f64,
    /// Mean wall-time per optimizer step during this epoch (train rows
    /// only); measurement-only, excluded from the persisted log.
    pub iter_ms: f64,
}

/// Column names for a log with `m` modalities.
pub fn metrics_header(m: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "split".to_string(), "fused_acc".to_string()];
    cols.extend((0..m).map(|i| format!("acc_m{i}")));
    cols.push("fused_ce".to_string());
    cols.extend((0..m).map(|i| format!("ce_m{i}")));
    cols.extend(["guidance".to_string(), "lambda".to_string(), "total".to_string()]);
    cols.extend((0..m).map(|i| format!("mean_xi_m{i}")));
    cols.extend((0..m).map(|i| format!("mean_xi_norm_m{i}")));
    cols.push("guidance_rate".to_string());
    cols.join(",")
}

/// Render records as CSV; shortest-roundtrip float formatting keeps the file
/// byte-stable across reruns (timing column aside).
pub fn metrics_csv_string(records: &[MetricsRecord]) -> String {
    let m = records.first().map_or(0, |r| r.modality_acc.len());
    let mut out = metrics_header(m);
    out.push('\n');
    for r in records {
        let mut fields: Vec<String> = vec![r.epoch.to_string(), r.split.clone(), r.fused_acc.to_string()];
        fields.extend(r.modality_acc.iter().map(f64::to_string));
        fields.push(r.fused_ce.to_string());
        fields.extend(r.modality_ce.iter().map(f64::to_string));
        fields.push(r.guidance_loss.to_string());
        fields.push(r.lambda.to_string());
        fields.push(r.total.to_string());
        fields.extend(r.mean_xi.iter().map(f64::to_string));
        fields.extend(r.mean_xi_norm.iter().map(f64::to_string));
        fields.push(r.guidance_rate.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(metrics_csv_string(records).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(raw: &str, path: &Path, col: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: format!("unparsable value '{raw}' in column {col}"),
    })
}

/// Parse a metrics log back; errors when expected columns are missing.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "empty metrics log".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let m = cols.iter().filter(|c| c.starts_with("acc_m")).count();
    let expected = metrics_header(m);
    if header != expected {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("missing or reordered columns (expected '{expected}')"),
        });
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("row has {} fields, header has {}", f.len(), cols.len()),
            });
        }
        let mut i = 0;
        let mut next = || {
            let v = f[i];
            i += 1;
            v
        };
        let epoch = parse_field(next(), path, "epoch")?;
        let split = next().to_string();
        let fused_acc = parse_field(next(), path, "fused_acc")?;
        let modality_acc = (0..m)
            .map(|k| parse_field(next(), path, &format!("acc_m{k}")))
            .collect::<Result<_>>()?;
        let fused_ce = parse_field(next(), path, "fused_ce")?;
        let modality_ce = (0..m)
            .map(|k| parse_field(next(), path, &format!("ce_m{k}")))
            .collect::<Result<_>>()?;
        let guidance_loss = parse_field(next(), path, "guidance")?;
        let lambda = parse_field(next(), path, "lambda")?;
        let total = parse_field(next(), path, "total")?;
        let mean_xi = (0..m)
            .map(|k| parse_field(next(), path, &format!("mean_xi_m{k}")))
            .collect::<Result<_>>()?;
        let mean_xi_norm = (0..m)
            .map(|k| parse_field(next(), path, &format!("mean_xi_norm_m{k}")))
            .collect::<Result<_>>()?;
        let guidance_rate = parse_field(next(), path, "guidance_rate")?;
        records.push(MetricsRecord {
            epoch,
            split,
            fused_acc,
            modality_acc,
            fused_ce,
            modality_ce,
            guidance_loss,
            lambda,
            total,
            mean_xi,
            mean_xi_norm,
            guidance_rate,
            iter_ms: 0.0,
        });
    }
    Ok(records)
}

/// Final model, the checkpoint taken when warm-up ended (when there was
/// one), and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: FusedModel,
    pub warmup_model: Option<FusedModel>,
    pub metrics: Vec<MetricsRecord>,
}

fn gather(batch: &MultimodalBatch, idx: &[usize]) -> MultimodalBatch {
    let features = batch
        .features
        .iter()
        .map(|x| {
            let mut sub = Mat::zeros(idx.len(), x.cols());
            for (r, &i) in idx.iter().enumerate() {
                sub.row_mut(r).copy_from_slice(x.row(i));
            }
            sub
        })
        .collect();
    let labels = idx.iter().map(|&i| batch.labels[i]).collect();
    MultimodalBatch::new(features, labels, batch.num_classes).expect("gather keeps batch valid")
}

/// Per-sample guidance decisions from current outputs. Skipped entirely
/// (all-inactive) outside the full stage or when guidance is off, so a
/// guidance-free run never pays for selection.
fn decide_batch(
    bundle: &crate::model::LogitBundle,
    labels: &[usize],
    mode: GuidanceMode,
    stage: Stage,
    lambda: f64,
) -> Result<Vec<GuidanceDecision>> {
    if stage != Stage::Full || lambda == 0.0 {
        return Ok(vec![GuidanceDecision::inactive(); labels.len()]);
    }
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

/// Accuracy, loss breakdown, margins, and guidance activity of `model` on a
/// whole split, under the given stage/strength.
fn evaluate_split(
    model: &FusedModel,
    data: &MultimodalBatch,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<MetricsRecord> {
    let m = model.modalities();
    let bundle = model.forward(data)?;
    let decisions = decide_batch(&bundle, &data.labels, cfg.guidance, stage, cfg.lambda)?;
    let opts = LossOptions {
        lambda: cfg.lambda,
        stage,
        scope: cfg.scope,
        modality_ce_weights: cfg.ce_weights(m),
        average_active_only: cfg.average_active_only,
    };
    let (breakdown, _) = total_loss(&bundle, &data.labels, &decisions, &opts)?;

    let n = data.len();
    let mut fused_hits = 0usize;
    let mut modality_hits = vec![0usize; m];
    let mut xi_sum = vec![0.0; m];
    let mut xi_norm_sum = vec![0.0; m];
    let mut correct_count = 0usize;
    let probs: Vec<Mat> = bundle
        .per_modality
        .iter()
        .map(softmax_rows)
        .collect::<Result<_>>()?;
    for i in 0..n {
        let y = data.labels[i];
        let fused_ok = is_correct(bundle.fused.row(i), y);
        if fused_ok {
            fused_hits += 1;
            correct_count += 1;
        }
        for mm in 0..m {
            let z = bundle.per_modality[mm].row(i);
            if is_correct(z, y) {
                modality_hits[mm] += 1;
            }
            if fused_ok {
                let (xi, j) = ucom(z, y)?;
                xi_sum[mm] += xi;
                xi_norm_sum[mm] += probs[mm].get(i, y) - probs[mm].get(i, j);
            }
        }
    }
    let denom = correct_count.max(1) as f64;
    let record = MetricsRecord {
        epoch: 0,
        split: String::new(),
        fused_acc: fused_hits as f64 / n as f64,
        modality_acc: modality_hits.iter().map(|h| *h as f64 / n as f64).collect(),
        fused_ce: breakdown.fused_ce,
        modality_ce: breakdown.modality_ce.clone(),
        guidance_loss: breakdown.guidance,
        lambda: breakdown.lambda,
        total: breakdown.total,
        mean_xi: xi_sum.iter().map(|s| s / denom).collect(),
        mean_xi_norm: xi_norm_sum.iter().map(|s| s / denom).collect(),
        guidance_rate: decisions.iter().filter(|d| d.active).count() as f64 / n as f64,
        iter_ms: 0.0,
    };
    Ok(record)
}

/// Train per the two-stage schedule, logging one train and one val row per
/// epoch. Deterministic given (cfg, data, seed); aborts with the offending
/// batch index if the loss leaves the finite range.
pub fn train(
    cfg: &TrainConfig,
    train_data: &MultimodalBatch,
    val_data: &MultimodalBatch,
) -> Result<TrainOutput> {
    let m = train_data.modalities();
    cfg.validate(m)?;
    if val_data.modalities() != m || val_data.num_classes != train_data.num_classes {
        return Err(Error::shape("train and val splits disagree"));
    }
    let dims: Vec<usize> = train_data.features.iter().map(|x| x.cols()).collect();
    let root = RngStream::from_seed(cfg.seed);
    let mut model = FusedModel::init(
        &dims,
        &cfg.hidden,
        train_data.num_classes,
        cfg.fusion.clone(),
        &root.derive("init"),
    )?;
    let mut opt_state = OptState::new(&model);
    let ce_weights = cfg.ce_weights(m);
    let n = train_data.len();
    let mut warmup_model = None;
    let mut metrics = Vec::with_capacity(cfg.epochs * 2);

    for epoch in 0..cfg.epochs {
        let stage = if epoch < cfg.warmup_epochs {
            Stage::Warmup
        } else {
            Stage::Full
        };
        let mut order: Vec<usize> = (0..n).collect();
        root.derive_indexed("shuffle", epoch as u64).shuffle(&mut order);

        let mut active = 0usize;
        let mut seen = 0usize;
        let mut batches = 0usize;
        let started = Instant::now();
        for (batch_index, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(train_data, idx);
            // Any non-finite value surfacing in this step means the
            // optimizer blew up; report where instead of a bare math error.
            let step = (|| {
                let (bundle, caches) = model.forward_cached(&batch)?;
                let decisions =
                    decide_batch(&bundle, &batch.labels, cfg.guidance, stage, cfg.lambda)?;
                let opts = LossOptions {
                    lambda: cfg.lambda,
                    stage,
                    scope: cfg.scope,
                    modality_ce_weights: ce_weights.clone(),
                    average_active_only: cfg.average_active_only,
                };
                let (breakdown, lgrads) = total_loss(&bundle, &batch.labels, &decisions, &opts)?;
                Ok((bundle, caches, breakdown, lgrads))
            })();
            let (bundle, caches, breakdown, lgrads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                    })
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            let (grads, _) = model.backward(&bundle, &caches, &lgrads.per_modality, &lgrads.fused)?;
            opt_state.apply(&mut model, &grads, &cfg.optimizer);
            active += breakdown.active.iter().filter(|a| **a).count();
            seen += idx.len();
            batches += 1;
        }
        let iter_ms = started.elapsed().as_secs_f64() * 1e3 / batches.max(1) as f64;

        let mut train_row = evaluate_split(&model, train_data, cfg, stage)?;
        train_row.epoch = epoch;
        train_row.split = "train".into();
        // The activity rate of the train row reflects the decisions actually
        // applied during the epoch's updates.
        train_row.guidance_rate = active as f64 / seen.max(1) as f64;
        train_row.iter_ms = iter_ms;
        metrics.push(train_row);

        let mut val_row = evaluate_split(&model, val_data, cfg, stage)?;
        val_row.epoch = epoch;
        val_row.split = "val".into();
        metrics.push(val_row);

        if epoch + 1 == cfg.warmup_epochs {
            warmup_model = Some(model.clone());
        }
    }
    Ok(TrainOutput {
        model,
        warmup_model,
        metrics,
    })
}

/// Wall-time per training iteration for a guidance-free baseline and a
/// guided twin on the same data and seed.
#[derive(Debug, Clone)]
pub struct OverheadReport {
    pub baseline_ms: f64,
    pub guided_ms: f64,
    pub ratio: f64,
    pub iterations: usize,
}

fn time_iterations(cfg: &TrainConfig, data: &MultimodalBatch, iterations: usize) -> Result<f64> {
    let m = data.modalities();
    cfg.validate(m)?;
    let dims: Vec<usize> = data.features.iter().map(|x| x.cols()).collect();
    let root = RngStream::from_seed(cfg.seed);
    let mut model = FusedModel::init(
        &dims,
        &cfg.hidden,
        data.num_classes,
        cfg.fusion.clone(),
        &root.derive("init"),
    )?;
    let mut opt_state = OptState::new(&model);
    let ce_weights = cfg.ce_weights(m);
    let stage = if cfg.warmup_epochs == 0 {
        Stage::Full
    } else {
        Stage::Warmup
    };
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    root.derive("overhead-shuffle").shuffle(&mut order);
    let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();

    // A few untimed iterations to move past cold caches.
    let run_one = |model: &mut FusedModel, opt_state: &mut OptState, idx: &[usize]| -> Result<()> {
        let batch = gather(data, idx);
        let (bundle, caches) = model.forward_cached(&batch)?;
        let decisions = decide_batch(&bundle, &batch.labels, cfg.guidance, stage, cfg.lambda)?;
        let opts = LossOptions {
            lambda: cfg.lambda,
            stage,
            scope: cfg.scope,
            modality_ce_weights: ce_weights.clone(),
            average_active_only: cfg.average_active_only,
        };
        let (_, lgrads) = total_loss(&bundle, &batch.labels, &decisions, &opts)?;
        let (grads, _) = model.backward(&bundle, &caches, &lgrads.per_modality, &lgrads.fused)?;
        opt_state.apply(model, &grads, &cfg.optimizer);
        Ok(())
    };
    for warm in 0..3.min(chunks.len()) {
        run_one(&mut model, &mut opt_state, chunks[warm])?;
    }
    let started = Instant::now();
    for it in 0..iterations {
        run_one(&mut model, &mut opt_state, chunks[it % chunks.len()])?;
    }
    Ok(started.elapsed().as_secs_f64() * 1e3 / iterations as f64)
}

/// Time `iterations` optimizer steps (at least 100) for `cfg` with guidance
/// off versus on. The guided twin starts in the full stage so its per-step
/// cost includes selection and the guidance term.
pub fn measure_overhead(
    cfg: &TrainConfig,
    data: &MultimodalBatch,
    iterations: usize,
) -> Result<OverheadReport> {
    if iterations < 100 {
        return Err(Error::invalid("overhead measurement needs >= 100 iterations"));
    }
    let mut baseline = cfg.clone();
    baseline.lambda = 0.0;
    let mut guided = cfg.clone();
    guided.warmup_epochs = 0;
    if guided.lambda == 0.0 {
        guided.lambda = default_lambda();
    }
    let baseline_ms = time_iterations(&baseline, data, iterations)?;
    let guided_ms = time_iterations(&guided, data, iterations)?;
    Ok(OverheadReport {
        baseline_ms,
        guided_ms,
        ratio: guided_ms / baseline_ms,
        iterations,
    })
}
