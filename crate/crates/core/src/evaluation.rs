//! Test-time evaluation: noise-degradation sweeps over a grid of corruption
//! kinds, degrees, target modalities, and seeds; per-sample case taxonomy;
//! margin trajectories over training; and guidance-scope comparisons.
//!
//! Every sweep cell draws from an rng stream derived from (seed, kind,
//! degree, modality), so results are independent of evaluation order and
//! worker count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::datagen::{apply_noise, MultimodalBatch, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::guidance::{is_correct, ucom, GuidanceDecision};
use crate::model::{softmax_rows, FusedModel, LogitBundle};
use crate::numerics::{kl_divergence, RngStream};
use crate::parallel::ordered_map;
use crate::trainer::{train, MetricsRecord, TrainConfig, TrainOutput};

/// The cross product of corruption kinds, degrees, and target modalities a
/// sweep evaluates for every seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub kinds: Vec<NoiseKind>,
    pub degrees: Vec<f64>,
    pub noised_modalities: Vec<usize>,
}

impl SweepGrid {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.kinds.is_empty() || self.degrees.is_empty() || self.noised_modalities.is_empty() {
            return Err(Error::config("sweep grid has an empty axis"));
        }
        if self.degrees.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(Error::config("noise degrees must be finite and >= 0"));
        }
        if self.noised_modalities.iter().any(|m| *m >= modalities) {
            return Err(Error::config("noised modality out of range"));
        }
        Ok(())
    }
}

/// One trained model plus the test split it should be evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct SweepRun<'a> {
    pub seed: u64,
    pub model: &'a FusedModel,
    pub test: &'a MultimodalBatch,
}

/// All metrics from one sweep cell, keyed by metric name.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMeasurement {
    pub kind: NoiseKind,
    pub degree: f64,
    pub noised_modality: usize,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

/// Accuracy, margin, and cross-modal divergence metrics of `model` on
/// `batch`: fused and per-modality accuracy, mean margin per modality over
/// all samples, and mean KL divergence between each ordered pair of
/// modality posteriors.
pub fn batch_metrics(model: &FusedModel, batch: &MultimodalBatch) -> Result<Vec<(String, f64)>> {
    let bundle = model.forward(batch)?;
    let m = bundle.modalities();
    let n = batch.len();
    let nf = n as f64;
    let probs: Vec<_> = bundle
        .per_modality
        .iter()
        .map(softmax_rows)
        .collect::<Result<Vec<_>>>()?;

    let mut fused_hits = 0usize;
    let mut modality_hits = vec![0usize; m];
    let mut xi_sum = vec![0.0; m];
    let mut kl_sum = vec![vec![0.0; m]; m];
    for i in 0..n {
        let y = batch.labels[i];
        if is_correct(bundle.fused.row(i), y) {
            fused_hits += 1;
        }
        for mm in 0..m {
            let z = bundle.per_modality[mm].row(i);
            if is_correct(z, y) {
                modality_hits[mm] += 1;
            }
            xi_sum[mm] += ucom(z, y)?.0;
        }
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    kl_sum[a][b] += kl_divergence(probs[a].row(i), probs[b].row(i))?;
                }
            }
        }
    }

    let mut metrics = vec![("fused_acc".to_string(), fused_hits as f64 / nf)];
    for (mm, hits) in modality_hits.iter().enumerate() {
        metrics.push((format!("acc_m{mm}"), *hits as f64 / nf));
    }
    for (mm, s) in xi_sum.iter().enumerate() {
        metrics.push((format!("mean_xi_m{mm}"), s / nf));
    }
    for a in 0..m {
        for b in 0..m {
            if a != b {
                metrics.push((format!("kl_m{a}_m{b}"), kl_sum[a][b] / nf));
            }
        }
    }
    Ok(metrics)
}

/// The rng stream feeding one sweep cell; a function of (seed, kind, degree,
/// modality) only.
fn cell_stream(seed: u64, kind: NoiseKind, degree: f64, modality: usize) -> RngStream {
    RngStream::from_seed(seed)
        .derive("sweep")
        .derive(kind.name())
        .derive_indexed("degree", degree.to_bits())
        .derive_indexed("modality", modality as u64)
}

/// Evaluate every grid cell for every run: corrupt one modality of the test
/// split, leave the rest clean, and score the model. Cells are independent
/// and evaluated in parallel; output order is kinds x degrees x modalities x
/// runs regardless of worker count.
pub fn noise_sweep(runs: &[SweepRun], grid: &SweepGrid) -> Result<Vec<SweepMeasurement>> {
    let first = runs.first().ok_or_else(|| Error::invalid("sweep needs at least one run"))?;
    let modalities = first.test.modalities();
    grid.validate(modalities)?;
    for run in runs {
        if run.test.modalities() != modalities {
            return Err(Error::shape("sweep runs disagree on modality count"));
        }
    }

    struct Cell<'a> {
        kind: NoiseKind,
        degree: f64,
        modality: usize,
        run: SweepRun<'a>,
    }
    let mut cells = Vec::new();
    for &kind in &grid.kinds {
        for &degree in &grid.degrees {
            for &modality in &grid.noised_modalities {
                for &run in runs {
                    cells.push(Cell {
                        kind,
                        degree,
                        modality,
                        run,
                    });
                }
            }
        }
    }

    ordered_map(cells, |cell| -> Result<SweepMeasurement> {
        let mut rng = cell_stream(cell.run.seed, cell.kind, cell.degree, cell.modality);
        let spec = NoiseSpec {
            kind: cell.kind,
            degree: cell.degree,
        };
        let mut features = cell.run.test.features.clone();
        features[cell.modality] = apply_noise(&features[cell.modality], spec, &mut rng)?;
        let noised = MultimodalBatch::new(features, cell.run.test.labels.clone(), cell.run.test.num_classes)?;
        Ok(SweepMeasurement {
            kind: cell.kind,
            degree: cell.degree,
            noised_modality: cell.modality,
            seed: cell.run.seed,
            metrics: batch_metrics(cell.run.model, &noised)?,
        })
    })
    .into_iter()
    .collect()
}

/// Long-format sweep table: one row per (cell, metric).
pub fn sweep_csv_string(measurements: &[SweepMeasurement]) -> String {
    let mut out = String::from("kind,eps,noised_modality,seed,metric,value\n");
    for m in measurements {
        for (name, value) in &m.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.kind.name(),
                m.degree,
                m.noised_modality,
                m.seed,
                name,
                value
            ));
        }
    }
    out
}

pub fn write_sweep_csv(measurements: &[SweepMeasurement], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(sweep_csv_string(measurements).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Cross-seed summary of one (kind, degree, modality, metric) cell. The
/// spread is the sample standard deviation and absent with fewer than two
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAggregate {
    pub kind: String,
    pub eps: f64,
    pub noised_modality: usize,
    pub metric: String,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub seeds: usize,
}

/// Collapse per-seed measurements into mean/std per cell and metric,
/// preserving first-appearance order.
pub fn aggregate_sweep(measurements: &[SweepMeasurement]) -> Vec<SweepAggregate> {
    let mut keys: Vec<(NoiseKind, f64, usize, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for m in measurements {
        for (name, value) in &m.metrics {
            let key = (m.kind, m.degree, m.noised_modality, name.clone());
            match keys.iter().position(|k| *k == key) {
                Some(i) => values[i].push(*value),
                None => {
                    keys.push(key);
                    values.push(vec![*value]);
                }
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((kind, eps, modality, metric), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = (n >= 2).then(|| {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt()
            });
            SweepAggregate {
                kind: kind.name().to_string(),
                eps,
                noised_modality: modality,
                metric,
                mean,
                std,
                seeds: n,
            }
        })
        .collect()
}

/// The JSON-facing sweep report: the grid, the seeds, and the cross-seed
/// aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct SweepDocument {
    pub kinds: Vec<String>,
    pub eps: Vec<f64>,
    pub noised_modalities: Vec<usize>,
    pub seeds: Vec<u64>,
    pub aggregates: Vec<SweepAggregate>,
}

pub fn sweep_document(grid: &SweepGrid, seeds: &[u64], measurements: &[SweepMeasurement]) -> SweepDocument {
    SweepDocument {
        kinds: grid.kinds.iter().map(|k| k.name().to_string()).collect(),
        eps: grid.degrees.clone(),
        noised_modalities: grid.noised_modalities.clone(),
        seeds: seeds.to_vec(),
        aggregates: aggregate_sweep(measurements),
    }
}

pub fn write_sweep_json(doc: &SweepDocument, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::invalid(format!("sweep report serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-sample breakdown of how the guiding and guided modalities relate on
/// a batch. Samples without an active guidance decision land in
/// `conflict_excluded`; the five counts always sum to the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CaseTaxonomy {
    pub both_correct: usize,
    pub rdm_correct_im_wrong: usize,
    pub rdm_wrong_im_correct: usize,
    pub both_wrong: usize,
    pub conflict_excluded: usize,
}

impl CaseTaxonomy {
    pub fn total(&self) -> usize {
        self.both_correct
            + self.rdm_correct_im_wrong
            + self.rdm_wrong_im_correct
            + self.both_wrong
            + self.conflict_excluded
    }
}

/// Bucket every sample by the correctness of its guiding modality versus
/// the guided side (all other modalities jointly).
pub fn case_taxonomy(
    bundle: &LogitBundle,
    labels: &[usize],
    decisions: &[GuidanceDecision],
) -> Result<CaseTaxonomy> {
    let b = bundle.batch_size();
    if labels.len() != b || decisions.len() != b {
        return Err(Error::shape("labels/decisions do not match batch size"));
    }
    let m = bundle.modalities();
    let mut tax = CaseTaxonomy::default();
    for i in 0..b {
        let d = &decisions[i];
        if !d.active {
            tax.conflict_excluded += 1;
            continue;
        }
        if d.rdm >= m {
            return Err(Error::invalid("guiding modality out of range"));
        }
        let y = labels[i];
        let rdm_ok = is_correct(bundle.per_modality[d.rdm].row(i), y);
        let im_ok = (0..m)
            .filter(|mm| *mm != d.rdm)
            .all(|mm| is_correct(bundle.per_modality[mm].row(i), y));
        match (rdm_ok, im_ok) {
            (true, true) => tax.both_correct += 1,
            (true, false) => tax.rdm_correct_im_wrong += 1,
            (false, true) => tax.rdm_wrong_im_correct += 1,
            (false, false) => tax.both_wrong += 1,
        }
    }
    Ok(tax)
}

/// Mean margins of one split across training, on the logit and probability
/// scales.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub mean_xi: Vec<f64>,
    pub mean_xi_norm: Vec<f64>,
}

/// Extract the margin trajectory of `split` from a metrics log.
pub fn ucom_trajectory(records: &[MetricsRecord], split: &str) -> Result<Vec<TrajectoryPoint>> {
    let points: Vec<TrajectoryPoint> = records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| TrajectoryPoint {
            epoch: r.epoch,
            mean_xi: r.mean_xi.clone(),
            mean_xi_norm: r.mean_xi_norm.clone(),
        })
        .collect();
    if points.is_empty() {
        return Err(Error::invalid(format!("no metrics rows for split '{split}'")));
    }
    Ok(points)
}

/// Tab-separated trajectory table; one row per epoch.
pub fn write_trajectory_tsv(points: &[TrajectoryPoint], path: &Path) -> Result<()> {
    let m = points.first().map_or(0, |p| p.mean_xi.len());
    let mut cols = vec!["epoch".to_string()];
    cols.extend((0..m).map(|i| format!("mean_xi_m{i}")));
    cols.extend((0..m).map(|i| format!("mean_xi_norm_m{i}")));
    let mut out = cols.join("\t");
    out.push('\n');
    for p in points {
        let mut fields = vec![p.epoch.to_string()];
        fields.extend(p.mean_xi.iter().map(f64::to_string));
        fields.extend(p.mean_xi_norm.iter().map(f64::to_string));
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(out.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Test metrics of one scope's run in a scope comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ScopeOutcome {
    pub scope: String,
    pub metrics: Vec<(String, f64)>,
}

/// Twin training runs that differ only in guidance scope, scored on the
/// same test split.
#[derive(Debug, Clone, Serialize)]
pub struct ScopeComparison {
    pub non_target: ScopeOutcome,
    pub all_class: ScopeOutcome,
}

/// Train twice from the same config and seed, once per guidance scope, and
/// report test metrics for both.
pub fn compare_guidance_scopes(
    cfg: &TrainConfig,
    train_data: &MultimodalBatch,
    val_data: &MultimodalBatch,
    test_data: &MultimodalBatch,
) -> Result<ScopeComparison> {
    let run = |scope: crate::guidance::GuidanceScope| -> Result<TrainOutput> {
        let mut c = cfg.clone();
        c.scope = scope;
        train(&c, train_data, val_data)
    };
    let nt = run(crate::guidance::GuidanceScope::NonTarget)?;
    let ac = run(crate::guidance::GuidanceScope::AllClass)?;
    Ok(ScopeComparison {
        non_target: ScopeOutcome {
            scope: "non-target".into(),
            metrics: batch_metrics(&nt.model, test_data)?,
        },
        all_class: ScopeOutcome {
            scope: "all-class".into(),
            metrics: batch_metrics(&ac.model, test_data)?,
        },
    })
}
