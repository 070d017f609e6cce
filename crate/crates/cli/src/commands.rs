//! The six subcommands. Each resolves the config, applies flag overrides,
//! writes `resolved_config.json` to the output directory, then runs its
//! pipeline. All file artifacts are deterministic functions of the resolved
//! config; wall-clock measurements go to stdout only.

use serde::Serialize;

use mnl_core::datagen::{export_csv, gen_synthetic, read_batch, write_batch, MultimodalBatch, NoiseKind};
use mnl_core::evaluation::{
    noise_sweep, sweep_document, write_sweep_csv, write_sweep_json, SweepGrid, SweepRun,
};
use mnl_core::gradcheck::{check_logit_gradients, check_param_gradients, GradCheckReport};
use mnl_core::guidance::{GuidanceMode, GuidanceScope};
use mnl_core::model::{load_model, save_model, FusedModel};
use mnl_core::numerics::RngStream;
use mnl_core::robustness::{
    certify_batch, estimate_lipschitz, exact_linear_tau, write_certification_csv, CertifyOptions,
};
use mnl_core::trainer::{measure_overhead, train, write_metrics_csv, MetricsRecord};

use crate::config::{load_config, write_resolved, RunConfig, TauChoice};
use crate::{CertifyArgs, CommonArgs, Failure, GradcheckArgs, OverheadArgs, SweepArgs, TrainArgs};

/// Load the config and fold in the common overrides. The master seed drives
/// both data generation and training.
fn resolve_common(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn last_row<'a>(metrics: &'a [MetricsRecord], split: &str) -> Option<&'a MetricsRecord> {
    metrics.iter().rev().find(|r| r.split == split)
}

pub(crate) fn cmd_gen(args: CommonArgs) -> Result<(), Failure> {
    let cfg = resolve_common(&args)?;
    write_resolved(&cfg, &cfg.out_dir)?;
    let (train_b, val_b, test_b) = gen_synthetic(&cfg.synth)?;
    for (name, batch) in [("train", &train_b), ("val", &val_b), ("test", &test_b)] {
        write_batch(batch, &cfg.out_dir.join(format!("{name}.mnld")))?;
        export_csv(batch, &cfg.out_dir, name)?;
        println!(
            "{}: {} samples x {} modalities -> {}.mnld + CSV mirror",
            name,
            batch.len(),
            batch.modalities(),
            name
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> Result<(), Failure> {
    if let Some(lambda) = args.lambda {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Failure::config("lambda must be finite and >= 0"));
        }
        cfg.train.lambda = lambda;
    }
    if let Some(mode) = args.guidance.as_deref() {
        cfg.train.guidance = match mode {
            "prior" => GuidanceMode::Prior {
                rdm: args.rdm.unwrap_or(0),
            },
            "confident" => GuidanceMode::Confident,
            "robust" => GuidanceMode::Robust,
            other => {
                return Err(Failure::config(format!(
                    "unknown guidance mode '{other}' (expected prior, confident, or robust)"
                )))
            }
        };
    } else if let Some(rdm) = args.rdm {
        match &mut cfg.train.guidance {
            GuidanceMode::Prior { rdm: r } => *r = rdm,
            _ => return Err(Failure::config("--rdm only applies to prior guidance")),
        }
    }
    if let Some(scope) = args.scope.as_deref() {
        cfg.train.scope = match scope {
            "non-target" => GuidanceScope::NonTarget,
            "all-class" => GuidanceScope::AllClass,
            other => {
                return Err(Failure::config(format!(
                    "unknown guidance scope '{other}' (expected non-target or all-class)"
                )))
            }
        };
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(())
}

pub(crate) fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve_common(&args.common)?;
    apply_train_overrides(&mut cfg, &args)?;
    write_resolved(&cfg, &cfg.out_dir)?;
    let (train_b, val_b, _) = gen_synthetic(&cfg.synth)?;
    let out = train(&cfg.train, &train_b, &val_b)?;
    write_metrics_csv(&out.metrics, &cfg.out_dir.join("metrics.csv"))?;
    if let Some(warmup) = &out.warmup_model {
        save_model(warmup, &cfg.out_dir.join("warmup.mnlm"))?;
    }
    save_model(&out.model, &cfg.out_dir.join("model.mnlm"))?;
    if let (Some(tr), Some(va)) = (last_row(&out.metrics, "train"), last_row(&out.metrics, "val")) {
        println!(
            "final fused accuracy: train {:.4}, val {:.4}; guidance active on {:.1}% of samples",
            tr.fused_acc,
            va.fused_acc,
            100.0 * tr.guidance_rate
        );
    }
    let train_rows: Vec<&MetricsRecord> = out.metrics.iter().filter(|r| r.split == "train").collect();
    let mean_ms =
        train_rows.iter().map(|r| r.iter_ms).sum::<f64>() / train_rows.len().max(1) as f64;
    println!("mean step time {mean_ms:.3} ms (wall clock; not part of the logged artifacts)");
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn load_eval_data(cfg: &RunConfig, args: &CertifyArgs) -> Result<MultimodalBatch, Failure> {
    match &args.data {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::config(format!(
                    "data file not found: {}",
                    path.display()
                )));
            }
            Ok(read_batch(path)?)
        }
        None => Ok(gen_synthetic(&cfg.synth)?.2),
    }
}

pub(crate) fn cmd_certify(args: CertifyArgs) -> Result<(), Failure> {
    let mut cfg = resolve_common(&args.common)?;
    if args.attack {
        cfg.certify.attack = true;
    }
    if let Some(tau) = args.tau.as_deref() {
        cfg.certify.tau = match tau {
            "exact-linear" => TauChoice::ExactLinear,
            "sampled" => match cfg.certify.tau {
                sampled @ TauChoice::Sampled { .. } => sampled,
                TauChoice::ExactLinear => TauChoice::Sampled {
                    directions: 2000,
                    radius: 0.5,
                },
            },
            other => {
                return Err(Failure::config(format!(
                    "unknown tau method '{other}' (expected exact-linear or sampled)"
                )))
            }
        };
    }
    if let Some(claim) = &args.claim {
        cfg.certify.claim = Some(claim.clone());
    }
    cfg.validate().map_err(Failure::config)?;
    if cfg.certify.claim.as_deref() == Some("certified") && !cfg.certify.tau.is_exact() {
        return Err(Failure::config(
            "refusing to claim a certificate from sampled sensitivity constants: \
             sampling observes only finitely many perturbations and can underestimate \
             the true per-pair sensitivity, which would make the radius unsound; \
             use --tau exact-linear (single-layer encoders) or --claim estimate",
        ));
    }
    if !args.checkpoint.exists() {
        return Err(Failure::config(format!(
            "checkpoint file not found: {}",
            args.checkpoint.display()
        )));
    }
    write_resolved(&cfg, &cfg.out_dir)?;

    let model: FusedModel = load_model(&args.checkpoint)?;
    let data = load_eval_data(&cfg, &args)?;
    let root = RngStream::from_seed(cfg.seed).derive("certify");
    let tau = match cfg.certify.tau {
        TauChoice::ExactLinear => exact_linear_tau(&model)?,
        TauChoice::Sampled { directions, radius } => {
            let mut stream = root.derive("lipschitz");
            estimate_lipschitz(&model, &data, directions, radius, &mut stream)?
        }
    };
    let results = certify_batch(
        &model,
        &data,
        &tau,
        CertifyOptions {
            attack: cfg.certify.attack,
        },
        &root,
    )?;
    write_certification_csv(&results, &cfg.out_dir.join("certification.csv"))?;

    let correct = results.iter().filter(|r| r.correct).count();
    let bounded: Vec<f64> = results
        .iter()
        .filter_map(|r| r.r_lb)
        .filter(|v| v.is_finite())
        .collect();
    let smallest = bounded.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "{} samples: {} correct, {} with a finite radius bound",
        results.len(),
        correct,
        bounded.len()
    );
    if !bounded.is_empty() {
        println!("smallest bounded radius: {smallest:.6}");
    }
    if !cfg.certify.tau.is_exact() {
        println!(
            "note: sensitivity constants were sampled; radii are estimates, not certificates"
        );
    }
    println!("report: {}", cfg.out_dir.join("certification.csv").display());
    Ok(())
}

pub(crate) fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut cfg = resolve_common(&args.common)?;
    if let Some(eps) = &args.eps {
        cfg.eval.eps = eps.clone();
    }
    if let Some(seeds) = &args.seeds {
        cfg.eval.seeds = seeds.clone();
    }
    if let Some(kinds) = &args.kinds {
        cfg.eval.kinds = kinds
            .iter()
            .map(|k| k.parse::<NoiseKind>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    if let Some(lambda) = args.lambda {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Failure::config("lambda must be finite and >= 0"));
        }
        cfg.train.lambda = lambda;
    }
    cfg.validate().map_err(Failure::config)?;
    write_resolved(&cfg, &cfg.out_dir)?;

    let mut models = Vec::new();
    let mut tests = Vec::new();
    for &seed in &cfg.eval.seeds {
        let mut synth = cfg.synth.clone();
        synth.seed = seed;
        let (train_b, val_b, test_b) = gen_synthetic(&synth)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let out = train(&tc, &train_b, &val_b)?;
        if let Some(va) = last_row(&out.metrics, "val") {
            println!("seed {seed}: final val accuracy {:.4}", va.fused_acc);
        }
        models.push(out.model);
        tests.push(test_b);
    }
    let runs: Vec<SweepRun> = cfg
        .eval
        .seeds
        .iter()
        .zip(models.iter().zip(&tests))
        .map(|(seed, (model, test))| SweepRun {
            seed: *seed,
            model,
            test,
        })
        .collect();
    let grid = SweepGrid {
        kinds: cfg.eval.kinds.clone(),
        degrees: cfg.eval.eps.clone(),
        noised_modalities: cfg.eval.noised_modalities.clone(),
    };
    let measurements = noise_sweep(&runs, &grid)?;
    write_sweep_csv(&measurements, &cfg.out_dir.join("sweep.csv"))?;
    let doc = sweep_document(&grid, &cfg.eval.seeds, &measurements);
    write_sweep_json(&doc, &cfg.out_dir.join("sweep.json"))?;
    for agg in doc
        .aggregates
        .iter()
        .filter(|a| a.metric == "fused_acc")
    {
        println!(
            "{} eps {} (modality {}): fused accuracy {:.4} over {} seeds",
            agg.kind, agg.eps, agg.noised_modality, agg.mean, agg.seeds
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

pub(crate) fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    if args.configs == 0 {
        return Err(Failure::config("--configs must be >= 1"));
    }
    let cfg = resolve_common(&args.common)?;
    write_resolved(&cfg, &cfg.out_dir)?;
    let logits = check_logit_gradients(args.configs, cfg.seed)?;
    let params = check_param_gradients((args.configs / 5).max(1), cfg.seed)?;
    let describe = |name: &str, r: &GradCheckReport| {
        println!(
            "{name}: max rel error {:.3e} over {} configs ({} coordinates) -> {}",
            r.max_rel_error,
            r.configs,
            r.coords,
            if r.passed() { "pass" } else { "FAIL" }
        );
    };
    describe("logit-level", &logits);
    describe("parameter-level", &params);

    #[derive(Serialize)]
    struct Doc {
        logits: GradCheckReport,
        params: GradCheckReport,
    }
    let doc = Doc {
        logits: logits.clone(),
        params: params.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Failure::runtime(format!("cannot serialize gradcheck report: {e}")))?;
    text.push('\n');
    std::fs::write(cfg.out_dir.join("gradcheck.json"), text)
        .map_err(|e| Failure::runtime(format!("cannot write gradcheck report: {e}")))?;

    if !(logits.passed() && params.passed()) {
        return Err(Failure::runtime(format!(
            "gradient check failed: max rel error {:.3e} exceeds {:.0e}",
            logits.max_rel_error.max(params.max_rel_error),
            logits.tolerance
        )));
    }
    Ok(())
}

pub(crate) fn cmd_overhead(args: OverheadArgs) -> Result<(), Failure> {
    if args.iterations < 100 {
        return Err(Failure::config("--iterations must be >= 100"));
    }
    let cfg = resolve_common(&args.common)?;
    write_resolved(&cfg, &cfg.out_dir)?;
    let (train_b, _, _) = gen_synthetic(&cfg.synth)?;
    let report = measure_overhead(&cfg.train, &train_b, args.iterations)?;
    println!("baseline: {:.3} ms/iteration", report.baseline_ms);
    println!("guided:   {:.3} ms/iteration", report.guided_ms);
    println!(
        "ratio:    {:.3} over {} iterations",
        report.ratio, report.iterations
    );
    Ok(())
}
