//! Run configuration: one self-describing JSON document per run, plus flag
//! overrides applied by the commands. The resolved document (after
//! overrides) is written to the output directory for auditability.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mnl_core::datagen::{NoiseKind, SynthConfig};
use mnl_core::trainer::TrainConfig;

use crate::Failure;

fn default_kinds() -> Vec<NoiseKind> {
    vec![NoiseKind::Gaussian]
}
fn default_eps() -> Vec<f64> {
    vec![0.0, 5.0, 10.0]
}
fn default_noised() -> Vec<usize> {
    vec![1]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// The sweep grid: which corruptions, at which degrees, on which modality,
/// across which seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<NoiseKind>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_noised")]
    pub noised_modalities: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            kinds: default_kinds(),
            eps: default_eps(),
            noised_modalities: default_noised(),
            seeds: default_seeds(),
        }
    }
}

fn default_directions() -> usize {
    2000
}
fn default_probe_radius() -> f64 {
    0.5
}

/// How per-class-pair sensitivity constants are obtained. `exact-linear`
/// computes them in closed form (single-layer encoders only) and yields a
/// certificate; `sampled` probes random perturbations and yields an
/// estimate that may understate the true sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TauChoice {
    ExactLinear,
    Sampled {
        #[serde(default = "default_directions")]
        directions: usize,
        #[serde(default = "default_probe_radius")]
        radius: f64,
    },
}

impl Default for TauChoice {
    fn default() -> Self {
        TauChoice::ExactLinear
    }
}

impl TauChoice {
    pub fn is_exact(self) -> bool {
        matches!(self, TauChoice::ExactLinear)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    /// Also run the attack search and add the empirical flip radius column.
    #[serde(default)]
    pub attack: bool,
    #[serde(default)]
    pub tau: TauChoice,
    /// "certified" or "estimate"; sampled constants refuse "certified".
    #[serde(default)]
    pub claim: Option<String>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("mnl-out")
}

/// Everything one run needs: data recipe, training recipe, sweep grid,
/// certification options, output directory, and the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Master seed; drives data generation and training alike.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.synth.validate().map_err(|e| e.to_string())?;
        let modalities = self.synth.dims.len();
        self.train.validate(modalities).map_err(|e| e.to_string())?;
        if self.eval.kinds.is_empty() || self.eval.eps.is_empty() || self.eval.seeds.is_empty() {
            return Err("eval grid has an empty axis".into());
        }
        if self.eval.eps.iter().any(|e| *e < 0.0 || !e.is_finite()) {
            return Err("eval eps values must be finite and >= 0".into());
        }
        if self.eval.noised_modalities.iter().any(|m| *m >= modalities) {
            return Err("eval noised modality out of range".into());
        }
        if let TauChoice::Sampled { directions, radius } = self.certify.tau {
            if directions == 0 {
                return Err("sampled tau needs at least one probe direction".into());
            }
            if !(radius > 0.0) || !radius.is_finite() {
                return Err("sampled tau probe radius must be finite and > 0".into());
            }
        }
        if let Some(claim) = &self.certify.claim {
            if claim != "certified" && claim != "estimate" {
                return Err(format!("unknown claim '{claim}' (expected 'certified' or 'estimate')"));
            }
        }
        Ok(())
    }
}

/// Load and validate a run config; any problem here is a usage error.
pub fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.exists() {
        return Err(Failure::config(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

/// Write the post-override config next to the run's other artifacts.
pub fn write_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Failure::runtime(format!("cannot serialize resolved config: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join("resolved_config.json"), text)
        .map_err(|e| Failure::runtime(format!("cannot write resolved config: {e}")))?;
    Ok(())
}
