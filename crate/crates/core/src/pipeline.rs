//! Stage drivers: babble → factorize → identify → synthesize → evaluate.
//!
//! Every artifact is a [`Stamped`] JSON file (CSV outputs carry the stamp as a
//! leading `#` line). A stage refuses to consume an upstream artifact whose
//! stamp does not match the current configuration hash.
//!
//! ```text
//! <out>/dataset/manifest.json + traj_*.csv
//! <out>/pair.json
//! <out>/model.json
//! <out>/synthesis.json
//! <out>/evaluation/report.json + phase_*.csv + response_*.csv
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::babbling::{generate_dataset, read_shards, sample_random_gains, write_shards, DatasetManifest, SnapshotDataset, MANIFEST_FILE};
use crate::config::{stage_seed, ExperimentConfig, Stamp, Stamped};
use crate::edmd::{identify_model, BilinearKoopmanModel};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_closed_loop, export_plot_data, lifted_vs_true, EvaluationReport, InitialConditionSpec, LyapunovSpec};
use crate::factorization::{fit_candidate_hbar, threshold_mask, verify_assumption1, FactorizationPair};
use crate::linalg::Vector;
use crate::lmi::{certified_rate, synthesize, SynthesisResult};
use crate::plants::ControlAffine;

pub const DATASET_DIR: &str = "dataset";
pub const PAIR_FILE: &str = "pair.json";
pub const MODEL_FILE: &str = "model.json";
pub const SYNTHESIS_FILE: &str = "synthesis.json";
pub const EVALUATION_DIR: &str = "evaluation";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Babble,
    Factorize,
    Identify,
    Synthesize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Babble, Stage::Factorize, Stage::Identify, Stage::Synthesize, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Babble => "babble",
            Stage::Factorize => "factorize",
            Stage::Identify => "identify",
            Stage::Synthesize => "synthesize",
            Stage::Evaluate => "evaluate",
        }
    }

    /// The stamped JSON file whose presence marks the stage as done.
    pub fn artifact(self, out: &Path) -> PathBuf {
        match self {
            Stage::Babble => out.join(DATASET_DIR).join(MANIFEST_FILE),
            Stage::Factorize => out.join(PAIR_FILE),
            Stage::Identify => out.join(MODEL_FILE),
            Stage::Synthesize => out.join(SYNTHESIS_FILE),
            Stage::Evaluate => out.join(EVALUATION_DIR).join(REPORT_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationArtifact {
    pub pair: FactorizationPair,
    pub labels: Vec<String>,
    /// RMS of `‖ψ_x ⊗ ψ_u‖` over the dataset states.
    pub target_rms: f64,
    pub default_eps_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub states: usize,
    /// `max ‖(Sψ_x) ⊗ ψ_u − Hψ_x‖_∞` over fresh random states.
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisArtifact {
    pub result: SynthesisResult,
    pub verification: VerificationReport,
}

fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

/// Reads an upstream artifact, checking that it exists and matches `stamp`.
fn read_upstream<T>(path: &Path, stamp: &Stamp, producer: Stage) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    if !path.exists() {
        return Err(precondition(format!("{} not found; run `{}` first", path.display(), producer.name())));
    }
    let art: Stamped<T> = Stamped::read(path)?;
    if art.stamp.config_hash != stamp.config_hash {
        return Err(precondition(format!(
            "{} was produced by configuration {} (current {}); rerun `{}`",
            path.display(),
            &art.stamp.config_hash[..12.min(art.stamp.config_hash.len())],
            &stamp.config_hash[..12],
            producer.name()
        )));
    }
    Ok(art.data)
}

/// True when the stage artifact exists and carries the current config hash.
pub fn is_cached(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> bool {
    let path = stage.artifact(out);
    let Ok(text) = std::fs::read_to_string(path) else { return false };
    #[derive(Deserialize)]
    struct StampOnly {
        stamp: Stamp,
    }
    serde_json::from_str::<StampOnly>(&text).is_ok_and(|s| s.stamp.config_hash == cfg.config_hash())
}

pub fn manifest_hash(manifest: &DatasetManifest) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(manifest)?)))
}

fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<SnapshotDataset> {
    let dir = out.join(DATASET_DIR);
    let manifest: DatasetManifest = read_upstream(&dir.join(MANIFEST_FILE), &cfg.stamp(), Stage::Babble)?;
    read_shards(&manifest, &dir)
}

pub fn babble(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let plant = cfg.plant()?;
    let map_u = cfg.map_u()?;
    let bcfg = cfg.babbling_config();
    let stamp = cfg.stamp();
    let data = generate_dataset(&plant, &map_u, &bcfg)?;
    let gains = sample_random_gains(&bcfg, plant.input_dim(), map_u.dim())?;
    let dir = out.join(DATASET_DIR);
    if dir.exists() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "csv") {
                std::fs::remove_file(p)?;
            }
        }
    }
    let manifest = write_shards(&data, &bcfg, gains, &dir, Some(&stamp.comment()))?;
    let hash = manifest_hash(&manifest)?;
    let summary = vec![
        format!("trajectories: {} (dropped {})", manifest.trajectory_count, manifest.dropped),
        format!("snapshots: {}", manifest.snapshot_count),
        format!("manifest sha256: {hash}"),
    ];
    Stamped { stamp, data: manifest }.write(&dir.join(MANIFEST_FILE))?;
    Ok(StageOutcome { stage: Stage::Babble, cached: false, summary })
}

pub fn factorize(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg, out)?;
    let map_x = cfg.map_x()?;
    let map_u = cfg.map_u()?;
    let fit = fit_candidate_hbar(&data, &map_x, &map_u)?;
    let default_eps_h = fit.default_eps_h();
    let eps_h = cfg.factorization.eps_h.resolve(default_eps_h);
    let pair = threshold_mask(&fit, eps_h)?;
    let labels: Vec<String> = map_x.labels().iter().map(|s| s.to_string()).collect();
    let mut summary: Vec<String> = pair.residual_table(&map_x.labels()).lines().map(str::to_string).collect();
    if pair.rank_deficient.iter().any(|&b| b) {
        summary.push("warning: the ψ_x regressor is rank deficient; minimum-norm blocks were used".into());
    }
    log::info!("factorization kept d_S = {} of {} blocks", pair.selected_dim(), pair.mask.len());
    let art = FactorizationArtifact { pair, labels, target_rms: fit.target_rms, default_eps_h };
    Stamped { stamp: cfg.stamp(), data: art }.write(&out.join(PAIR_FILE))?;
    Ok(StageOutcome { stage: Stage::Factorize, cached: false, summary })
}

pub fn identify(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let stamp = cfg.stamp();
    let fact: FactorizationArtifact = read_upstream(&out.join(PAIR_FILE), &stamp, Stage::Factorize)?;
    let data = load_dataset(cfg, out)?;
    let map_x = cfg.map_x()?;
    let model = identify_model(&data, &map_x, &fact.pair.selection, &cfg.identify_options())?;
    let d = model.diagnostics.as_ref().ok_or_else(|| precondition("identification produced no diagnostics"))?;
    let mut summary = vec![
        format!("lifted dim {}, d_S {}, ridge {:.3e}", model.lifted_dim(), model.selection.rows(), d.ridge),
        format!("train snapshots {} ({} trajectories), held out {} ({})", d.train_snapshots, d.train_trajectories, d.holdout_snapshots, d.holdout_trajectories),
        format!("train MSE {:.3e}, held-out MSE {:.3e}, held-out state MSE {:.3e}", d.train_mse, d.holdout_mse, d.holdout_state_mse),
        format!("rank {}, condition {:.3e}", d.rank, d.condition),
    ];
    if d.input_block_unidentified {
        summary.push(format!("warning: input block rank {} — K_xu is not fully identified from this data", d.input_block_rank));
    }
    Stamped { stamp, data: model }.write(&out.join(MODEL_FILE))?;
    Ok(StageOutcome { stage: Stage::Identify, cached: false, summary })
}

/// Checks the factorization on fresh states drawn uniformly from the
/// training grid box.
pub fn verification_gate(cfg: &ExperimentConfig, fact: &FactorizationArtifact) -> Result<VerificationReport> {
    let map_x = cfg.map_x()?;
    let map_u = cfg.map_u()?;
    let spec = InitialConditionSpec::Uniform { count: cfg.factorization.verify_states, bounds: cfg.babbling.state_grid.clone() };
    let states: Vec<Vector> = spec.resolve(map_x.state_dim, stage_seed(cfg.seed, "verify"))?;
    let residual = verify_assumption1(&fact.pair, &map_x, &map_u, &states);
    let kept_max = fact
        .pair
        .residuals
        .iter()
        .zip(&fact.pair.mask)
        .filter(|(_, &k)| k)
        .map(|(r, _)| *r)
        .fold(0.0, f64::max);
    let eps = if fact.pair.eps_h.is_finite() { fact.pair.eps_h } else { 0.0 };
    let tolerance = cfg.factorization.verify_factor * kept_max.max(eps).max(1e-12 * fact.target_rms);
    Ok(VerificationReport { states: states.len(), residual, tolerance, passed: residual <= tolerance })
}

pub fn synthesize_stage(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let stamp = cfg.stamp();
    let fact: FactorizationArtifact = read_upstream(&out.join(PAIR_FILE), &stamp, Stage::Factorize)?;
    let model: BilinearKoopmanModel = read_upstream(&out.join(MODEL_FILE), &stamp, Stage::Identify)?;
    model.check_map()?;
    let verification = verification_gate(cfg, &fact)?;
    if !verification.passed {
        return Err(precondition(format!(
            "factorization verification failed: residual {:.3e} on {} fresh states exceeds {:.3e}",
            verification.residual, verification.states, verification.tolerance
        )));
    }
    let result = synthesize(&model, &fact.pair, &cfg.synthesis_options())?;
    let summary = synthesis_summary(&result, &verification);
    let status = result.status;
    Stamped { stamp, data: SynthesisArtifact { result, verification } }.write(&out.join(SYNTHESIS_FILE))?;
    if status != crate::lmi::SynthesisStatus::Optimal {
        return Err(Error::SynthesisFailed { status: status_name(status) });
    }
    Ok(StageOutcome { stage: Stage::Synthesize, cached: false, summary })
}

fn status_name(status: crate::lmi::SynthesisStatus) -> String {
    serde_json::to_value(status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_else(|| format!("{status:?}"))
}

fn synthesis_summary(result: &SynthesisResult, verification: &VerificationReport) -> Vec<String> {
    let mut s = vec![format!(
        "verification residual {:.3e} (tolerance {:.3e}, {} states)",
        verification.residual, verification.tolerance, verification.states
    )];
    s.push(format!("status: {}", status_name(result.status)));
    if let (Some(l), Ok(rate)) = (result.lambda, certified_rate(result)) {
        s.push(format!("lambda* = {l:.6}, rate sqrt(lambda*) = {rate:.6}"));
    }
    s.push(format!("resamples: {}, candidates examined: {}", result.diagnostics.resamples, result.diagnostics.candidates.len()));
    if let Some(k) = &result.k_u {
        s.push(format!("K_u = {:?}", k.matrix().iter().copied().collect::<Vec<f64>>()));
    }
    s
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let stamp = cfg.stamp();
    let syn: SynthesisArtifact = read_upstream(&out.join(SYNTHESIS_FILE), &stamp, Stage::Synthesize)?;
    let result = &syn.result;
    let (Some(k_u), Some(candidate), Some(lambda)) = (&result.k_u, &result.candidate, result.lambda) else {
        return Err(precondition(format!("synthesis status is {}; nothing to evaluate", status_name(result.status))));
    };
    if !result.is_optimal() {
        return Err(Error::NotOptimal);
    }
    let plant = cfg.plant()?;
    let map_x = cfg.map_x()?;
    let map_u = cfg.map_u()?;
    let settings = cfg.simulation_settings();
    let dx = plant.state_dim();
    let states = cfg.evaluation.initial_conditions.resolve(dx, stage_seed(cfg.seed, "evaluate"))?;
    let spec = LyapunovSpec { candidate, map_x: &map_x, lambda };
    let mut report = evaluate_closed_loop(&plant, &map_u, k_u, &states, &settings, Some(spec))?;
    if !cfg.evaluation.stress_states.is_empty() {
        let stress: Vec<Vector> = cfg.evaluation.stress_states.iter().map(|s| Vector::from_column_slice(s)).collect();
        report.stress = evaluate_closed_loop(&plant, &map_u, k_u, &stress, &settings, Some(spec))?.records;
    }
    report.training_bounds = Some(cfg.babbling.state_grid.clone());
    if cfg.evaluation.fidelity_steps > 0 {
        let fact: FactorizationArtifact = read_upstream(&out.join(PAIR_FILE), &stamp, Stage::Factorize)?;
        let model: BilinearKoopmanModel = read_upstream(&out.join(MODEL_FILE), &stamp, Stage::Identify)?;
        report.fidelity = Some(lifted_vs_true(&model, &fact.pair, &map_u, k_u, &plant, &states, cfg.evaluation.fidelity_steps, settings.dt)?);
    }
    let dir = out.join(EVALUATION_DIR);
    export_plot_data(&report, &dir, Some(&stamp.comment()))?;
    let summary = evaluation_summary(&report);
    let rate = report.success_rate;
    Stamped { stamp, data: report }.write(&dir.join(REPORT_FILE))?;
    if let Some(gate) = cfg.evaluation.success_gate {
        if rate < gate {
            return Err(Error::GateFailed { success_rate: rate, gate });
        }
    }
    Ok(StageOutcome { stage: Stage::Evaluate, cached: false, summary })
}

fn evaluation_summary(r: &EvaluationReport) -> Vec<String> {
    let converged = r.records.iter().filter(|t| t.converged).count();
    let mut s = vec![
        format!("converged {converged}/{} (success rate {:.3})", r.records.len(), r.success_rate),
        format!(
            "median settling time {}, median final error {:.3e}",
            r.median_settling_time_s.map_or("n/a".to_string(), |t| format!("{t:.2} s")),
            r.median_final_error
        ),
        format!("uncontrolled twins not converged: {:.3}", r.uncontrolled_diverged_fraction),
    ];
    for t in &r.stress {
        s.push(format!("stress {:?}: converged {} (final {:?})", t.initial_state, t.converged, t.final_state));
    }
    if let Some(f) = &r.fidelity {
        s.push(format!("lifted prediction: one-step MSE {:.3e}, n-step MSE {:.3e}", f.one_step_mse, f.n_step_mse));
    }
    if let Some(l) = r.lambda {
        s.push(format!("lambda* = {l:.6}"));
    }
    s
}

/// Runs one stage by name.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    match stage {
        Stage::Babble => babble(cfg, out),
        Stage::Factorize => factorize(cfg, out),
        Stage::Identify => identify(cfg, out),
        Stage::Synthesize => synthesize_stage(cfg, out),
        Stage::Evaluate => evaluate(cfg, out),
    }
}

/// Runs all stages in order, skipping those whose artifact already carries
/// the current configuration hash. A cached failed synthesis fails again.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, mut on_stage: impl FnMut(&StageOutcome)) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    let mut done = Vec::new();
    let mut upstream_rerun = false;
    for stage in Stage::ALL {
        let outcome = if !upstream_rerun && is_cached(stage, cfg, out) {
            if stage == Stage::Synthesize {
                let art: SynthesisArtifact = read_upstream(&stage.artifact(out), &cfg.stamp(), stage)?;
                if !art.result.is_optimal() {
                    return Err(Error::SynthesisFailed { status: status_name(art.result.status) });
                }
            }
            if stage == Stage::Evaluate {
                let report: EvaluationReport = read_upstream(&stage.artifact(out), &cfg.stamp(), stage)?;
                if let Some(gate) = cfg.evaluation.success_gate {
                    if report.success_rate < gate {
                        return Err(Error::GateFailed { success_rate: report.success_rate, gate });
                    }
                }
            }
            StageOutcome { stage, cached: true, summary: vec![format!("cached: {}", stage.artifact(out).display())] }
        } else {
            upstream_rerun = true;
            run_stage(stage, cfg, out)?
        };
        on_stage(&outcome);
        done.push(outcome);
    }
    Ok(done)
}
