//! Closed-loop assessment on the true plant.
//!
//! Every initial state is simulated twice: once under `u = clip(K_u·ψ_u(x))`
//! and once uncontrolled (`u ≡ 0`), so phase portraits can be paired.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::BilinearKoopmanModel;
use crate::error::{Error, Result};
use crate::factorization::{assemble_ktilde, FactorizationPair};
use crate::gain::FeedbackGain;
use crate::lmi::{LyapunovCandidate, SynthesisResult};
use crate::linalg::{Matrix, Vector};
use crate::observables::ObservableMap;
use crate::plants::{rollout, ControlAffine, Trajectory};

/// How evaluation initial states are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConditionSpec {
    Explicit { states: Vec<Vec<f64>> },
    /// `count` states drawn uniformly from the box `bounds` (seeded).
    Uniform { count: usize, bounds: Vec<(f64, f64)> },
    /// Cartesian grid with endpoints included.
    Grid { counts: Vec<usize>, bounds: Vec<(f64, f64)> },
}

impl InitialConditionSpec {
    pub fn resolve(&self, state_dim: usize, seed: u64) -> Result<Vec<Vector>> {
        let check = |bounds: &[(f64, f64)]| -> Result<()> {
            if bounds.len() != state_dim {
                return Err(Error::dim(format!("{} bounds given for a {state_dim}-dimensional state", bounds.len())));
            }
            if bounds.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi) {
                return Err(Error::param("initial-condition bounds must be finite with lo <= hi"));
            }
            Ok(())
        };
        match self {
            Self::Explicit { states } => states
                .iter()
                .map(|s| {
                    if s.len() != state_dim {
                        return Err(Error::dim(format!("initial state {s:?} is not {state_dim}-dimensional")));
                    }
                    Ok(Vector::from_column_slice(s))
                })
                .collect(),
            Self::Uniform { count, bounds } => {
                check(bounds)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..*count)
                    .map(|_| Vector::from_iterator(state_dim, bounds.iter().map(|&(lo, hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo })))
                    .collect())
            }
            Self::Grid { counts, bounds } => {
                check(bounds)?;
                if counts.len() != state_dim || counts.contains(&0) {
                    return Err(Error::param("grid counts must be positive, one per state dimension"));
                }
                let axes: Vec<Vec<f64>> = counts
                    .iter()
                    .zip(bounds)
                    .map(|(&n, &(lo, hi))| (0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect())
                    .collect();
                let total: usize = counts.iter().product();
                Ok((0..total)
                    .map(|mut flat| {
                        let mut x = Vector::zeros(state_dim);
                        for d in (0..state_dim).rev() {
                            x[d] = axes[d][flat % counts[d]];
                            flat /= counts[d];
                        }
                        x
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub horizon_s: f64,
    pub dt: f64,
    /// Convergence threshold on `‖x(horizon)‖_∞`.
    pub settle_tol: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self { horizon_s: 20.0, dt: 0.01, settle_tol: 0.05 }
    }
}

impl SimulationSettings {
    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.horizon_s >= 0.0) || !(self.settle_tol >= 0.0) {
            return Err(Error::param("evaluation needs dt > 0, horizon >= 0 and settle_tol >= 0"));
        }
        Ok(())
    }
}

/// Lyapunov data used to annotate true-plant rollouts.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovSpec<'a> {
    pub candidate: &'a LyapunovCandidate,
    pub map_x: &'a ObservableMap,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub id: usize,
    pub initial_state: Vec<f64>,
    pub final_state: Vec<f64>,
    pub converged: bool,
    pub failed: bool,
    pub max_abs_u: f64,
    /// First time after which `‖x‖_∞ ≤ settle_tol` for the rest of the horizon.
    pub settling_time_s: Option<f64>,
    /// Fraction of steps with `V_{k+1} ≤ V_k`.
    pub lyapunov_decrease_fraction: Option<f64>,
    /// Fraction of steps with `V_{k+1} ≤ λ*·V_k`.
    pub lyapunov_rate_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// RMS over initial states of `‖A_dec·K̃ᵏ·ψ(x₀) − x(k)‖₂`, for `k = 1..=steps`.
    pub per_step_rmse: Vec<f64>,
    /// Mean squared one-step error `‖A_dec·K̃·ψ(x_k) − x_{k+1}‖²` along the true rollouts.
    pub one_step_mse: f64,
    /// Mean squared error of the open-loop lifted prediction over all `k`.
    pub n_step_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<TrajectoryReport>,
    pub uncontrolled: Vec<TrajectoryReport>,
    /// Extra initial states reported but not counted in `success_rate`.
    pub stress: Vec<TrajectoryReport>,
    pub success_rate: f64,
    pub median_settling_time_s: Option<f64>,
    /// Median of `‖x(horizon)‖_∞` over the controlled rollouts.
    pub median_final_error: f64,
    pub uncontrolled_diverged_fraction: f64,
    pub lambda: Option<f64>,
    pub settings: SimulationSettings,
    pub state_labels: Vec<String>,
    /// Per-dimension range covered by the evaluation initial states.
    pub evaluation_bounds: Vec<(f64, f64)>,
    /// Per-dimension range of the training grid, when known.
    pub training_bounds: Option<Vec<(f64, f64)>>,
    pub fidelity: Option<FidelityMetrics>,
    #[serde(skip)]
    pub controlled_trajectories: Vec<Trajectory>,
    #[serde(skip)]
    pub uncontrolled_trajectories: Vec<Trajectory>,
}

fn settling_time(tr: &Trajectory, settings: &SimulationSettings) -> Option<f64> {
    if tr.failed() {
        return None;
    }
    let mut first_inside = None;
    for (k, x) in tr.states.iter().enumerate().rev() {
        if x.amax() <= settings.settle_tol {
            first_inside = Some(k);
        } else {
            break;
        }
    }
    first_inside.map(|k| k as f64 * settings.dt)
}

/// `V_k = ψ_kᵀ·P·ψ_k` along a sequence of lifted states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub values: Vec<f64>,
    /// Fraction of steps with `V_{k+1} ≤ λ*·V_k + slack·‖ψ_k‖²`.
    pub rate_fraction: f64,
    /// Fraction of steps with `V_{k+1} ≤ V_k + slack·‖ψ_k‖²`.
    pub decrease_fraction: f64,
    /// `max_k (V_{k+1} − λ*·V_k) / max(‖ψ_k‖², 1)`.
    #[serde(with = "crate::linalg::extended_f64")]
    pub max_rate_violation: f64,
}

pub fn lyapunov_trace_with(candidate: &LyapunovCandidate, lambda: f64, lifted: &[Vector], slack: f64) -> LyapunovTrace {
    let values: Vec<f64> = lifted.iter().map(|p| candidate.value(p)).collect();
    let steps = values.len().saturating_sub(1);
    let (mut rate, mut dec, mut worst) = (0usize, 0usize, f64::NEG_INFINITY);
    for k in 0..steps {
        let scale = lifted[k].norm_squared();
        let excess = values[k + 1] - lambda * values[k];
        worst = worst.max(excess / scale.max(1.0));
        if excess <= slack * scale {
            rate += 1;
        }
        if values[k + 1] - values[k] <= slack * scale {
            dec += 1;
        }
    }
    let frac = |n: usize| if steps == 0 { 1.0 } else { n as f64 / steps as f64 };
    LyapunovTrace { values, rate_fraction: frac(rate), decrease_fraction: frac(dec), max_rate_violation: worst }
}

/// Lyapunov trace of a synthesis result along `lifted` (lifted states `ψ_k`).
pub fn lyapunov_trace(result: &SynthesisResult, lifted: &[Vector], slack: f64) -> Result<LyapunovTrace> {
    match (&result.candidate, result.lambda) {
        (Some(c), Some(l)) if result.is_optimal() => Ok(lyapunov_trace_with(c, l, lifted, slack)),
        _ => Err(Error::NotOptimal),
    }
}

pub fn lift_trajectory(map_x: &ObservableMap, tr: &Trajectory) -> Vec<Vector> {
    tr.states.iter().map(|x| map_x.evaluate(x)).collect()
}

/// `ψ_0, K̃·ψ_0, …, K̃^steps·ψ_0`
pub fn lifted_rollout(k_tilde: &Matrix, psi0: &Vector, steps: usize) -> Vec<Vector> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(psi0.clone());
    for k in 0..steps {
        let next = k_tilde * &out[k];
        out.push(next);
    }
    out
}

fn summarize(id: usize, x0: &Vector, tr: &Trajectory, settings: &SimulationSettings, lyap: Option<&LyapunovSpec>) -> TrajectoryReport {
    let final_state = tr.final_state();
    let converged = !tr.failed() && final_state.amax() <= settings.settle_tol;
    let (dec, rate) = match lyap {
        Some(l) if !tr.failed() => {
            // An absolute floor keeps round-off at the equilibrium from counting as increase.
            let t = lyapunov_trace_with(l.candidate, l.lambda, &lift_trajectory(l.map_x, tr), 1e-12);
            (Some(t.decrease_fraction), Some(t.rate_fraction))
        }
        _ => (None, None),
    };
    TrajectoryReport {
        id,
        initial_state: x0.iter().copied().collect(),
        final_state: final_state.iter().copied().collect(),
        converged,
        failed: tr.failed(),
        max_abs_u: tr.inputs.iter().map(|u| u.amax()).fold(0.0, f64::max),
        settling_time_s: if converged { settling_time(tr, settings) } else { None },
        lyapunov_decrease_fraction: dec,
        lyapunov_rate_fraction: rate,
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn bounds_of(states: &[Vector], dim: usize) -> Vec<(f64, f64)> {
    (0..dim)
        .map(|d| {
            states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[d]), hi.max(x[d])))
        })
        .collect()
}

/// Simulates `u = clip(K_u·ψ_u(x))` and the uncontrolled twin from every initial state.
pub fn evaluate_closed_loop<P>(
    plant: &P,
    map_u: &ObservableMap,
    k_u: &FeedbackGain,
    initial_states: &[Vector],
    settings: &SimulationSettings,
    lyapunov: Option<LyapunovSpec>,
) -> Result<EvaluationReport>
where
    P: ControlAffine + Sync + ?Sized,
{
    settings.validate()?;
    if k_u.input_dim() != plant.input_dim() || k_u.feature_dim() != map_u.dim() {
        return Err(Error::dim(format!(
            "K_u is {}x{}, expected {}x{}",
            k_u.input_dim(),
            k_u.feature_dim(),
            plant.input_dim(),
            map_u.dim()
        )));
    }
    if initial_states.iter().any(|x| x.len() != plant.state_dim()) {
        return Err(Error::dim("initial state dimension differs from the plant"));
    }
    let steps = settings.steps();
    let du = plant.input_dim();
    let runs: Vec<(Trajectory, Trajectory)> = initial_states
        .par_iter()
        .map(|x0| {
            let controlled = rollout(plant, x0, |_, x| k_u.apply(&map_u.evaluate(x)), steps, settings.dt);
            let free = rollout(plant, x0, |_, _| Vector::zeros(du), steps, settings.dt);
            (controlled, free)
        })
        .collect();
    let records: Vec<TrajectoryReport> =
        runs.iter().enumerate().map(|(i, (c, _))| summarize(i, &initial_states[i], c, settings, lyapunov.as_ref())).collect();
    let uncontrolled: Vec<TrajectoryReport> =
        runs.iter().enumerate().map(|(i, (_, f))| summarize(i, &initial_states[i], f, settings, None)).collect();
    let n = records.len();
    let success_rate = if n == 0 { 0.0 } else { records.iter().filter(|r| r.converged).count() as f64 / n as f64 };
    let uncontrolled_diverged_fraction =
        if n == 0 { 0.0 } else { uncontrolled.iter().filter(|r| !r.converged).count() as f64 / n as f64 };
    let (controlled_trajectories, uncontrolled_trajectories) = runs.into_iter().unzip();
    Ok(EvaluationReport {
        success_rate,
        median_settling_time_s: median(records.iter().filter_map(|r| r.settling_time_s).collect()),
        median_final_error: median(records.iter().map(|r| r.final_state.iter().fold(0.0_f64, |a, v| a.max(v.abs()))).collect())
            .unwrap_or(0.0),
        uncontrolled_diverged_fraction,
        lambda: lyapunov.map(|l| l.lambda),
        settings: *settings,
        state_labels: map_u.labels().iter().take(plant.state_dim()).map(|s| s.to_string()).collect(),
        evaluation_bounds: bounds_of(initial_states, plant.state_dim()),
        training_bounds: None,
        fidelity: None,
        records,
        uncontrolled,
        stress: Vec::new(),
        controlled_trajectories,
        uncontrolled_trajectories,
    })
}

/// Compares decoded lifted closed-loop predictions `A_dec·K̃ᵏ·ψ(x₀)` with
/// true closed-loop rollouts. Saturation is not modelled by `K̃`, so the
/// comparison is only meaningful while the inputs stay inside their bounds.
pub fn lifted_vs_true<P>(
    model: &BilinearKoopmanModel,
    pair: &FactorizationPair,
    map_u: &ObservableMap,
    k_u: &FeedbackGain,
    plant: &P,
    initial_states: &[Vector],
    steps: usize,
    dt: f64,
) -> Result<FidelityMetrics>
where
    P: ControlAffine + Sync + ?Sized,
{
    let cl = assemble_ktilde(model, k_u, &pair.h)?;
    let dx = model.map_x.state_dim;
    let errs: Vec<(Vec<f64>, f64, usize)> = initial_states
        .par_iter()
        .map(|x0| {
            let tr = rollout(plant, x0, |_, x| k_u.apply(&map_u.evaluate(x)), steps, dt);
            let lifted = lifted_rollout(&cl.k_tilde, &model.map_x.evaluate(x0), tr.len());
            let per: Vec<f64> = (1..=steps)
                .map(|k| match (tr.states.get(k), lifted.get(k)) {
                    (Some(x), Some(p)) => (p.rows(0, dx) - x).norm_squared(),
                    _ => f64::NAN,
                })
                .collect();
            let mut one = 0.0;
            for k in 0..tr.len() {
                let pred = &cl.k_tilde * model.map_x.evaluate(&tr.states[k]);
                one += (pred.rows(0, dx) - &tr.states[k + 1]).norm_squared();
            }
            (per, one, tr.len())
        })
        .collect();
    let m = errs.len().max(1) as f64;
    let per_step_rmse: Vec<f64> = (0..steps).map(|k| (errs.iter().map(|e| e.0[k]).sum::<f64>() / m).sqrt()).collect();
    let one_n: usize = errs.iter().map(|e| e.2).sum();
    let one_step_mse = errs.iter().map(|e| e.1).sum::<f64>() / (one_n.max(1) * dx) as f64;
    let n_step_mse = per_step_rmse.iter().map(|r| r * r).sum::<f64>() / (steps.max(1) * dx) as f64;
    Ok(FidelityMetrics { per_step_rmse, one_step_mse, n_step_mse })
}

pub const PHASE_CONTROLLED: &str = "phase_controlled.csv";
pub const PHASE_UNCONTROLLED: &str = "phase_uncontrolled.csv";
pub const RESPONSE_CONTROLLED: &str = "response_controlled.csv";
pub const RESPONSE_UNCONTROLLED: &str = "response_uncontrolled.csv";

fn write_csv_file(path: &Path, comment: Option<&str>, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    if let Some(c) = comment {
        use std::io::Write;
        writeln!(f, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes phase-portrait (`traj_id, k`, first two state coordinates) and
/// state-response (`traj_id, t`, all states) CSVs for the controlled and
/// uncontrolled rollouts. Returns the written paths.
pub fn export_plot_data(report: &EvaluationReport, dir: &Path, comment: Option<&str>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let labels = &report.state_labels;
    let phase_labels: Vec<String> = labels.iter().take(2).cloned().collect();
    let dt = report.settings.dt;
    let mut written = Vec::new();
    for (trajs, phase_name, resp_name) in [
        (&report.controlled_trajectories, PHASE_CONTROLLED, RESPONSE_CONTROLLED),
        (&report.uncontrolled_trajectories, PHASE_UNCONTROLLED, RESPONSE_UNCONTROLLED),
    ] {
        let mut header = vec!["traj_id".to_string(), "k".to_string()];
        header.extend(phase_labels.iter().cloned());
        let path = dir.join(phase_name);
        write_csv_file(
            &path,
            comment,
            &header,
            trajs.iter().enumerate().flat_map(|(id, tr)| {
                tr.states.iter().enumerate().map(move |(k, x)| {
                    let mut row = vec![id.to_string(), k.to_string()];
                    row.extend(x.iter().take(2).map(|v| v.to_string()));
                    row
                })
            }),
        )?;
        written.push(path);

        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend(labels.iter().cloned());
        let path = dir.join(resp_name);
        write_csv_file(
            &path,
            comment,
            &header,
            trajs.iter().enumerate().flat_map(|(id, tr)| {
                tr.states.iter().enumerate().map(move |(k, x)| {
                    let mut row = vec![id.to_string(), (k as f64 * dt).to_string()];
                    row.extend(x.iter().map(|v| v.to_string()));
                    row
                })
            }),
        )?;
        written.push(path);
    }
    Ok(written)
}
