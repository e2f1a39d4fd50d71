//! Motor babbling: random feedback gains paired with gridded initial states,
//! rolled out through the plant to build identification data.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::FeedbackGain;
use crate::linalg::{Matrix, Vector};
use crate::observables::ObservableMap;
use crate::plants::{rollout, ControlAffine, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BabblingConfig {
    pub num_gains: usize,
    pub num_initial_conditions: usize,
    /// Explicit per-dimension grid counts. When absent, near-equal integer
    /// factors of `num_initial_conditions` are used.
    #[serde(default)]
    pub grid_counts: Option<Vec<usize>>,
    /// Gain entries are drawn uniformly from `[-gain_scale, gain_scale]`.
    pub gain_scale: f64,
    /// Per-dimension `[lo, hi]` bounds of the initial-condition grid.
    pub state_grid: Vec<(f64, f64)>,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
}

impl BabblingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_gains == 0 || self.num_initial_conditions == 0 {
            return Err(Error::param("babbling needs at least one gain and one initial condition"));
        }
        if !(self.gain_scale >= 0.0) || !self.gain_scale.is_finite() {
            return Err(Error::param(format!("gain_scale must be finite and non-negative, got {}", self.gain_scale)));
        }
        if self.state_grid.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi) {
            return Err(Error::param("state grid bounds must be finite with lo <= hi"));
        }
        if self.steps == 0 || !(self.dt > 0.0) {
            return Err(Error::param("babbling needs steps >= 1 and dt > 0"));
        }
        Ok(())
    }

    pub fn trajectory_count(&self) -> usize {
        self.num_gains * self.num_initial_conditions
    }

    /// Grid counts actually used for each state dimension.
    pub fn resolved_grid_counts(&self) -> Result<Vec<usize>> {
        let dims = self.state_grid.len();
        match &self.grid_counts {
            Some(c) => {
                if c.len() != dims {
                    return Err(Error::param(format!("grid_counts has {} entries for a {dims}-dimensional grid", c.len())));
                }
                if c.iter().product::<usize>() != self.num_initial_conditions {
                    return Err(Error::param(format!(
                        "grid counts {c:?} do not multiply to {} initial conditions",
                        self.num_initial_conditions
                    )));
                }
                Ok(c.clone())
            }
            None => balanced_factors(self.num_initial_conditions, dims),
        }
    }
}

/// Splits `n` into `parts` integer factors with the smallest spread, largest
/// factor first.
pub fn balanced_factors(n: usize, parts: usize) -> Result<Vec<usize>> {
    if n == 0 || parts == 0 {
        return Err(Error::param(format!("cannot factor {n} initial conditions over {parts} dimensions")));
    }
    fn search(n: usize, parts: usize, max: usize, cur: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
        if parts == 1 {
            if n <= max {
                cur.push(n);
                let spread = cur[0] - cur[cur.len() - 1];
                if best.as_ref().is_none_or(|b| spread < b[0] - b[b.len() - 1]) {
                    *best = Some(cur.clone());
                }
                cur.pop();
            }
            return;
        }
        for d in (1..=max.min(n)).rev() {
            if n % d == 0 {
                cur.push(d);
                search(n / d, parts - 1, d, cur, best);
                cur.pop();
            }
        }
    }
    let mut best = None;
    search(n, parts, n, &mut Vec::new(), &mut best);
    Ok(best.expect("n = n·1·…·1 is always a factorization"))
}

/// Draws `num_gains` gains of shape `input_dim × feature_dim`.
pub fn sample_random_gains(cfg: &BabblingConfig, input_dim: usize, feature_dim: usize) -> Result<Vec<FeedbackGain>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.gain_scale;
    Ok((0..cfg.num_gains)
        .map(|_| {
            let m = Matrix::from_fn(input_dim, feature_dim, |_, _| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 });
            FeedbackGain::new(m).expect("finite by construction")
        })
        .collect())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Cartesian-product grid including both endpoints of every dimension. A
/// dimension with a single point uses its lower bound. The last dimension
/// varies fastest.
pub fn grid_initial_conditions(cfg: &BabblingConfig) -> Result<Vec<Vector>> {
    cfg.validate()?;
    let counts = cfg.resolved_grid_counts()?;
    let axes: Vec<Vec<f64>> = cfg.state_grid.iter().zip(&counts).map(|(&(lo, hi), &n)| linspace(lo, hi, n)).collect();
    let mut points = vec![Vec::<f64>::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(points.into_iter().map(Vector::from_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub gain_index: usize,
    pub ic_index: usize,
    pub trajectory: Trajectory,
}

/// A single `(x_k, u_k, x_{k+1})` triple with its provenance.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub gain_index: usize,
    pub ic_index: usize,
    pub step: usize,
    pub x: &'a Vector,
    pub u: &'a Vector,
    pub x_next: &'a Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub state_dim: usize,
    pub input_dim: usize,
    pub dt: f64,
    /// Trajectories in `(gain, initial condition)` order, gain-major.
    pub trajectories: Vec<TrajectoryRecord>,
    /// Trajectories dropped because integration diverged.
    pub dropped: usize,
}

impl SnapshotDataset {
    pub fn snapshot_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.trajectory.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot_count() == 0
    }

    pub fn snapshots(&self) -> impl Iterator<Item = Snapshot<'_>> {
        self.trajectories.iter().flat_map(|rec| {
            rec.trajectory.snapshots().enumerate().map(move |(step, (x, u, x_next))| Snapshot {
                gain_index: rec.gain_index,
                ic_index: rec.ic_index,
                step,
                x,
                u,
                x_next,
            })
        })
    }

    /// A dataset holding only the trajectories selected by `keep`.
    pub fn subset(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        Self {
            trajectories: self
                .trajectories
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, t)| t.clone())
                .collect(),
            dropped: 0,
            ..self.clone()
        }
    }
}

/// Rolls out every `(gain i, initial condition j)` pair with
/// `u_k = clip(K_u^{(i)}·ψ_u(x_k))`. Diverged trajectories are dropped whole.
pub fn generate_dataset<P>(plant: &P, map_u: &ObservableMap, cfg: &BabblingConfig) -> Result<SnapshotDataset>
where
    P: ControlAffine + Sync + ?Sized,
{
    cfg.validate()?;
    if map_u.state_dim != plant.state_dim() || cfg.state_grid.len() != plant.state_dim() {
        return Err(Error::dim(format!(
            "plant state dimension {} does not match map ({}) or grid ({})",
            plant.state_dim(),
            map_u.state_dim,
            cfg.state_grid.len()
        )));
    }
    let gains = sample_random_gains(cfg, plant.input_dim(), map_u.dim())?;
    let inits = grid_initial_conditions(cfg)?;
    let pairs: Vec<(usize, usize)> =
        (0..gains.len()).flat_map(|i| (0..inits.len()).map(move |j| (i, j))).collect();
    let results: Vec<TrajectoryRecord> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let gain = &gains[i];
            let trajectory = rollout(plant, &inits[j], |_, x| gain.apply(&map_u.evaluate(x)), cfg.steps, cfg.dt);
            TrajectoryRecord { gain_index: i, ic_index: j, trajectory }
        })
        .collect();
    let total = results.len();
    let trajectories: Vec<_> = results.into_iter().filter(|r| !r.trajectory.failed()).collect();
    let dropped = total - trajectories.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} of {total} babbling trajectories after integration failure");
    }
    Ok(SnapshotDataset { state_dim: plant.state_dim(), input_dim: plant.input_dim(), dt: cfg.dt, trajectories, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub gain_index: usize,
    pub ic_index: usize,
    pub file: String,
}

/// Dataset manifest; the trajectories themselves live in one CSV per shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: BabblingConfig,
    pub grid_counts: Vec<usize>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub trajectory_count: usize,
    pub snapshot_count: usize,
    pub dropped: usize,
    pub gains: Vec<FeedbackGain>,
    pub shards: Vec<ShardEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the CSV shards into `dir` and returns the manifest describing them.
/// `comment`, when given, is written as a leading `#` line of every shard.
pub fn write_shards(
    data: &SnapshotDataset,
    cfg: &BabblingConfig,
    gains: Vec<FeedbackGain>,
    dir: &Path,
    comment: Option<&str>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut shards = Vec::with_capacity(data.trajectories.len());
    for rec in &data.trajectories {
        let file = format!("traj_{:05}_{:05}.csv", rec.gain_index, rec.ic_index);
        let f = fs::File::create(dir.join(&file))?;
        let w = std::io::BufWriter::new(f);
        match comment {
            Some(c) => rec.trajectory.write_csv_with_comment(w, c)?,
            None => rec.trajectory.write_csv(w)?,
        }
        shards.push(ShardEntry { gain_index: rec.gain_index, ic_index: rec.ic_index, file });
    }
    Ok(DatasetManifest {
        config: cfg.clone(),
        grid_counts: cfg.resolved_grid_counts()?,
        state_dim: data.state_dim,
        input_dim: data.input_dim,
        trajectory_count: data.trajectories.len(),
        snapshot_count: data.snapshot_count(),
        dropped: data.dropped,
        gains,
        shards,
    })
}

/// Loads the shards listed in `manifest` from `dir`.
pub fn read_shards(manifest: &DatasetManifest, dir: &Path) -> Result<SnapshotDataset> {
    let trajectories = manifest
        .shards
        .par_iter()
        .map(|s| {
            let f = fs::File::open(dir.join(&s.file))?;
            let trajectory = Trajectory::read_csv(std::io::BufReader::new(f))?;
            if trajectory.states.iter().any(|x| x.len() != manifest.state_dim) {
                return Err(Error::dim(format!("shard {} has the wrong state width", s.file)));
            }
            Ok(TrajectoryRecord { gain_index: s.gain_index, ic_index: s.ic_index, trajectory })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnapshotDataset {
        state_dim: manifest.state_dim,
        input_dim: manifest.input_dim,
        dt: manifest.config.dt,
        trajectories,
        dropped: manifest.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::single_pendulum_map;
    use crate::plants::{rk4_step, single_pendulum};
    use std::f64::consts::PI;

    fn cfg(num_gains: usize, num_ics: usize) -> BabblingConfig {
        BabblingConfig {
            num_gains,
            num_initial_conditions: num_ics,
            grid_counts: None,
            gain_scale: 1.0,
            state_grid: vec![(-PI, PI), (-6.0, 6.0)],
            steps: 100,
            dt: 0.01,
            seed: 42,
        }
    }

    #[test]
    fn gains_are_reproducible_and_shaped() {
        let c = cfg(50, 4);
        let a = sample_random_gains(&c, 1, 9).unwrap();
        let b = sample_random_gains(&c, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|g| g.matrix().shape() == (1, 9)));
        assert!(a.iter().flat_map(|g| g.matrix().iter()).all(|v| v.abs() <= 1.0));
        let zero = BabblingConfig { gain_scale: 0.0, ..c };
        assert!(sample_random_gains(&zero, 1, 9).unwrap().iter().all(|g| g.matrix().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn grid_examples() {
        let mut c = cfg(1, 9);
        c.state_grid = vec![(-1.0, 1.0), (-1.0, 1.0)];
        let g = grid_initial_conditions(&c).unwrap();
        assert_eq!(g.len(), 9);
        for corner in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
            assert!(g.iter().any(|p| p.as_slice() == corner));
        }
        c.num_initial_conditions = 1;
        assert_eq!(grid_initial_conditions(&c).unwrap(), vec![Vector::from_vec(vec![-1.0, -1.0])]);
    }

    #[test]
    fn thousand_trajectory_grid() {
        let c = cfg(1, 4000);
        let g = grid_initial_conditions(&c).unwrap();
        assert_eq!(g.len(), 4000);
        assert_eq!(c.resolved_grid_counts().unwrap(), vec![80, 50]);
        assert!(g.iter().all(|p| p[0].abs() <= PI && p[1].abs() <= 6.0));
        assert_eq!(balanced_factors(9000, 4).unwrap(), vec![10, 10, 10, 9]);
    }

    #[test]
    fn explicit_counts_must_multiply_out() {
        let mut c = cfg(1, 10);
        c.grid_counts = Some(vec![3, 3]);
        assert!(grid_initial_conditions(&c).is_err());
        c.grid_counts = Some(vec![5, 2]);
        assert_eq!(grid_initial_conditions(&c).unwrap().len(), 10);
    }

    #[test]
    fn zero_gains_at_origin_stay_at_origin() {
        let plant = single_pendulum(1.0, 1.0, 0.3, 9.81).unwrap();
        let mut c = cfg(3, 1);
        c.gain_scale = 0.0;
        c.state_grid = vec![(0.0, 0.0), (0.0, 0.0)];
        let d = generate_dataset(&plant, &single_pendulum_map(), &c).unwrap();
        assert_eq!(d.snapshot_count(), 300);
        assert!(d.snapshots().all(|s| s.x.iter().all(|v| *v == 0.0) && s.u[0] == 0.0));
    }

    #[test]
    fn dataset_invariants() {
        let plant = single_pendulum(1.0, 1.0, 0.3, 9.81).unwrap();
        let c = cfg(5, 10);
        let map = single_pendulum_map();
        let d = generate_dataset(&plant, &map, &c).unwrap();
        assert_eq!(d.dropped, 0);
        assert_eq!(d.snapshot_count(), 5000);
        let order: Vec<(usize, usize)> = d.trajectories.iter().map(|t| (t.gain_index, t.ic_index)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
        for s in d.snapshots() {
            assert!(s.u[0].abs() <= 5.0);
            assert_eq!(&rk4_step(&plant, s.x, s.u, c.dt).unwrap(), s.x_next);
        }
        assert_eq!(generate_dataset(&plant, &map, &c).unwrap(), d);
    }

    #[test]
    fn shards_round_trip() {
        let plant = single_pendulum(1.0, 1.0, 0.3, 9.81).unwrap();
        let mut c = cfg(2, 4);
        c.steps = 10;
        let map = single_pendulum_map();
        let d = generate_dataset(&plant, &map, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gains = sample_random_gains(&c, 1, 9).unwrap();
        let manifest = write_shards(&d, &c, gains, dir.path(), Some("config_hash=test")).unwrap();
        assert_eq!(manifest.snapshot_count, 80);
        let back = read_shards(&manifest, dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
