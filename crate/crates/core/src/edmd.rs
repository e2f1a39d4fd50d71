//! Least-squares identification of bilinear Koopman models
//! `ψ⁺ = K_xx·ψ + K_xu·((S·ψ) ⊗ u)`.
//!
//! Regressions are solved as `min_K ‖Ψ_out − K·Ψ_in‖_F² + ρ‖K‖_F²` from a
//! streaming Householder QR of `Ψ_inᵀ`; normal equations are never formed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::babbling::SnapshotDataset;
use crate::error::{Error, Result};
use crate::factorization::SelectionMatrix;
use crate::linalg::{kron_vec, matrix_serde, Matrix, Vector};
use crate::observables::ObservableMap;

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_RCOND: f64 = 1e-12;

const CHUNK_ROWS: usize = 1024;

/// Streaming QR accumulator for `min_K ‖Y − K·X‖` over columns `(x, y)`.
///
/// Only the triangular factor `R₁₁` of the regressors and the projected
/// targets `R₁₂ = Q₁ᵀ·Yᵀ` are kept, so memory does not grow with the
/// number of samples.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    d_in: usize,
    d_out: usize,
    /// `d_in × (d_in + d_out)`, row-major.
    top: Vec<f64>,
    buf: Vec<f64>,
    buf_rows: usize,
    count: usize,
}

impl LeastSquares {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            top: vec![0.0; d_in * (d_in + d_out)],
            buf: Vec::with_capacity(CHUNK_ROWS * (d_in + d_out)),
            buf_rows: 0,
            count: 0,
        }
    }

    pub fn samples(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, input: &[f64], output: &[f64]) {
        debug_assert_eq!(input.len(), self.d_in);
        debug_assert_eq!(output.len(), self.d_out);
        self.buf.extend_from_slice(input);
        self.buf.extend_from_slice(output);
        self.buf_rows += 1;
        self.count += 1;
        if self.buf_rows == CHUNK_ROWS {
            self.flush();
        }
    }

    /// Folds the buffered rows into the triangular factor.
    fn flush(&mut self) {
        if self.buf_rows == 0 {
            return;
        }
        let w = self.d_in + self.d_out;
        let rows = self.buf_rows;
        let mut v = vec![0.0; rows];
        let mut s = vec![0.0; w];
        for j in 0..self.d_in {
            // Column j has nonzeros only on the diagonal of `top` and in the buffer.
            let diag = self.top[j * w + j];
            let mut tail2 = 0.0;
            for r in 0..rows {
                let b = self.buf[r * w + j];
                v[r] = b;
                tail2 += b * b;
            }
            if tail2 == 0.0 {
                continue;
            }
            let norm = (diag * diag + tail2).sqrt();
            let alpha = if diag < 0.0 { norm } else { -norm };
            let v0 = diag - alpha;
            let vnorm2 = v0 * v0 + tail2;
            let beta = 2.0 / vnorm2;
            for (c, sc) in s.iter_mut().enumerate().skip(j) {
                *sc = v0 * self.top[j * w + c];
            }
            for r in 0..rows {
                let vr = v[r];
                let row = &self.buf[r * w..(r + 1) * w];
                for c in j..w {
                    s[c] += vr * row[c];
                }
            }
            for c in j..w {
                let sc = beta * s[c];
                self.top[j * w + c] -= sc * v0;
                s[c] = sc;
            }
            for r in 0..rows {
                let vr = v[r];
                let row = &mut self.buf[r * w..(r + 1) * w];
                for c in j..w {
                    row[c] -= s[c] * vr;
                }
            }
        }
        self.buf.clear();
        self.buf_rows = 0;
    }

    /// Absorbs another accumulator's data.
    pub fn merge(&mut self, mut other: LeastSquares) {
        other.flush();
        let w = self.d_in + self.d_out;
        for r in 0..self.d_in {
            let row = &other.top[r * w..(r + 1) * w];
            self.buf.extend_from_slice(row);
            self.buf_rows += 1;
            if self.buf_rows == CHUNK_ROWS {
                self.flush();
            }
        }
        self.count += other.count;
    }

    /// Regressor triangular factor `R₁₁` (same column rank as `Ψ_inᵀ`).
    pub fn r_factor(&mut self) -> Matrix {
        self.flush();
        let w = self.d_in + self.d_out;
        Matrix::from_fn(self.d_in, self.d_in, |i, j| self.top[i * w + j])
    }

    pub fn solve(mut self, ridge: f64) -> Result<LsSolution> {
        if !(ridge >= 0.0) {
            return Err(Error::param(format!("ridge must be non-negative, got {ridge}")));
        }
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.count < self.d_in {
            log::warn!("least squares with {} samples for {} regressors", self.count, self.d_in);
        }
        self.flush();
        let w = self.d_in + self.d_out;
        let r11 = Matrix::from_fn(self.d_in, self.d_in, |i, j| self.top[i * w + j]);
        let r12 = Matrix::from_fn(self.d_in, self.d_out, |i, j| self.top[i * w + self.d_in + j]);
        let svd = r11.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
        let smax = svd.singular_values.max();
        let cutoff = smax * RANK_RCOND;
        let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
        let smin = svd.singular_values.min();
        // Filter factors σ/(σ² + ρ); plain pseudo-inverse below the cutoff when ρ = 0.
        let filt = Vector::from_iterator(
            self.d_in,
            svd.singular_values.iter().map(|&s| {
                if ridge > 0.0 {
                    s / (s * s + ridge)
                } else if s > cutoff {
                    1.0 / s
                } else {
                    0.0
                }
            }),
        );
        let proj = u.transpose() * r12;
        let scaled = Matrix::from_fn(self.d_in, self.d_out, |i, j| filt[i] * proj[(i, j)]);
        let coef_t = v_t.transpose() * scaled;
        let rank_deficient = rank < self.d_in;
        if rank_deficient && ridge == 0.0 {
            log::warn!("rank-deficient regression ({rank} of {}); returning minimum-norm solution", self.d_in);
        }
        Ok(LsSolution {
            coefficients: coef_t.transpose(),
            rank,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            rank_deficient,
            samples: self.count,
            r11,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LsSolution {
    /// `K` with shape `d_out × d_in`.
    pub coefficients: Matrix,
    pub rank: usize,
    pub condition: f64,
    pub rank_deficient: bool,
    pub samples: usize,
    /// Regressor triangular factor, for rank checks on column subsets.
    pub r11: Matrix,
}

impl LsSolution {
    /// Numerical rank of the regressor columns `cols`.
    pub fn column_rank(&self, cols: std::ops::Range<usize>) -> usize {
        let sub = self.r11.columns(cols.start, cols.len()).into_owned();
        if sub.ncols() == 0 {
            return 0;
        }
        let sv = sub.singular_values();
        let smax = self.r11.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(sv.max());
        sv.iter().filter(|s| **s > smax * RANK_RCOND).count()
    }
}

/// Dense regression problem `min_K ‖Ψ_out − K·Ψ_in‖² + ρ‖K‖²`.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    /// `d_in × N`
    pub inputs: Matrix,
    /// `d_out × N`
    pub outputs: Matrix,
    pub ridge: f64,
}

pub fn solve_least_squares(prob: &RegressionProblem) -> Result<LsSolution> {
    let n = prob.inputs.ncols();
    if prob.outputs.ncols() != n {
        return Err(Error::dim(format!("Ψ_in has {n} columns but Ψ_out has {}", prob.outputs.ncols())));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut ls = LeastSquares::new(prob.inputs.nrows(), prob.outputs.nrows());
    for j in 0..n {
        let x: Vec<f64> = prob.inputs.column(j).iter().copied().collect();
        let y: Vec<f64> = prob.outputs.column(j).iter().copied().collect();
        ls.push(&x, &y);
    }
    ls.solve(prob.ridge)
}

/// Regressor column `[ψ; (S·ψ) ⊗ u]`.
pub fn bilinear_regressor(psi: &Vector, selection: &SelectionMatrix, u: &Vector) -> Vector {
    let sel = selection.select(psi);
    let bil = kron_vec(&sel, u);
    let mut out = Vector::zeros(psi.len() + bil.len());
    out.rows_mut(0, psi.len()).copy_from(psi);
    out.rows_mut(psi.len(), bil.len()).copy_from(&bil);
    out
}

/// Builds `Ψ_in` (columns `[ψ(x_k); (S·ψ(x_k)) ⊗ u_k]`) and `Ψ_out` (columns `ψ(x_{k+1})`).
pub fn assemble_bilinear_regressors(
    data: &SnapshotDataset,
    map_x: &ObservableMap,
    selection: &SelectionMatrix,
    ridge: f64,
) -> Result<RegressionProblem> {
    check_dims(data, map_x, selection)?;
    let d_in = map_x.dim() + selection.rows() * data.input_dim;
    let snaps: Vec<_> = data.snapshots().collect();
    let cols: Vec<(Vector, Vector)> = snaps
        .par_iter()
        .map(|s| {
            let psi = map_x.evaluate(s.x);
            (bilinear_regressor(&psi, selection, s.u), map_x.evaluate(s.x_next))
        })
        .collect();
    let mut inputs = Matrix::zeros(d_in, cols.len());
    let mut outputs = Matrix::zeros(map_x.dim(), cols.len());
    for (j, (x, y)) in cols.iter().enumerate() {
        inputs.set_column(j, x);
        outputs.set_column(j, y);
    }
    Ok(RegressionProblem { inputs, outputs, ridge })
}

fn check_dims(data: &SnapshotDataset, map_x: &ObservableMap, selection: &SelectionMatrix) -> Result<()> {
    if selection.lifted_dim() != map_x.dim() {
        return Err(Error::dim(format!(
            "selection matrix has {} columns but the map has {} features",
            selection.lifted_dim(),
            map_x.dim()
        )));
    }
    if map_x.state_dim != data.state_dim {
        return Err(Error::dim(format!(
            "map expects {}-dimensional states, dataset holds {}",
            map_x.state_dim, data.state_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOptions {
    /// Ridge parameter `ρ`; `None` uses `1e-8 · N`.
    pub ridge: Option<f64>,
    /// Fraction of trajectories held out for validation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self { ridge: None, holdout_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub ridge: f64,
    pub train_snapshots: usize,
    pub holdout_snapshots: usize,
    pub train_trajectories: usize,
    pub holdout_trajectories: usize,
    /// Mean squared one-step error over all lifted coordinates.
    pub train_mse: f64,
    pub holdout_mse: f64,
    /// Same, restricted to the decoded state coordinates.
    pub train_state_mse: f64,
    pub holdout_state_mse: f64,
    pub rank: usize,
    #[serde(with = "crate::linalg::extended_f64")]
    pub condition: f64,
    pub rank_deficient: bool,
    /// Numerical rank of the bilinear `(S·ψ) ⊗ u` regressor block.
    pub input_block_rank: usize,
    /// True when the bilinear block is rank deficient, i.e. some `K_xu`
    /// columns are not identified by the data.
    pub input_block_unidentified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearKoopmanModel {
    pub map_x: ObservableMap,
    pub map_hash: String,
    pub input_dim: usize,
    pub selection: SelectionMatrix,
    #[serde(with = "matrix_serde")]
    pub k_xx: Matrix,
    #[serde(with = "matrix_serde")]
    pub k_xu: Matrix,
    pub diagnostics: Option<FitDiagnostics>,
}

impl BilinearKoopmanModel {
    pub fn new(map_x: ObservableMap, input_dim: usize, selection: SelectionMatrix, k_xx: Matrix, k_xu: Matrix) -> Result<Self> {
        let d = map_x.dim();
        if k_xx.shape() != (d, d) {
            return Err(Error::dim(format!("K_xx must be {d}x{d}, got {:?}", k_xx.shape())));
        }
        if k_xu.shape() != (d, selection.rows() * input_dim) {
            return Err(Error::dim(format!(
                "K_xu must be {d}x{}, got {:?}",
                selection.rows() * input_dim,
                k_xu.shape()
            )));
        }
        if selection.lifted_dim() != d {
            return Err(Error::dim("selection matrix width differs from the lifted dimension"));
        }
        Ok(Self { map_hash: map_x.descriptor_hash(), map_x, input_dim, selection, k_xx, k_xu, diagnostics: None })
    }

    pub fn lifted_dim(&self) -> usize {
        self.map_x.dim()
    }

    /// `[K_xx K_xu]`
    pub fn system_matrix(&self) -> Matrix {
        let d = self.lifted_dim();
        let mut k = Matrix::zeros(d, d + self.k_xu.ncols());
        k.columns_mut(0, d).copy_from(&self.k_xx);
        k.columns_mut(d, self.k_xu.ncols()).copy_from(&self.k_xu);
        k
    }

    /// One-step lifted prediction `K_xx·ψ + K_xu·((S·ψ) ⊗ u)`.
    pub fn predict(&self, psi: &Vector, u: &Vector) -> Vector {
        &self.k_xx * psi + &self.k_xu * kron_vec(&self.selection.select(psi), u)
    }

    pub fn check_map(&self) -> Result<()> {
        if self.map_x.descriptor_hash() != self.map_hash {
            return Err(Error::Precondition("model map descriptor does not match its recorded hash".into()));
        }
        Ok(())
    }
}

/// Splits trajectory indices into `(train, holdout)` with a seeded shuffle.
pub fn split_trajectories(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut holdout = ((n as f64) * holdout_fraction).round() as usize;
    if holdout_fraction > 0.0 && n >= 2 {
        holdout = holdout.max(1);
    }
    holdout = holdout.min(n.saturating_sub(1));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hold: Vec<usize> = idx[..holdout].to_vec();
    let mut train: Vec<usize> = idx[holdout..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

const TRAJ_CHUNK: usize = 32;

/// Accumulates the bilinear regression over `trajectories` in fixed-size
/// chunks merged in order, so results do not depend on the thread count.
fn accumulate(data: &SnapshotDataset, which: &[usize], map_x: &ObservableMap, selection: &SelectionMatrix) -> LeastSquares {
    let d_in = map_x.dim() + selection.rows() * data.input_dim;
    let d_out = map_x.dim();
    let parts: Vec<LeastSquares> = which
        .par_chunks(TRAJ_CHUNK)
        .map(|chunk| {
            let mut ls = LeastSquares::new(d_in, d_out);
            for &t in chunk {
                for (x, u, xn) in data.trajectories[t].trajectory.snapshots() {
                    let psi = map_x.evaluate(x);
                    let reg = bilinear_regressor(&psi, selection, u);
                    ls.push(reg.as_slice(), map_x.evaluate(xn).as_slice());
                }
            }
            ls.flush();
            ls
        })
        .collect();
    let mut total = LeastSquares::new(d_in, d_out);
    for p in parts {
        total.merge(p);
    }
    total
}

fn one_step_mse(model: &BilinearKoopmanModel, data: &SnapshotDataset, which: &[usize]) -> (f64, f64, usize) {
    let dx = model.map_x.state_dim;
    let sums: Vec<(f64, f64, usize)> = which
        .par_iter()
        .map(|&t| {
            let mut all = 0.0;
            let mut state = 0.0;
            let mut n = 0;
            for (x, u, xn) in data.trajectories[t].trajectory.snapshots() {
                let err = model.predict(&model.map_x.evaluate(x), u) - model.map_x.evaluate(xn);
                all += err.norm_squared();
                state += err.rows(0, dx).norm_squared();
                n += 1;
            }
            (all, state, n)
        })
        .collect();
    let (all, state, n) = sums.iter().fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    (all / (n * model.lifted_dim()) as f64, state / (n * dx) as f64, n)
}

/// Fits `[K_xx K_xu]` on the training trajectories and reports one-step
/// errors on both splits.
pub fn identify_model(
    data: &SnapshotDataset,
    map_x: &ObservableMap,
    selection: &SelectionMatrix,
    opts: &IdentifyOptions,
) -> Result<BilinearKoopmanModel> {
    check_dims(data, map_x, selection)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, hold) = split_trajectories(data.trajectories.len(), opts.holdout_fraction, opts.seed);
    let ls = accumulate(data, &train, map_x, selection);
    let n = ls.samples();
    let ridge = opts.ridge.unwrap_or(1e-8 * n as f64);
    let sol = ls.solve(ridge)?;
    let d = map_x.dim();
    let k_xx = sol.coefficients.columns(0, d).into_owned();
    let k_xu = sol.coefficients.columns(d, sol.coefficients.ncols() - d).into_owned();
    let mut model = BilinearKoopmanModel::new(map_x.clone(), data.input_dim, selection.clone(), k_xx, k_xu)?;
    let block = d..sol.coefficients.ncols();
    let input_block_rank = sol.column_rank(block.clone());
    let input_block_unidentified = input_block_rank < block.len();
    if input_block_unidentified {
        log::warn!("bilinear input block has rank {input_block_rank} of {}; K_xu is not fully identified", block.len());
    }
    let (train_mse, train_state_mse, train_n) = one_step_mse(&model, data, &train);
    let (holdout_mse, holdout_state_mse, hold_n) = one_step_mse(&model, data, &hold);
    model.diagnostics = Some(FitDiagnostics {
        ridge,
        train_snapshots: train_n,
        holdout_snapshots: hold_n,
        train_trajectories: train.len(),
        holdout_trajectories: hold.len(),
        train_mse,
        holdout_mse,
        train_state_mse,
        holdout_state_mse,
        rank: sol.rank,
        condition: sol.condition,
        rank_deficient: sol.rank_deficient,
        input_block_rank,
        input_block_unidentified,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::babbling::TrajectoryRecord;
    use crate::observables::Feature;
    use crate::plants::Trajectory;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn identity_map(n: usize) -> ObservableMap {
        ObservableMap::new("identity", n, (0..n).map(|i| Feature::state(i, format!("x{i}"))).collect()).unwrap()
    }

    #[test]
    fn identity_data_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 50);
        let sol = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: x, ridge: 0.0 }).unwrap();
        assert!((sol.coefficients - Matrix::identity(4, 4)).amax() < 1e-12);
        assert!(!sol.rank_deficient);
    }

    #[test]
    fn scalar_decay_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 1, 100);
        let sol = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: &x * 0.9, ridge: 0.0 }).unwrap();
        assert!((sol.coefficients[(0, 0)] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ridge_limit_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 40);
        let y = random(&mut rng, 2, 40);
        let norm = |r: f64| solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: y.clone(), ridge: r }).unwrap().coefficients.norm();
        assert!(norm(1e3) < norm(1.0));
        assert!(norm(1e12) < 1e-9);
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        // Second regressor duplicates the first: min-norm splits the weight evenly.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 1, 30);
        let mut x = Matrix::zeros(2, 30);
        x.set_row(0, &a.row(0));
        x.set_row(1, &a.row(0));
        let sol = solve_least_squares(&RegressionProblem { inputs: x, outputs: &a * 2.0, ridge: 0.0 }).unwrap();
        assert!(sol.rank_deficient);
        assert_eq!(sol.rank, 1);
        assert!((sol.coefficients[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((sol.coefficients[(0, 1)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_dense_qr_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 3000);
        let y = random(&mut rng, 3, 3000);
        let sol = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: y.clone(), ridge: 0.0 }).unwrap();
        let reference = x.transpose().svd(true, true).solve(&y.transpose(), 1e-14).unwrap().transpose();
        assert!((sol.coefficients - reference).amax() < 1e-10);
    }

    #[test]
    fn residual_is_orthogonal_to_regressors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 5, 500);
        let y = random(&mut rng, 4, 500);
        let sol = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: y.clone(), ridge: 0.0 }).unwrap();
        let resid = &y - &sol.coefficients * &x;
        let scale = y.norm() * x.norm();
        assert!((resid * x.transpose()).amax() <= 1e-6 * scale);
    }

    #[test]
    fn duplicate_columns_leave_minimizer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 3, 60);
        let y = random(&mut rng, 2, 60);
        let base = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: y.clone(), ridge: 0.0 }).unwrap();
        let dup = |m: &Matrix| {
            let mut out = Matrix::zeros(m.nrows(), 2 * m.ncols());
            out.columns_mut(0, m.ncols()).copy_from(m);
            out.columns_mut(m.ncols(), m.ncols()).copy_from(m);
            out
        };
        let twice = solve_least_squares(&RegressionProblem { inputs: dup(&x), outputs: dup(&y), ridge: 0.0 }).unwrap();
        assert!((base.coefficients - twice.coefficients).amax() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_problems_error() {
        let p = RegressionProblem { inputs: Matrix::zeros(2, 0), outputs: Matrix::zeros(2, 0), ridge: 0.0 };
        assert!(matches!(solve_least_squares(&p), Err(Error::EmptyDataset)));
        let p = RegressionProblem { inputs: Matrix::zeros(2, 3), outputs: Matrix::zeros(2, 4), ridge: 0.0 };
        assert!(matches!(solve_least_squares(&p), Err(Error::Dimension(_))));
    }

    fn dataset_from(traj: Vec<Trajectory>, input_dim: usize) -> SnapshotDataset {
        SnapshotDataset {
            state_dim: traj[0].states[0].len(),
            input_dim,
            dt: 1.0,
            trajectories: traj
                .into_iter()
                .enumerate()
                .map(|(j, trajectory)| TrajectoryRecord { gain_index: 0, ic_index: j, trajectory })
                .collect(),
            dropped: 0,
        }
    }

    #[test]
    fn regressor_shapes() {
        let sel = SelectionMatrix::new(2, vec![0, 1]).unwrap();
        let r = bilinear_regressor(&Vector::from_vec(vec![2.0, 3.0]), &sel, &Vector::from_vec(vec![5.0]));
        assert_eq!(r.as_slice(), &[2.0, 3.0, 10.0, 15.0]);
        let traj = Trajectory {
            states: vec![Vector::from_vec(vec![1.0, 2.0]); 3],
            inputs: vec![Vector::from_vec(vec![1.0]); 2],
            failed_at: None,
        };
        let prob = assemble_bilinear_regressors(&dataset_from(vec![traj], 1), &identity_map(2), &sel, 0.0).unwrap();
        assert_eq!(prob.inputs.shape(), (4, 2));
        assert_eq!(prob.outputs.shape(), (2, 2));
        let bad = SelectionMatrix::new(3, vec![0]).unwrap();
        assert!(assemble_bilinear_regressors(&dataset_from(vec![Trajectory { states: vec![Vector::zeros(2); 2], inputs: vec![Vector::zeros(1)], failed_at: None }], 1), &identity_map(2), &bad, 0.0).is_err());
    }

    #[test]
    fn lifted_linear_system_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trajs = (0..10)
            .map(|_| {
                let mut states = vec![Vector::from_vec(vec![rng.random_range(-1.0..1.0)])];
                for k in 0..20 {
                    let next = &states[k] * 0.9;
                    states.push(next);
                }
                Trajectory { states, inputs: vec![Vector::zeros(1); 20], failed_at: None }
            })
            .collect();
        let data = dataset_from(trajs, 1);
        let sel = SelectionMatrix::new(1, vec![0]).unwrap();
        let opts = IdentifyOptions { ridge: Some(0.0), holdout_fraction: 0.1, seed: 0 };
        let m = identify_model(&data, &identity_map(1), &sel, &opts).unwrap();
        assert!((m.k_xx[(0, 0)] - 0.9).abs() < 1e-12);
        assert!(m.k_xu.amax() < 1e-12);
        let diag = m.diagnostics.unwrap();
        assert!(diag.input_block_unidentified);
        assert_eq!(diag.holdout_trajectories, 1);
    }

    #[test]
    fn bilinear_model_is_reidentified() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let sel = SelectionMatrix::new(n, vec![0, 2]).unwrap();
        let map = identity_map(n);
        let truth = BilinearKoopmanModel::new(map.clone(), 2, sel.clone(), random(&mut rng, n, n) * 0.4, random(&mut rng, n, 4) * 0.3).unwrap();
        let trajs = (0..40)
            .map(|_| {
                let mut states = vec![Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))];
                let mut inputs = Vec::new();
                for k in 0..10 {
                    let u = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let next = truth.predict(&states[k], &u);
                    states.push(next);
                    inputs.push(u);
                }
                Trajectory { states, inputs, failed_at: None }
            })
            .collect();
        let data = dataset_from(trajs, 2);
        let opts = IdentifyOptions { ridge: Some(0.0), holdout_fraction: 0.1, seed: 3 };
        let m = identify_model(&data, &map, &sel, &opts).unwrap();
        assert!((&m.k_xx - &truth.k_xx).amax() < 1e-8);
        assert!((&m.k_xu - &truth.k_xu).amax() < 1e-8);
        assert!(m.diagnostics.as_ref().unwrap().holdout_mse < 1e-20);
    }

    #[test]
    fn split_is_by_trajectory_and_deterministic() {
        let (train, hold) = split_trajectories(100, 0.1, 5);
        assert_eq!(hold.len(), 10);
        assert_eq!(train.len(), 90);
        assert_eq!(split_trajectories(100, 0.1, 5), (train.clone(), hold.clone()));
        assert!(hold.iter().all(|h| !train.contains(h)));
        assert_eq!(split_trajectories(1, 0.1, 5).1.len(), 0);
    }

    proptest::proptest! {
        #[test]
        fn streaming_matches_single_chunk(n in 5usize..3000, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 4, n);
            let y = random(&mut rng, 2, n);
            let sol = solve_least_squares(&RegressionProblem { inputs: x.clone(), outputs: y.clone(), ridge: 1e-6 }).unwrap();
            let g = &x * x.transpose() + Matrix::identity(4, 4) * 1e-6;
            let reference = (g.cholesky().unwrap().solve(&(&x * y.transpose()))).transpose();
            proptest::prop_assert!((sol.coefficients - reference).amax() < 1e-8);
        }
    }
}
