//! Selection/measurement pairs `(S, H)` with `(S·ψ_x(x)) ⊗ ψ_u(x) = H·ψ_x(x)`,
//! and the closed-loop operator `K̃ = K_xx + K_xu·(I ⊗ K_u)·H`.
//!
//! The pair is found blockwise: for every lifted feature `i` the products
//! `[ψ_x]_i·ψ_u` are regressed onto `ψ_x`, and blocks whose RMS residual is
//! at most `ε_H` are kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::babbling::SnapshotDataset;
use crate::edmd::{BilinearKoopmanModel, LeastSquares};
use crate::error::{Error, Result};
use crate::gain::FeedbackGain;
use crate::linalg::{kron, kron_vec, matrix_serde, Matrix, MatrixJson, Vector};
use crate::observables::ObservableMap;

/// Binary row selector; row `r` picks lifted feature `indices[r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    lifted_dim: usize,
    indices: Vec<usize>,
}

impl SelectionMatrix {
    /// `indices` must be strictly increasing and below `lifted_dim`.
    pub fn new(lifted_dim: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("selection indices must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last >= lifted_dim {
                return Err(Error::dim(format!("selection index {last} out of range for {lifted_dim} features")));
            }
        }
        Ok(Self { lifted_dim, indices })
    }

    pub fn identity(lifted_dim: usize) -> Self {
        Self { lifted_dim, indices: (0..lifted_dim).collect() }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            lifted_dim: mask.len(),
            indices: mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
        }
    }

    /// Parses a binary matrix with exactly one unit entry per row.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let mut indices = Vec::with_capacity(m.nrows());
        for r in 0..m.nrows() {
            let row = m.row(r);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::param("selection matrix entries must be 0 or 1"));
            }
            let ones: Vec<usize> = (0..m.ncols()).filter(|&c| row[c] == 1.0).collect();
            if ones.len() != 1 {
                return Err(Error::param(format!("selection row {r} has {} nonzero entries", ones.len())));
            }
            indices.push(ones[0]);
        }
        Self::new(m.ncols(), indices)
    }

    /// `d_S`
    pub fn rows(&self) -> usize {
        self.indices.len()
    }

    /// `d_ψ`
    pub fn lifted_dim(&self) -> usize {
        self.lifted_dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.lifted_dim];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn matrix(&self) -> Matrix {
        let mut s = Matrix::zeros(self.rows(), self.lifted_dim);
        for (r, &c) in self.indices.iter().enumerate() {
            s[(r, c)] = 1.0;
        }
        s
    }

    pub fn select(&self, psi: &Vector) -> Vector {
        Vector::from_iterator(self.rows(), self.indices.iter().map(|&i| psi[i]))
    }
}

impl Serialize for SelectionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from(&self.matrix()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SelectionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix::try_from(MatrixJson::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Self::from_matrix(&m).map_err(serde::de::Error::custom)
    }
}

/// Unthresholded blockwise fit `ψ_x ⊗ ψ_u ≈ H̄·ψ_x`.
#[derive(Debug, Clone)]
pub struct CandidateFit {
    /// `(d_ψ·d_{ψ_u}) × d_ψ`
    pub hbar: Matrix,
    /// RMS residual of each block over the fitting snapshots.
    pub residuals: Vec<f64>,
    /// Per-block rank-deficiency flags. Every block shares the regressors
    /// `ψ_x`, so the flags agree; they are kept per block for reporting.
    pub rank_deficient: Vec<bool>,
    /// `RMS(‖ψ_x ⊗ ψ_u‖)` over the fitting snapshots.
    pub target_rms: f64,
    pub psi_u_dim: usize,
    pub samples: usize,
}

impl CandidateFit {
    /// Default threshold `1e-6 · RMS(‖ψ_x ⊗ ψ_u‖)`.
    pub fn default_eps_h(&self) -> f64 {
        1e-6 * self.target_rms
    }

    pub fn block(&self, i: usize) -> Matrix {
        self.hbar.rows(i * self.psi_u_dim, self.psi_u_dim).into_owned()
    }
}

fn check_maps(map_x: &ObservableMap, map_u: &ObservableMap) -> Result<()> {
    if map_x.state_dim != map_u.state_dim {
        return Err(Error::dim(format!(
            "ψ_x acts on {}-dimensional states, ψ_u on {}",
            map_x.state_dim, map_u.state_dim
        )));
    }
    Ok(())
}

/// Fits `H̄` on an explicit list of states.
pub fn fit_candidate_hbar_on_states(states: &[Vector], map_x: &ObservableMap, map_u: &ObservableMap) -> Result<CandidateFit> {
    check_maps(map_x, map_u)?;
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (dx, du) = (map_x.dim(), map_u.dim());
    let parts: Vec<LeastSquares> = states
        .par_chunks(2048)
        .map(|chunk| {
            let mut ls = LeastSquares::new(dx, dx * du);
            for x in chunk {
                let px = map_x.evaluate(x);
                let target = kron_vec(&px, &map_u.evaluate(x));
                ls.push(px.as_slice(), target.as_slice());
            }
            ls
        })
        .collect();
    let mut ls = LeastSquares::new(dx, dx * du);
    for p in parts {
        ls.merge(p);
    }
    let sol = ls.solve(0.0)?;
    let hbar = sol.coefficients;

    let sums: Vec<(Vec<f64>, f64)> = states
        .par_chunks(2048)
        .map(|chunk| {
            let mut block = vec![0.0; dx];
            let mut target_sq = 0.0;
            for x in chunk {
                let px = map_x.evaluate(x);
                let target = kron_vec(&px, &map_u.evaluate(x));
                target_sq += target.norm_squared();
                let err = target - &hbar * &px;
                for (i, b) in block.iter_mut().enumerate() {
                    *b += err.rows(i * du, du).norm_squared();
                }
            }
            (block, target_sq)
        })
        .collect();
    let n = states.len() as f64;
    let mut block = vec![0.0; dx];
    let mut target_sq = 0.0;
    for (b, t) in sums {
        for (acc, v) in block.iter_mut().zip(b) {
            *acc += v;
        }
        target_sq += t;
    }
    if sol.rank_deficient {
        log::warn!("ψ_x regressors are rank deficient ({} of {dx}); every H̄ block is flagged", sol.rank);
    }
    Ok(CandidateFit {
        hbar,
        residuals: block.iter().map(|s| (s / n).sqrt()).collect(),
        rank_deficient: vec![sol.rank_deficient; dx],
        target_rms: (target_sq / n).sqrt(),
        psi_u_dim: du,
        samples: states.len(),
    })
}

/// Fits `H̄` on the pre-step states `x_k` of every snapshot.
pub fn fit_candidate_hbar(data: &SnapshotDataset, map_x: &ObservableMap, map_u: &ObservableMap) -> Result<CandidateFit> {
    if map_x.state_dim != data.state_dim {
        return Err(Error::dim(format!(
            "map expects {}-dimensional states, dataset holds {}",
            map_x.state_dim, data.state_dim
        )));
    }
    let states: Vec<Vector> = data.snapshots().map(|s| s.x.clone()).collect();
    fit_candidate_hbar_on_states(&states, map_x, map_u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationPair {
    pub selection: SelectionMatrix,
    /// `(d_S·d_{ψ_u}) × d_ψ`, retained blocks in increasing index order.
    #[serde(with = "matrix_serde")]
    pub h: Matrix,
    pub mask: Vec<bool>,
    pub residuals: Vec<f64>,
    #[serde(with = "crate::linalg::extended_f64")]
    pub eps_h: f64,
    pub psi_u_dim: usize,
    pub rank_deficient: Vec<bool>,
}

impl FactorizationPair {
    pub fn selected_dim(&self) -> usize {
        self.selection.rows()
    }

    /// `H̄`: the retained blocks at their original positions, zeros elsewhere.
    pub fn hbar(&self) -> Matrix {
        let du = self.psi_u_dim;
        let mut out = Matrix::zeros(self.mask.len() * du, self.h.ncols());
        for (r, &i) in self.selection.indices().iter().enumerate() {
            out.rows_mut(i * du, du).copy_from(&self.h.rows(r * du, du));
        }
        out
    }

    pub fn residual_table(&self, labels: &[&str]) -> String {
        let mut out = format!("{:>4}  {:<16} {:>12}  kept\n", "i", "feature", "residual");
        for (i, r) in self.residuals.iter().enumerate() {
            let label = labels.get(i).copied().unwrap_or("");
            out.push_str(&format!("{i:>4}  {label:<16} {r:>12.3e}  {}\n", if self.mask[i] { "yes" } else { "no" }));
        }
        out.push_str(&format!("eps_h = {:.3e}, d_S = {}\n", self.eps_h, self.selected_dim()));
        out
    }
}

/// Keeps blocks with `r_i ≤ ε_H`.
///
/// `ε_H` may be `+∞` (keep everything). Fails when nothing is kept, since
/// the bilinear input term would vanish.
pub fn threshold_mask(fit: &CandidateFit, eps_h: f64) -> Result<FactorizationPair> {
    if eps_h.is_nan() || eps_h < 0.0 {
        return Err(Error::param(format!("eps_h must be non-negative, got {eps_h}")));
    }
    let mask: Vec<bool> = fit.residuals.iter().map(|&r| r <= eps_h).collect();
    let selection = SelectionMatrix::from_mask(&mask);
    if selection.rows() == 0 {
        return Err(Error::EmptySelection { eps_h });
    }
    let du = fit.psi_u_dim;
    let mut h = Matrix::zeros(selection.rows() * du, fit.hbar.ncols());
    for (r, &i) in selection.indices().iter().enumerate() {
        h.rows_mut(r * du, du).copy_from(&fit.block(i));
    }
    Ok(FactorizationPair {
        selection,
        h,
        mask,
        residuals: fit.residuals.clone(),
        eps_h,
        psi_u_dim: du,
        rank_deficient: fit.rank_deficient.clone(),
    })
}

/// `max_x ‖(S·ψ_x(x)) ⊗ ψ_u(x) − H·ψ_x(x)‖_∞` over `test_states`.
pub fn verify_assumption1(pair: &FactorizationPair, map_x: &ObservableMap, map_u: &ObservableMap, test_states: &[Vector]) -> f64 {
    test_states
        .par_iter()
        .map(|x| {
            let px = map_x.evaluate(x);
            let lhs = kron_vec(&pair.selection.select(&px), &map_u.evaluate(x));
            (lhs - &pair.h * px).amax()
        })
        .reduce(|| 0.0, f64::max)
}

/// `K̃ = K_xx + K_xu·(I_{d_S} ⊗ K_u)·H` together with its constituents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopOperator {
    #[serde(with = "matrix_serde")]
    pub k_tilde: Matrix,
    #[serde(with = "matrix_serde")]
    pub k_xx: Matrix,
    #[serde(with = "matrix_serde")]
    pub k_xu: Matrix,
    pub k_u: FeedbackGain,
    #[serde(with = "matrix_serde")]
    pub h: Matrix,
}

impl ClosedLoopOperator {
    pub fn recompute(&self) -> Result<Matrix> {
        closed_loop_matrix(&self.k_xx, &self.k_xu, self.k_u.matrix(), &self.h)
    }
}

/// `K_xx + K_xu·(I_{d_S} ⊗ K_u)·H`, with `d_S` inferred from the shapes.
pub fn closed_loop_matrix(k_xx: &Matrix, k_xu: &Matrix, k_u: &Matrix, h: &Matrix) -> Result<Matrix> {
    let (du, dpu) = k_u.shape();
    let d = k_xx.nrows();
    if k_xx.ncols() != d || k_xu.nrows() != d || h.ncols() != d {
        return Err(Error::dim(format!(
            "inconsistent lifted dimensions: K_xx {:?}, K_xu {:?}, H {:?}",
            k_xx.shape(),
            k_xu.shape(),
            h.shape()
        )));
    }
    if du == 0 || dpu == 0 || k_xu.ncols() % du != 0 {
        return Err(Error::dim(format!("K_xu has {} columns, not a multiple of d_u = {du}", k_xu.ncols())));
    }
    let ds = k_xu.ncols() / du;
    if h.nrows() != ds * dpu {
        return Err(Error::dim(format!("H must have d_S·d_ψu = {} rows, got {}", ds * dpu, h.nrows())));
    }
    Ok(k_xx + k_xu * kron(&Matrix::identity(ds, ds), k_u) * h)
}

pub fn assemble_ktilde(model: &BilinearKoopmanModel, k_u: &FeedbackGain, h: &Matrix) -> Result<ClosedLoopOperator> {
    if k_u.input_dim() != model.input_dim {
        return Err(Error::dim(format!("K_u has {} rows, model has {} inputs", k_u.input_dim(), model.input_dim)));
    }
    let k_tilde = closed_loop_matrix(&model.k_xx, &model.k_xu, k_u.matrix(), h)?;
    Ok(ClosedLoopOperator {
        k_tilde,
        k_xx: model.k_xx.clone(),
        k_xu: model.k_xu.clone(),
        k_u: k_u.clone(),
        h: h.clone(),
    })
}
