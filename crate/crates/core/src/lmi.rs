//! Feedback synthesis from the block LMI
//!
//! ```text
//! minimize λ  s.t.  M(K_u, λ) = [[P, P·K̃], [K̃ᵀ·P, λ·P]] ⪰ 0,  λ ∈ [0, 1],
//! ```
//!
//! with `K̃ = K_xx + K_xu·(I ⊗ K_u)·H` affine in `K_u` and `P` fixed to a
//! decoder-restricted Lyapunov candidate `P = A_decᵀ·W·A_dec`.
//!
//! Because `P` vanishes outside the decoded state block, `M` has identically
//! zero rows and columns there and its smallest eigenvalue is never positive.
//! Feasibility is therefore judged as `λ_min(M) ≥ −tol`. For fixed `λ` the
//! quantity `max_{K_u} λ_min(M)` is computed with a log-det barrier method on
//! the nonzero part of `M`, and `λ` is bisected on top of that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edmd::BilinearKoopmanModel;
use crate::error::{Error, Result};
use crate::factorization::{closed_loop_matrix, FactorizationPair};
use crate::gain::FeedbackGain;
use crate::linalg::{block_2x2, matrix_serde, Matrix, SymmetricMatrix, Vector};

/// `P = A_decᵀ·W·A_dec` with `W = RᵀR + ε_P·I` (or `W = I` for the identity start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCandidate {
    pub p: SymmetricMatrix,
    #[serde(with = "matrix_serde")]
    pub generator: Matrix,
    pub eps_p: f64,
    pub tag: CandidateTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CandidateTag {
    IdentityStart,
    Sampled { index: usize },
}

impl LyapunovCandidate {
    pub fn identity(state_dim: usize, lifted_dim: usize) -> Self {
        Self::from_weight(Matrix::identity(state_dim, state_dim), Matrix::identity(state_dim, state_dim), lifted_dim, 0.0, CandidateTag::IdentityStart)
    }

    fn from_weight(weight: Matrix, generator: Matrix, lifted_dim: usize, eps_p: f64, tag: CandidateTag) -> Self {
        let n = weight.nrows();
        let mut p = Matrix::zeros(lifted_dim, lifted_dim);
        p.view_mut((0, 0), (n, n)).copy_from(&weight);
        Self { p: SymmetricMatrix::new(p).expect("finite weight"), generator, eps_p, tag }
    }

    pub fn state_dim(&self) -> usize {
        self.generator.nrows()
    }

    pub fn lifted_dim(&self) -> usize {
        self.p.dim()
    }

    /// Decoded-state weight `W` (the matrix `S` of the energy norm `‖x‖_S`).
    pub fn weight(&self) -> Matrix {
        let n = self.state_dim();
        self.p.as_matrix().view((0, 0), (n, n)).into_owned()
    }

    /// `ψᵀ·P·ψ`
    pub fn value(&self, psi: &Vector) -> f64 {
        psi.dot(&(self.p.as_matrix() * psi))
    }

    /// `‖x‖_S = sqrt(xᵀ·W·x)` of the decoded state.
    pub fn energy_norm(&self, x: &Vector) -> f64 {
        x.dot(&(self.weight() * x)).max(0.0).sqrt()
    }
}

/// Samples `R ~ U[−1, 1]^{d_x×d_x}` and returns the candidate built from `RᵀR + ε_P·I`.
pub fn sample_candidate(state_dim: usize, lifted_dim: usize, eps_p: f64, index: usize, rng: &mut impl Rng) -> Result<LyapunovCandidate> {
    if !(eps_p > 0.0) || !eps_p.is_finite() {
        return Err(Error::param(format!("eps_p must be positive, got {eps_p}")));
    }
    if state_dim > lifted_dim {
        return Err(Error::dim(format!("state dimension {state_dim} exceeds lifted dimension {lifted_dim}")));
    }
    let r = Matrix::from_fn(state_dim, state_dim, |_, _| rng.random_range(-1.0..=1.0));
    let w = r.transpose() * &r + Matrix::identity(state_dim, state_dim) * eps_p;
    Ok(LyapunovCandidate::from_weight(w, r, lifted_dim, eps_p, CandidateTag::Sampled { index }))
}

/// `λ·P − Aᵀ·P·A`; positive semidefinite iff `Aᵀ·P·A ⪯ λ·P`.
pub fn lyapunov_residual(a: &Matrix, p: &SymmetricMatrix, lambda: f64) -> Result<SymmetricMatrix> {
    if a.nrows() != a.ncols() || a.nrows() != p.dim() {
        return Err(Error::dim(format!("A is {:?}, P is {}x{}", a.shape(), p.dim(), p.dim())));
    }
    SymmetricMatrix::new(p.as_matrix() * lambda - a.transpose() * p.as_matrix() * a)
}

/// The LMI for one fixed candidate `P`.
#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub p: SymmetricMatrix,
    pub k_xx: Matrix,
    pub k_xu: Matrix,
    pub h: Matrix,
    pub input_dim: usize,
    pub feature_dim: usize,
}

impl LmiProblem {
    pub fn new(model: &BilinearKoopmanModel, pair: &FactorizationPair, p: SymmetricMatrix) -> Result<Self> {
        if model.selection != pair.selection {
            return Err(Error::Precondition("model and factorization pair use different selection matrices".into()));
        }
        Self::from_parts(p, model.k_xx.clone(), model.k_xu.clone(), pair.h.clone(), model.input_dim, pair.psi_u_dim)
    }

    pub fn from_parts(p: SymmetricMatrix, k_xx: Matrix, k_xu: Matrix, h: Matrix, input_dim: usize, feature_dim: usize) -> Result<Self> {
        let prob = Self { p, k_xx, k_xu, h, input_dim, feature_dim };
        closed_loop_matrix(&prob.k_xx, &prob.k_xu, &Matrix::zeros(input_dim, feature_dim), &prob.h)?;
        if prob.p.dim() != prob.k_xx.nrows() {
            return Err(Error::dim(format!("P is {0}x{0} but K_xx is {1}x{1}", prob.p.dim(), prob.k_xx.nrows())));
        }
        Ok(prob)
    }

    pub fn k_tilde(&self, k_u: &Matrix) -> Matrix {
        closed_loop_matrix(&self.k_xx, &self.k_xu, k_u, &self.h).expect("shapes validated at construction")
    }

    /// `M(K_u, λ)`
    pub fn block_matrix(&self, k_u: &Matrix, lambda: f64) -> Matrix {
        let p = self.p.as_matrix();
        let pk = p * self.k_tilde(k_u);
        block_2x2(p, &pk, &(p * lambda)).expect("square blocks")
    }

    pub fn min_eigenvalue(&self, k_u: &Matrix, lambda: f64) -> f64 {
        SymmetricMatrix::new(self.block_matrix(k_u, lambda)).map(|m| m.min_eigenvalue()).unwrap_or(f64::NEG_INFINITY)
    }

    /// Number of leading coordinates on which `P` is supported.
    fn support(&self) -> usize {
        let p = self.p.as_matrix();
        let n = p.nrows();
        (0..n).rev().find(|&i| p.row(i).iter().any(|v| *v != 0.0) || p.column(i).iter().any(|v| *v != 0.0)).map_or(0, |i| i + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Feasibility threshold on `λ_min(M)`.
    pub tol: f64,
    /// Absolute bisection tolerance on `λ`.
    pub lambda_tol: f64,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, lambda_tol: 1e-3, max_newton: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedPOutcome {
    Feasible { k_u: Matrix, lambda: f64, min_eigenvalue: f64, newton_iterations: usize, bisection_steps: usize },
    Infeasible { best_min_eigenvalue: f64, newton_iterations: usize },
}

/// Affine parameterization of the nonzero part of `M` over reduced
/// coordinates `z`, with `K_u = V·z`.
struct Reduced {
    /// Constant part of `F` without the `λ` term, and the `λ` coefficient.
    f_const: Matrix,
    f_lambda: Matrix,
    f_dirs: Vec<Matrix>,
    /// `vec(K_u) = basis·z` (column-major `vec`).
    basis: Matrix,
}

impl Reduced {
    fn new(prob: &LmiProblem) -> Self {
        let d = prob.k_xx.nrows();
        let q = prob.support();
        let w = prob.p.as_matrix().view((0, 0), (q, q)).into_owned();
        let (du, dpu) = (prob.input_dim, prob.feature_dim);
        let n = du * dpu;
        let top0 = prob.k_xx.rows(0, q).into_owned();
        let mut lin = Matrix::zeros(q * d, n);
        for c in 0..n {
            let mut e = Matrix::zeros(du, dpu);
            e[(c % du, c / du)] = 1.0;
            let b = prob.k_xu.clone() * crate::linalg::kron(&Matrix::identity(prob.h.nrows() / dpu, prob.h.nrows() / dpu), &e) * &prob.h;
            let top = b.rows(0, q).into_owned();
            lin.set_column(c, &Vector::from_column_slice(top.as_slice()));
        }
        let (basis, dirs) = if n == 0 || lin.amax() == 0.0 {
            (Matrix::zeros(n, 0), Vec::new())
        } else {
            let svd = lin.svd(true, true);
            let smax = svd.singular_values.max();
            let u = svd.u.unwrap();
            let v_t = svd.v_t.unwrap();
            let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-12 * smax).collect();
            let mut basis = Matrix::zeros(n, keep.len());
            let mut dirs = Vec::with_capacity(keep.len());
            for (k, &i) in keep.iter().enumerate() {
                basis.set_column(k, &(v_t.row(i).transpose() / svd.singular_values[i]));
                dirs.push(Matrix::from_column_slice(q, d, u.column(i).as_slice()));
            }
            (basis, dirs)
        };
        let m = q + d;
        let embed = |top: &Matrix, corner: Option<&Matrix>| {
            let mut f = Matrix::zeros(m, m);
            let wk = &w * top;
            f.view_mut((0, q), (q, d)).copy_from(&wk);
            f.view_mut((q, 0), (d, q)).copy_from(&wk.transpose());
            if let Some(c) = corner {
                f.view_mut((0, 0), (q, q)).copy_from(c);
            }
            f
        };
        let f_const = embed(&top0, Some(&w));
        let mut f_lambda = Matrix::zeros(m, m);
        f_lambda.view_mut((q, q), (q, q)).copy_from(&w);
        let f_dirs = dirs.iter().map(|c| embed(c, None)).collect();
        Self { f_const, f_lambda, f_dirs, basis }
    }

    fn dim(&self) -> usize {
        self.f_dirs.len()
    }

    fn size(&self) -> usize {
        self.f_const.nrows()
    }

    fn f(&self, lambda: f64, z: &[f64]) -> Matrix {
        let mut f = &self.f_const + &self.f_lambda * lambda;
        for (zi, fi) in z.iter().zip(&self.f_dirs) {
            f += fi * *zi;
        }
        f
    }

    fn gain(&self, z: &[f64], du: usize, dpu: usize) -> Matrix {
        let v = &self.basis * Vector::from_column_slice(z);
        Matrix::from_column_slice(du, dpu, v.as_slice())
    }
}

struct BarrierResult {
    z: Vec<f64>,
    t: f64,
    feasible: bool,
    iterations: usize,
}

fn log_det_pd(g: &Matrix) -> Option<f64> {
    let chol = g.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().take(g.nrows()).map(|v| v.ln()).sum::<f64>())
}

/// Smallest `λ` with `K̃₁₁ᵀ·W·K̃₁₁ ⪯ λ·W`, where `K̃₁₁` is the decoded-state
/// block of `K̃`: the largest eigenvalue of `L⁻¹·K̃₁₁ᵀ·W·K̃₁₁·L⁻ᵀ` for `W = L·Lᵀ`.
pub fn decoded_rate(candidate: &LyapunovCandidate, k_tilde: &Matrix) -> Result<f64> {
    let dx = candidate.state_dim();
    let w = candidate.weight();
    let a = k_tilde.view((0, 0), (dx, dx)).into_owned();
    let chol = nalgebra::Cholesky::new(w.clone())
        .ok_or_else(|| Error::param("Lyapunov weight is not positive definite"))?;
    let l = chol.l();
    let g = a.transpose() * &w * &a;
    let l_inv = l.clone().try_inverse().ok_or_else(|| Error::param("singular Cholesky factor"))?;
    let m = &l_inv * g * l_inv.transpose();
    Ok(SymmetricMatrix::new((&m + m.transpose()) * 0.5)?.eigenvalues().max())
}

fn min_eig(m: &Matrix) -> f64 {
    SymmetricMatrix::new(m.clone()).map(|s| s.min_eigenvalue()).unwrap_or(f64::NEG_INFINITY)
}

/// Maximizes `t` subject to `F(λ, z) − t·I ≻ 0`, stopping as soon as the
/// sign of `max t + tol` is decided.
fn barrier_max_min_eig(red: &Reduced, lambda: f64, z0: &[f64], tol: f64, max_newton: usize) -> BarrierResult {
    let r = red.dim();
    let m = red.size();
    let mut z = z0.to_vec();
    let mut t = min_eig(&red.f(lambda, &z));
    let mut iterations = 0;
    if t >= -tol {
        return BarrierResult { z, t, feasible: true, iterations };
    }
    if r == 0 {
        return BarrierResult { z, t, feasible: false, iterations };
    }
    t -= t.abs().max(1.0);
    let mut mu = 1.0;
    let identity = Matrix::identity(m, m);
    // ψ(z, t) = t/μ + log det(F − tI)
    let objective = |z: &[f64], t: f64, mu: f64| -> Option<f64> {
        let g = red.f(lambda, z) - &identity * t;
        log_det_pd(&g).map(|ld| t / mu + ld)
    };
    loop {
        for _ in 0..100 {
            if iterations >= max_newton {
                return BarrierResult { z, t, feasible: false, iterations };
            }
            iterations += 1;
            let g = red.f(lambda, &z) - &identity * t;
            let Some(chol) = g.clone().cholesky() else { break };
            let ginv = chol.inverse();
            let ys: Vec<Matrix> = red.f_dirs.iter().map(|fi| &ginv * fi).collect();
            let n = r + 1;
            let mut grad = Vector::zeros(n);
            let mut hess = Matrix::zeros(n, n);
            for i in 0..r {
                grad[i] = ys[i].trace();
                for j in 0..=i {
                    let v = ys[i].dot(&ys[j].transpose());
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
                let v = -ys[i].dot(&ginv.transpose());
                hess[(i, r)] = v;
                hess[(r, i)] = v;
            }
            grad[r] = 1.0 / mu - ginv.trace();
            hess[(r, r)] = ginv.norm_squared();
            let step = solve_spd(&hess, &grad);
            let dec2 = grad.dot(&step);
            if !(dec2 > 1e-12) {
                break;
            }
            let base = objective(&z, t, mu).unwrap_or(f64::NEG_INFINITY);
            let dec = dec2.sqrt();
            let mut alpha = if dec < 0.25 { 1.0 } else { 1.0 / (1.0 + dec) };
            let mut moved = false;
            while alpha > 1e-14 {
                let zn: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
                let tn = t + alpha * step[r];
                if let Some(v) = objective(&zn, tn, mu) {
                    if v >= base + 1e-4 * alpha * dec2 || (alpha == 1.0 && v >= base) {
                        z = zn;
                        t = tn;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if t >= -tol {
                return BarrierResult { z, t, feasible: true, iterations };
            }
            if !moved || dec2 < 1e-10 {
                break;
            }
        }
        // At a centered point the optimum exceeds t by at most m·μ.
        if t + 2.0 * m as f64 * mu < -tol {
            return BarrierResult { z, t, feasible: false, iterations };
        }
        if mu < 1e-16 {
            return BarrierResult { z, t, feasible: false, iterations };
        }
        mu *= 0.2;
    }
}

fn solve_spd(a: &Matrix, b: &Vector) -> Vector {
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut reg = 0.0;
    loop {
        let mut ar = a.clone();
        for i in 0..ar.nrows() {
            ar[(i, i)] += reg;
        }
        if let Some(ch) = ar.cholesky() {
            return ch.solve(b);
        }
        reg = if reg == 0.0 { 1e-15 * scale } else { reg * 10.0 };
    }
}

/// Minimizes `λ ∈ [0, 1]` subject to `λ_min(M(K_u, λ)) ≥ −tol`.
pub fn solve_fixed_p(prob: &LmiProblem, opts: &SolverOptions) -> Result<FixedPOutcome> {
    if !(opts.tol > 0.0) || !(opts.lambda_tol > 0.0) {
        return Err(Error::param("solver tolerances must be positive"));
    }
    let red = Reduced::new(prob);
    let (du, dpu) = (prob.input_dim, prob.feature_dim);
    let mut iterations = 0;
    let at_one = barrier_max_min_eig(&red, 1.0, &vec![0.0; red.dim()], opts.tol, opts.max_newton);
    iterations += at_one.iterations;
    if !at_one.feasible {
        return Ok(FixedPOutcome::Infeasible { best_min_eigenvalue: at_one.t, newton_iterations: iterations });
    }
    let mut best_z = at_one.z;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut steps = 0;
    // Try λ = 0 outright; bisection would otherwise stop at lambda_tol.
    let at_zero = barrier_max_min_eig(&red, 0.0, &best_z, opts.tol, opts.max_newton);
    iterations += at_zero.iterations;
    if at_zero.feasible {
        hi = 0.0;
        best_z = at_zero.z;
    }
    while hi - lo > opts.lambda_tol {
        let mid = 0.5 * (lo + hi);
        let res = barrier_max_min_eig(&red, mid, &best_z, opts.tol, opts.max_newton);
        iterations += res.iterations;
        steps += 1;
        if res.feasible {
            hi = mid;
            best_z = res.z;
        } else {
            lo = mid;
        }
    }
    let k_u = red.gain(&best_z, du, dpu);
    let min_eigenvalue = prob.min_eigenvalue(&k_u, hi);
    Ok(FixedPOutcome::Feasible { k_u, lambda: hi, min_eigenvalue, newton_iterations: iterations, bisection_steps: steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisStatus {
    Optimal,
    Infeasible,
    MaxResamplesExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub eps_p: f64,
    pub max_resamples: usize,
    pub solver: SolverOptions,
    /// When set, keep examining candidates after the first success until this
    /// many have been tried, and return the one with the smallest `λ*`.
    pub rate_budget: Option<usize>,
    pub seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { eps_p: 1e-2, max_resamples: 50, solver: SolverOptions::default(), rate_budget: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub tag: CandidateTag,
    pub lambda: Option<f64>,
    #[serde(with = "crate::linalg::extended_f64")]
    pub min_eigenvalue: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDiagnostics {
    pub candidates: Vec<CandidateRecord>,
    /// Sampled (non-identity) candidates examined.
    pub resamples: usize,
    pub newton_iterations: usize,
    pub bisection_steps: usize,
    pub final_min_eigenvalue: Option<f64>,
    /// `λ_min(λ*·W − K̃₁₁ᵀ·W·K̃₁₁)` on the decoded block.
    pub decoded_lyapunov_margin: Option<f64>,
    /// Largest entry of `K̃` coupling non-state features into the decoded rows.
    pub decoded_coupling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub status: SynthesisStatus,
    pub k_u: Option<FeedbackGain>,
    pub lambda: Option<f64>,
    pub candidate: Option<LyapunovCandidate>,
    pub options: SynthesisOptions,
    pub diagnostics: SynthesisDiagnostics,
}

impl SynthesisResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SynthesisStatus::Optimal
    }
}

/// `√λ*`, the certified contraction factor of `‖x‖_S` along lifted closed-loop trajectories.
pub fn certified_rate(result: &SynthesisResult) -> Result<f64> {
    match (result.status, result.lambda) {
        (SynthesisStatus::Optimal, Some(l)) => Ok(l.sqrt()),
        _ => Err(Error::NotOptimal),
    }
}

/// Deterministic candidate sequence: identity first, then `max_resamples` samples.
pub fn candidate_sequence(state_dim: usize, lifted_dim: usize, opts: &SynthesisOptions) -> Result<Vec<LyapunovCandidate>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = vec![LyapunovCandidate::identity(state_dim, lifted_dim)];
    for i in 0..opts.max_resamples {
        out.push(sample_candidate(state_dim, lifted_dim, opts.eps_p, i + 1, &mut rng)?);
    }
    Ok(out)
}

/// Runs the candidate loop on the lifted model.
pub fn synthesize(model: &BilinearKoopmanModel, pair: &FactorizationPair, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    if !(opts.eps_p > 0.0) {
        return Err(Error::param(format!("eps_p must be positive, got {}", opts.eps_p)));
    }
    let dx = model.map_x.state_dim;
    let d = model.lifted_dim();
    let candidates = candidate_sequence(dx, d, opts)?;
    let budget = opts.rate_budget.map(|b| b.clamp(1, candidates.len()));
    let mut diag = SynthesisDiagnostics {
        candidates: Vec::new(),
        resamples: 0,
        newton_iterations: 0,
        bisection_steps: 0,
        final_min_eigenvalue: None,
        decoded_lyapunov_margin: None,
        decoded_coupling: None,
    };
    let mut best: Option<(LyapunovCandidate, Matrix, f64)> = None;
    let batch = rayon::current_num_threads().max(1);
    'outer: for chunk in candidates.chunks(batch) {
        let outcomes: Vec<Result<FixedPOutcome>> = {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|c| {
                    let prob = LmiProblem::new(model, pair, c.p.clone())?;
                    let mut outcome = solve_fixed_p(&prob, &opts.solver)?;
                    // Never report a rate below the exact contraction of the
                    // decoded block; M grows with λ, so the certificate still holds.
                    if let FixedPOutcome::Feasible { k_u, lambda, min_eigenvalue, .. } = &mut outcome {
                        let exact = decoded_rate(c, &prob.k_tilde(k_u))?;
                        if exact > *lambda {
                            *lambda = exact;
                            *min_eigenvalue = prob.min_eigenvalue(k_u, exact);
                        }
                    }
                    Ok(outcome)
                })
                .collect()
        };
        for (cand, outcome) in chunk.iter().zip(outcomes) {
            let outcome = outcome?;
            if matches!(cand.tag, CandidateTag::Sampled { .. }) {
                diag.resamples += 1;
            }
            let record = match &outcome {
                FixedPOutcome::Feasible { lambda, min_eigenvalue, newton_iterations, bisection_steps, .. } => {
                    diag.newton_iterations += newton_iterations;
                    diag.bisection_steps += bisection_steps;
                    CandidateRecord { tag: cand.tag, lambda: Some(*lambda), min_eigenvalue: *min_eigenvalue, newton_iterations: *newton_iterations }
                }
                FixedPOutcome::Infeasible { best_min_eigenvalue, newton_iterations } => {
                    diag.newton_iterations += newton_iterations;
                    CandidateRecord { tag: cand.tag, lambda: None, min_eigenvalue: *best_min_eigenvalue, newton_iterations: *newton_iterations }
                }
            };
            log::debug!("candidate {:?}: λ* = {:?}, min eig = {:.3e}", record.tag, record.lambda, record.min_eigenvalue);
            diag.candidates.push(record);
            if let FixedPOutcome::Feasible { k_u, lambda, .. } = outcome {
                if lambda < 1.0 && best.as_ref().is_none_or(|b| lambda < b.2) {
                    best = Some((cand.clone(), k_u, lambda));
                }
            }
            let examined = diag.candidates.len();
            match budget {
                None if best.is_some() => break 'outer,
                Some(b) if examined >= b && best.is_some() => break 'outer,
                _ => {}
            }
        }
    }
    let Some((cand, k_u, lambda)) = best else {
        let status = if opts.max_resamples == 0 { SynthesisStatus::Infeasible } else { SynthesisStatus::MaxResamplesExceeded };
        return Ok(SynthesisResult { status, k_u: None, lambda: None, candidate: None, options: opts.clone(), diagnostics: diag });
    };
    let prob = LmiProblem::new(model, pair, cand.p.clone())?;
    diag.final_min_eigenvalue = Some(prob.min_eigenvalue(&k_u, lambda));
    let kt = prob.k_tilde(&k_u);
    let w = cand.weight();
    let k11 = kt.view((0, 0), (dx, dx)).into_owned();
    diag.decoded_lyapunov_margin = Some(min_eig(&(&w * lambda - k11.transpose() * &w * &k11)));
    diag.decoded_coupling = Some(if d > dx { kt.view((0, dx), (dx, d - dx)).amax() } else { 0.0 });
    Ok(SynthesisResult {
        status: SynthesisStatus::Optimal,
        k_u: Some(FeedbackGain::new(k_u)?),
        lambda: Some(lambda),
        candidate: Some(cand),
        options: opts.clone(),
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::SelectionMatrix;
    use crate::observables::{Feature, ObservableMap};

    fn scalar_problem(k_xx: f64, k_xu: f64) -> LmiProblem {
        LmiProblem::from_parts(
            SymmetricMatrix::identity(1),
            Matrix::from_element(1, 1, k_xx),
            Matrix::from_element(1, 1, k_xu),
            Matrix::from_element(1, 1, 1.0),
            1,
            1,
        )
        .unwrap()
    }

    fn state_map(n: usize) -> ObservableMap {
        ObservableMap::new("state", n, (0..n).map(|i| Feature::state(i, format!("x{i}"))).collect()).unwrap()
    }

    fn linear_model(k_xx: Matrix, k_xu: Matrix) -> (BilinearKoopmanModel, FactorizationPair) {
        // ψ = x, ψ_u = x, S selects nothing but a constant-like first row: use S = e_1
        // with H chosen so that (S·ψ) ⊗ ψ_u = H·ψ holds on the model level.
        let n = k_xx.nrows();
        let sel = SelectionMatrix::new(n, vec![0]).unwrap();
        let du = k_xu.ncols();
        let model = BilinearKoopmanModel::new(state_map(n), du, sel.clone(), k_xx, k_xu).unwrap();
        let pair = FactorizationPair {
            selection: sel,
            h: Matrix::identity(n, n),
            mask: (0..n).map(|i| i == 0).collect(),
            residuals: vec![0.0; n],
            eps_h: 1e-6,
            psi_u_dim: n,
            rank_deficient: vec![false; n],
        };
        (model, pair)
    }

    #[test]
    fn residual_examples() {
        let p = SymmetricMatrix::identity(2);
        let a = Matrix::identity(2, 2) * 0.5;
        assert!(lyapunov_residual(&a, &p, 0.25).unwrap().is_psd(1e-12));
        assert!(!lyapunov_residual(&a, &p, 0.24).unwrap().is_psd(1e-12));
        assert!(!lyapunov_residual(&Matrix::identity(2, 2), &p, 0.999).unwrap().is_psd(1e-12));
        assert!(lyapunov_residual(&Matrix::identity(3, 3), &p, 1.0).is_err());
    }

    #[test]
    fn candidates() {
        let id = LyapunovCandidate::identity(2, 5);
        let mut expected = Matrix::zeros(5, 5);
        expected[(0, 0)] = 1.0;
        expected[(1, 1)] = 1.0;
        assert_eq!(id.p.as_matrix(), &expected);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..20 {
            let c = sample_candidate(3, 7, 1e-2, i, &mut rng).unwrap();
            let eig = c.p.eigenvalues();
            assert_eq!(eig.iter().filter(|v| v.abs() > 1e-12).count(), 3);
            assert!(min_eig(&c.weight()) >= 1e-2 - 1e-12);
        }
        let a = sample_candidate(2, 4, 1e-2, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_candidate(2, 4, 1e-2, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_candidate(2, 4, 0.0, 1, &mut rng).is_err());
    }

    #[test]
    fn scalar_toy_reaches_deadbeat() {
        let prob = scalar_problem(1.1, 1.0);
        match solve_fixed_p(&prob, &SolverOptions::default()).unwrap() {
            FixedPOutcome::Feasible { k_u, lambda, min_eigenvalue, .. } => {
                assert!(lambda <= 1e-3, "λ* = {lambda}");
                assert!(min_eigenvalue >= -1e-8);
                // λ* ≤ 1e-3 forces |1.1 + K_u| ≤ sqrt(1e-3)
                assert!((k_u[(0, 0)] + 1.1).abs() <= 1e-3_f64.sqrt() + 1e-9);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn no_authority_unstable_is_infeasible() {
        let prob = scalar_problem(1.1, 0.0);
        assert!(matches!(solve_fixed_p(&prob, &SolverOptions::default()).unwrap(), FixedPOutcome::Infeasible { .. }));
    }

    #[test]
    fn stable_open_loop_meets_lyapunov_bound() {
        // K_xx with spectral radius 0.5 and P from the discrete Lyapunov equation.
        let a = Matrix::from_row_slice(2, 2, &[0.5, 0.3, 0.0, 0.4]);
        let rho2 = 0.25;
        // P = Σ (Aᵀ)^k A^k / ρ^{2k}-weighted sum truncated gives a near-optimal certificate;
        // use the plain Lyapunov solution for λ close to ρ² (Q small).
        let mut p = Matrix::identity(2, 2) * 1e-6;
        let mut term = Matrix::identity(2, 2);
        let scale = 1.0 / (rho2 * 1.0001);
        for _ in 0..400 {
            p += &term;
            term = a.transpose() * term * &a * scale;
        }
        let prob = LmiProblem::from_parts(SymmetricMatrix::new(p).unwrap(), a, Matrix::zeros(2, 1), Matrix::identity(2, 2), 1, 2).unwrap();
        match solve_fixed_p(&prob, &SolverOptions::default()).unwrap() {
            FixedPOutcome::Feasible { lambda, .. } => assert!(lambda <= rho2 * 1.0001 + 1e-3, "λ* = {lambda}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_matrix_is_affine_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = |a, b| Matrix::from_fn(a, b, |_, _| rng.random_range(-1.0..1.0));
        let cand = sample_candidate(2, 4, 1e-2, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let prob = LmiProblem::from_parts(cand.p.clone(), r(4, 4), r(4, 4), r(6, 4), 2, 3).unwrap();
        let (k1, k2) = (r(2, 3), r(2, 3));
        let alpha = 0.3;
        let mix = prob.block_matrix(&(&k1 * alpha + &k2 * (1.0 - alpha)), 0.7);
        let sep = prob.block_matrix(&k1, 0.7) * alpha + prob.block_matrix(&k2, 0.7) * (1.0 - alpha);
        assert!((mix - sep).amax() < 1e-12);
        let stable = scalar_problem(0.5, 1.0);
        let zero = Matrix::zeros(1, 1);
        for l in [0.25, 0.3, 0.6, 1.0] {
            assert!(stable.min_eigenvalue(&zero, l) >= -1e-12);
        }
    }

    #[test]
    fn synthesis_outcomes() {
        let (model, pair) = linear_model(Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]), Matrix::zeros(2, 1));
        let res = synthesize(&model, &pair, &SynthesisOptions::default()).unwrap();
        assert!(res.is_optimal());
        assert_eq!(res.candidate.as_ref().unwrap().tag, CandidateTag::IdentityStart);
        assert!(res.lambda.unwrap() < 1.0);
        assert!(res.diagnostics.final_min_eigenvalue.unwrap() >= -1e-8);

        let (model, pair) = linear_model(Matrix::from_row_slice(2, 2, &[1.2, 0.1, 0.0, 1.1]), Matrix::zeros(2, 1));
        let opts = SynthesisOptions { max_resamples: 5, ..Default::default() };
        let res = synthesize(&model, &pair, &opts).unwrap();
        assert_eq!(res.status, SynthesisStatus::MaxResamplesExceeded);
        assert_eq!(res.diagnostics.resamples, 5);
        assert!(matches!(certified_rate(&res), Err(Error::NotOptimal)));
    }

    #[test]
    fn energy_norm_envelope_on_lifted_model() {
        // Unstable double integrator-like model, controllable through the bilinear term.
        let k_xx = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.05]);
        let k_xu = Matrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let (model, pair) = linear_model(k_xx, k_xu);
        let res = synthesize(&model, &pair, &SynthesisOptions::default()).unwrap();
        assert!(res.is_optimal());
        let lambda = res.lambda.unwrap();
        let cand = res.candidate.as_ref().unwrap();
        let prob = LmiProblem::new(&model, &pair, cand.p.clone()).unwrap();
        let kt = prob.k_tilde(res.k_u.as_ref().unwrap().matrix());
        let rate = certified_rate(&res).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut psi = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let n0 = cand.energy_norm(&psi);
        for k in 1..=200 {
            let next = &kt * &psi;
            assert!(cand.value(&next) <= lambda * cand.value(&psi) + 1e-8 * psi.norm_squared());
            psi = next;
            assert!(cand.energy_norm(&psi) <= rate.powi(k) * n0 * (1.0 + 1e-6) + 1e-300);
        }
    }

    #[test]
    fn certified_rate_examples() {
        let mk = |l: f64| SynthesisResult {
            status: SynthesisStatus::Optimal,
            k_u: None,
            lambda: Some(l),
            candidate: None,
            options: SynthesisOptions::default(),
            diagnostics: SynthesisDiagnostics {
                candidates: vec![],
                resamples: 0,
                newton_iterations: 0,
                bisection_steps: 0,
                final_min_eigenvalue: None,
                decoded_lyapunov_margin: None,
                decoded_coupling: None,
            },
        };
        assert_eq!(certified_rate(&mk(0.25)).unwrap(), 0.5);
        assert!((certified_rate(&mk(1.0 - 1e-3)).unwrap() - 0.9995).abs() < 1e-6);
    }

    #[test]
    fn decoded_rate_matches_generalized_eigenvalue() {
        let cand = LyapunovCandidate::identity(2, 3);
        let kt = Matrix::from_row_slice(3, 3, &[0.5, 0.0, 9.0, 0.0, 0.2, 9.0, 0.0, 0.0, 1.0]);
        assert!((decoded_rate(&cand, &kt).unwrap() - 0.25).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cand = sample_candidate(2, 2, 1e-2, 1, &mut rng).unwrap();
        let a = Matrix::from_row_slice(2, 2, &[0.3, 0.4, -0.1, 0.6]);
        let rate = decoded_rate(&cand, &a).unwrap();
        let p = cand.p.clone();
        assert!(lyapunov_residual(&a, &p, rate * (1.0 + 1e-9)).unwrap().min_eigenvalue() >= -1e-12);
        assert!(lyapunov_residual(&a, &p, rate * 0.99).unwrap().min_eigenvalue() < 0.0);
    }
}
