//! Lifting maps `ψ: ℝ^{d_x} → ℝ^{d_ψ}` built from serializable feature
//! descriptors.
//!
//! A feature is a product of primitive factors (state powers, sines and
//! cosines of linear combinations of the state, and `1/(a + b·cos(cᵀx))`
//! rational terms). The empty product is the constant `1`. Every map must start
//! with the raw state `x_1..x_{d_x}` so the linear decoder `[I | 0]` recovers
//! the state exactly.
//!
//! Feature order is part of a map's identity: gains, measurement matrices and
//! Lyapunov candidates are only meaningful together with the map they were
//! computed for, which is why models record [`ObservableMap::descriptor_hash`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Factor {
    /// `x[index]^power`
    Power { index: usize, power: u32 },
    /// `sin(coeffsᵀx)`
    Sin { coeffs: Vec<f64> },
    /// `cos(coeffsᵀx)`
    Cos { coeffs: Vec<f64> },
    /// `1 / (offset + scale·cos(coeffsᵀx))`; singular where the denominator
    /// vanishes, which the built-in maps avoid by construction.
    InvCos { offset: f64, scale: f64, coeffs: Vec<f64> },
}

fn dot(c: &[f64], x: &Vector) -> f64 {
    c.iter().zip(x.iter()).map(|(a, b)| a * b).sum()
}

impl Factor {
    fn eval(&self, x: &Vector) -> f64 {
        match self {
            Factor::Power { index, power } => x[*index].powi(*power as i32),
            Factor::Sin { coeffs } => dot(coeffs, x).sin(),
            Factor::Cos { coeffs } => dot(coeffs, x).cos(),
            Factor::InvCos { offset, scale, coeffs } => 1.0 / (offset + scale * dot(coeffs, x).cos()),
        }
    }

    fn check(&self, state_dim: usize) -> Result<()> {
        let coeffs_ok = |c: &Vec<f64>| c.len() == state_dim && c.iter().all(|v| v.is_finite());
        let ok = match self {
            Factor::Power { index, power } => *index < state_dim && *power >= 1,
            Factor::Sin { coeffs } | Factor::Cos { coeffs } => coeffs_ok(coeffs),
            Factor::InvCos { offset, scale, coeffs } => {
                coeffs_ok(coeffs) && offset.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("malformed factor {self:?} for state dimension {state_dim}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub label: String,
    pub factors: Vec<Factor>,
}

impl Feature {
    pub fn new(label: impl Into<String>, factors: Vec<Factor>) -> Self {
        Self { label: label.into(), factors }
    }

    pub fn state(index: usize, label: impl Into<String>) -> Self {
        Self::new(label, vec![Factor::Power { index, power: 1 }])
    }

    pub fn constant() -> Self {
        Self::new("1", Vec::new())
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        self.factors.iter().map(|f| f.eval(x)).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableMap {
    pub name: String,
    pub state_dim: usize,
    pub features: Vec<Feature>,
}

impl ObservableMap {
    /// Validates the descriptor, including the leading raw-state block.
    pub fn new(name: impl Into<String>, state_dim: usize, features: Vec<Feature>) -> Result<Self> {
        let map = Self { name: name.into(), state_dim, features };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.features.len() < self.state_dim {
            return Err(Error::param(format!(
                "map {:?} needs at least its {} state features",
                self.name, self.state_dim
            )));
        }
        for (i, feat) in self.features.iter().enumerate() {
            for f in &feat.factors {
                f.check(self.state_dim)?;
            }
            if i < self.state_dim && feat.factors != [Factor::Power { index: i, power: 1 }] {
                return Err(Error::param(format!(
                    "map {:?}: feature {i} must be the raw state component x{}",
                    self.name,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.label.as_str()).collect()
    }

    pub fn evaluate(&self, x: &Vector) -> Vector {
        debug_assert_eq!(x.len(), self.state_dim);
        Vector::from_iterator(self.dim(), self.features.iter().map(|f| f.eval(x)))
    }

    /// Column `j` of the result is `ψ(states[j])`.
    pub fn evaluate_batch(&self, states: &[Vector]) -> Result<Matrix> {
        if let Some(bad) = states.iter().position(|x| x.len() != self.state_dim) {
            return Err(Error::dim(format!(
                "state {bad} has length {} but map {:?} expects {}",
                states[bad].len(),
                self.name,
                self.state_dim
            )));
        }
        let cols: Vec<Vector> = states.par_iter().map(|x| self.evaluate(x)).collect();
        if let Some(index) = cols.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteFeature { index });
        }
        Ok(if cols.is_empty() {
            Matrix::zeros(self.dim(), 0)
        } else {
            Matrix::from_columns(&cols)
        })
    }

    pub fn decoder(&self) -> DecodingOperator {
        DecodingOperator { state_dim: self.state_dim, lifted_dim: self.dim() }
    }

    /// SHA-256 of the canonical JSON descriptor.
    pub fn descriptor_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("map descriptors always serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// Index/label table for display.
    pub fn label_table(&self) -> String {
        let mut out = format!("{} (d_x = {}, d_psi = {})\n", self.name, self.state_dim, self.dim());
        for (i, f) in self.features.iter().enumerate() {
            out.push_str(&format!("  {i:>2}  {}\n", f.label));
        }
        out
    }
}

/// The binary `[I_{d_x} | 0]` matrix reading the state back out of `ψ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodingOperator {
    pub state_dim: usize,
    pub lifted_dim: usize,
}

impl DecodingOperator {
    pub fn matrix(&self) -> Matrix {
        Matrix::identity(self.state_dim, self.lifted_dim)
    }

    pub fn decode(&self, psi: &Vector) -> Vector {
        psi.rows(0, self.state_dim).into_owned()
    }
}

fn unit(n: usize, entries: &[(usize, f64)]) -> Vec<f64> {
    let mut c = vec![0.0; n];
    for &(i, v) in entries {
        c[i] = v;
    }
    c
}

/// `[θ, θ̇, 1, θ², θ̇², sin θ, sin θ̇, cos θ, cos θ̇]`.
pub fn single_pendulum_map() -> ObservableMap {
    let names = ["theta", "dtheta"];
    let mut features: Vec<Feature> = names.iter().enumerate().map(|(i, n)| Feature::state(i, *n)).collect();
    features.push(Feature::constant());
    for (i, n) in names.iter().enumerate() {
        features.push(Feature::new(format!("{n}^2"), vec![Factor::Power { index: i, power: 2 }]));
    }
    for (i, n) in names.iter().enumerate() {
        features.push(Feature::new(format!("sin({n})"), vec![Factor::Sin { coeffs: unit(2, &[(i, 1.0)]) }]));
    }
    for (i, n) in names.iter().enumerate() {
        features.push(Feature::new(format!("cos({n})"), vec![Factor::Cos { coeffs: unit(2, &[(i, 1.0)]) }]));
    }
    ObservableMap::new("single_pendulum", 2, features).expect("built-in map is valid")
}

fn double_pendulum_features(with_denominator: bool) -> Vec<Feature> {
    let n = 4;
    let rel = |k: f64| unit(n, &[(0, k), (1, -k)]);
    let sin = |c: Vec<f64>| Factor::Sin { coeffs: c };
    let cos = |c: Vec<f64>| Factor::Cos { coeffs: c };
    let sq = |index: usize| Factor::Power { index, power: 2 };
    let terms: Vec<(&str, Vec<Factor>)> = vec![
        ("sin(t1)", vec![sin(unit(n, &[(0, 1.0)]))]),
        ("sin(tr)", vec![sin(rel(1.0))]),
        ("sin(t1-2t2)", vec![sin(unit(n, &[(0, 1.0), (1, -2.0)]))]),
        ("sin(tr)cos(t1)", vec![sin(rel(1.0)), cos(unit(n, &[(0, 1.0)]))]),
        ("cos(tr)sin(t1)", vec![cos(rel(1.0)), sin(unit(n, &[(0, 1.0)]))]),
        ("dt1^2 sin(tr)", vec![sq(2), sin(rel(1.0))]),
        ("dt2^2 sin(tr)", vec![sq(3), sin(rel(1.0))]),
        ("dt1^2 sin(2tr)", vec![sq(2), sin(rel(2.0))]),
        ("dt2^2 sin(2tr)", vec![sq(3), sin(rel(2.0))]),
    ];
    let mut features: Vec<Feature> = ["t1", "t2", "dt1", "dt2"]
        .iter()
        .enumerate()
        .map(|(i, s)| Feature::state(i, *s))
        .collect();
    features.push(Feature::constant());
    for (label, mut factors) in terms {
        if with_denominator {
            factors.insert(0, Factor::InvCos { offset: 3.0, scale: -2.0, coeffs: rel(1.0) });
            features.push(Feature::new(format!("D*{label}"), factors));
        } else {
            features.push(Feature::new(label, factors));
        }
    }
    features
}

/// `[x; 1; D·(nine trigonometric terms)]` with `θr = θ₁ − θ₂` and
/// `D = 1/(3 − 2 cos θr) ∈ [1/5, 1]`.
pub fn double_pendulum_map() -> ObservableMap {
    ObservableMap::new("double_pendulum", 4, double_pendulum_features(true)).expect("built-in map is valid")
}

/// The double-pendulum map with the `D` factor removed (steady-state ablation).
pub fn double_pendulum_map_without_denominator() -> ObservableMap {
    ObservableMap::new("double_pendulum_no_denominator", 4, double_pendulum_features(false))
        .expect("built-in map is valid")
}

/// Looks up a built-in map by name.
pub fn named_map(name: &str) -> Result<ObservableMap> {
    match name {
        "single_pendulum" => Ok(single_pendulum_map()),
        "double_pendulum" => Ok(double_pendulum_map()),
        "double_pendulum_no_denominator" => Ok(double_pendulum_map_without_denominator()),
        other => Err(Error::param(format!("unknown observable map {other:?}"))),
    }
}
