use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, MatrixJson, Vector};

/// Controller matrix `K_u` (`d_u × d_{ψ_u}`) of the law `u = K_u·ψ_u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain(Matrix);

impl FeedbackGain {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feedback gain entries".into()));
        }
        Ok(Self(m))
    }

    pub fn zeros(input_dim: usize, feature_dim: usize) -> Self {
        Self(Matrix::zeros(input_dim, feature_dim))
    }

    pub fn input_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn apply(&self, psi_u: &Vector) -> Vector {
        &self.0 * psi_u
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }
}

impl Serialize for FeedbackGain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeedbackGain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix::try_from(MatrixJson::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Ok(Self(m))
    }
}
