//! Identification of bilinear Koopman models for control-affine plants and
//! synthesis of feature-linear feedback through a Lyapunov LMI.
//!
//! The workflow runs in stages: [`babbling`] collects trajectories under
//! random feature feedback, [`factorization`] finds the selection and
//! measurement pair `(S, H)`, [`edmd`] fits `K_xx` and `K_xu`, [`lmi`]
//! synthesizes the gain `K_u`, and [`evaluation`] checks the closed loop on
//! the true plant.

pub mod babbling;
pub mod config;
pub mod edmd;
pub mod error;
pub mod evaluation;
pub mod factorization;
pub mod gain;
pub mod linalg;
pub mod lmi;
pub mod observables;
pub mod pipeline;
pub mod plants;

pub use error::{Error, Result};
pub use gain::FeedbackGain;
pub use linalg::{Matrix, SymmetricMatrix, Vector};
