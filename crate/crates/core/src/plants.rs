//! Control-affine plants `ẋ = f(x) + g(x)·u` and fixed-step RK4 discretization.
//!
//! Angles are measured from the upright (inverted) position, so the origin is
//! the unstable equilibrium the controllers have to stabilize. Gravity enters
//! with a destabilizing `+g·sin θ` sign.
//!
//! The double pendulum uses absolute link angles `θ₁, θ₂` (both from the
//! vertical) and point masses at the link tips:
//!
//! ```text
//! M(q) = [[(m₁+m₂)·l₁²,      m₂·l₁·l₂·cos θr],
//!         [m₂·l₁·l₂·cos θr,  m₂·l₂²         ]],   θr = θ₁ − θ₂
//! c(q, q̇) = [ m₂·l₁·l₂·sin θr·θ̇₂²,
//!            −m₂·l₁·l₂·sin θr·θ̇₁²]
//! G(q)    = [−(m₁+m₂)·g·l₁·sin θ₁,
//!            −m₂·g·l₂·sin θ₂]
//! M(q)·q̈ + c(q, q̇) + G(q) + b_j·q̇ = u
//! ```
//!
//! so the inputs are generalized torques on the absolute angle coordinates and
//! `g(x) = [0; M(q)⁻¹]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &Vector) -> Vector;
    fn control_field(&self, x: &Vector) -> Matrix;
    fn input_bounds(&self) -> Vec<(f64, f64)>;

    fn derivative(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.control_field(x) * u
    }

    /// Saturates each input channel to its bounds.
    fn clip(&self, u: &Vector) -> Vector {
        let bounds = self.input_bounds();
        Vector::from_iterator(
            u.len(),
            u.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(lo, hi)),
        )
    }
}

fn symmetric_bounds(bound: f64, n: usize) -> Vec<(f64, f64)> {
    vec![(-bound, bound); n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinglePendulum {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub input_bound: f64,
}

impl ControlAffine for SinglePendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &Vector) -> Vector {
        let inertia = self.mass * self.length * self.length;
        Vector::from_vec(vec![
            x[1],
            self.gravity / self.length * x[0].sin() - self.damping / inertia * x[1],
        ])
    }

    fn control_field(&self, _x: &Vector) -> Matrix {
        let inertia = self.mass * self.length * self.length;
        Matrix::from_column_slice(2, 1, &[0.0, 1.0 / inertia])
    }

    fn input_bounds(&self) -> Vec<(f64, f64)> {
        symmetric_bounds(self.input_bound, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublePendulum {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub gravity: f64,
    /// Viscous damping applied to each angular velocity.
    #[serde(default)]
    pub joint_damping: f64,
    pub input_bound: f64,
}

impl DoublePendulum {
    pub fn mass_matrix(&self, theta1: f64, theta2: f64) -> [[f64; 2]; 2] {
        let off = self.m2 * self.l1 * self.l2 * (theta1 - theta2).cos();
        [
            [(self.m1 + self.m2) * self.l1 * self.l1, off],
            [off, self.m2 * self.l2 * self.l2],
        ]
    }

    fn inverse_mass(&self, theta1: f64, theta2: f64) -> [[f64; 2]; 2] {
        let m = self.mass_matrix(theta1, theta2);
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        // Positive for positive parameters; NaN states fall through and are
        // caught as integration failures.
        assert!(!(det <= 0.0), "singular double-pendulum mass matrix");
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    }

    /// Kinetic plus potential energy (potential measured from the pivot).
    pub fn energy(&self, x: &Vector) -> f64 {
        let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let kinetic = 0.5 * (self.m1 + self.m2) * self.l1 * self.l1 * w1 * w1
            + 0.5 * self.m2 * self.l2 * self.l2 * w2 * w2
            + self.m2 * self.l1 * self.l2 * (t1 - t2).cos() * w1 * w2;
        let potential =
            self.gravity * ((self.m1 + self.m2) * self.l1 * t1.cos() + self.m2 * self.l2 * t2.cos());
        kinetic + potential
    }
}

impl ControlAffine for DoublePendulum {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &Vector) -> Vector {
        let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let sr = (t1 - t2).sin();
        let k = self.m2 * self.l1 * self.l2;
        let rhs = [
            -k * sr * w2 * w2 + (self.m1 + self.m2) * self.gravity * self.l1 * t1.sin()
                - self.joint_damping * w1,
            k * sr * w1 * w1 + self.m2 * self.gravity * self.l2 * t2.sin() - self.joint_damping * w2,
        ];
        let mi = self.inverse_mass(t1, t2);
        Vector::from_vec(vec![
            w1,
            w2,
            mi[0][0] * rhs[0] + mi[0][1] * rhs[1],
            mi[1][0] * rhs[0] + mi[1][1] * rhs[1],
        ])
    }

    fn control_field(&self, x: &Vector) -> Matrix {
        let mi = self.inverse_mass(x[0], x[1]);
        Matrix::from_row_slice(
            4,
            2,
            &[0.0, 0.0, 0.0, 0.0, mi[0][0], mi[0][1], mi[1][0], mi[1][1]],
        )
    }

    fn input_bounds(&self) -> Vec<(f64, f64)> {
        symmetric_bounds(self.input_bound, 2)
    }
}

/// Plant descriptor; serializes with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    SinglePendulum(SinglePendulum),
    DoublePendulum(DoublePendulum),
}

pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_INPUT_BOUND: f64 = 5.0;

pub fn single_pendulum(mass: f64, length: f64, damping: f64, gravity: f64) -> Result<Plant> {
    if !(mass > 0.0) || !(length > 0.0) {
        return Err(Error::param(format!(
            "pendulum mass and length must be positive (m = {mass}, L = {length})"
        )));
    }
    if !(damping >= 0.0) || !(gravity >= 0.0) {
        return Err(Error::param("damping and gravity must be non-negative"));
    }
    Ok(Plant::SinglePendulum(SinglePendulum {
        mass,
        length,
        damping,
        gravity,
        input_bound: DEFAULT_INPUT_BOUND,
    }))
}

pub fn double_pendulum(m1: f64, m2: f64, l1: f64, l2: f64, gravity: f64) -> Result<Plant> {
    if [m1, m2, l1, l2].iter().any(|v| !(*v > 0.0)) {
        return Err(Error::param("double pendulum masses and lengths must be positive"));
    }
    if !(gravity >= 0.0) {
        return Err(Error::param("gravity must be non-negative"));
    }
    Ok(Plant::DoublePendulum(DoublePendulum {
        m1,
        m2,
        l1,
        l2,
        gravity,
        joint_damping: 0.0,
        input_bound: DEFAULT_INPUT_BOUND,
    }))
}

impl Plant {
    pub fn with_input_bound(mut self, bound: f64) -> Self {
        match &mut self {
            Plant::SinglePendulum(p) => p.input_bound = bound,
            Plant::DoublePendulum(p) => p.input_bound = bound,
        }
        self
    }

    fn inner(&self) -> &dyn ControlAffine {
        match self {
            Plant::SinglePendulum(p) => p,
            Plant::DoublePendulum(p) => p,
        }
    }
}

impl ControlAffine for Plant {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }

    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn drift(&self, x: &Vector) -> Vector {
        self.inner().drift(x)
    }

    fn control_field(&self, x: &Vector) -> Matrix {
        self.inner().control_field(x)
    }

    fn input_bounds(&self) -> Vec<(f64, f64)> {
        self.inner().input_bounds()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub steps: usize,
}

impl IntegratorConfig {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        let cfg = Self { dt, steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::param(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(Error::param("steps per trajectory must be at least 1"));
        }
        Ok(())
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { dt: 0.01, steps: 100 }
    }
}

/// One classical RK4 step with the input held constant over the step.
pub fn rk4_step<P: ControlAffine + ?Sized>(plant: &P, x: &Vector, u: &Vector, dt: f64) -> Result<Vector> {
    let k1 = plant.derivative(x, u);
    let k2 = plant.derivative(&(x + &k1 * (dt / 2.0)), u);
    let k3 = plant.derivative(&(x + &k2 * (dt / 2.0)), u);
    let k4 = plant.derivative(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationFailure { step: 0 })
    }
}

/// States `x_0..x_T` and the inputs `u_0..u_{T-1}` applied between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    /// Step at which integration produced a non-finite state, if any. The
    /// trajectory is truncated before that step.
    pub failed_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.failed_at.is_some()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// `(x_k, u_k, x_{k+1})` for `k = 0..T-1`.
    pub fn snapshots(&self) -> impl Iterator<Item = (&Vector, &Vector, &Vector)> {
        self.inputs
            .iter()
            .enumerate()
            .map(move |(k, u)| (&self.states[k], u, &self.states[k + 1]))
    }

    /// Writes one row per step (`k, x…, u…`) plus a final row carrying `x_T`
    /// with empty input columns.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let dx = self.states[0].len();
        let du = self.inputs.first().map_or(0, |u| u.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=dx).map(|i| format!("x{i}")));
        header.extend((1..=du).map(|i| format!("u{i}")));
        out.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match self.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), du)),
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Like [`Trajectory::write_csv`], preceded by a `# comment` line.
    pub fn write_csv_with_comment<W: std::io::Write>(&self, mut w: W, comment: &str) -> Result<()> {
        writeln!(w, "# {comment}")?;
        self.write_csv(w)
    }

    /// Reads the format of [`Trajectory::write_csv`]; `#` comment lines are skipped.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header = rdr.headers()?.clone();
        let dx = header.iter().filter(|h| h.starts_with('x')).count();
        let du = header.iter().filter(|h| h.starts_with('u')).count();
        if header.len() != 1 + dx + du {
            return Err(Error::dim("unexpected trajectory csv header"));
        }
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::param(format!("bad number {s:?} in trajectory csv: {e}")))
        };
        for rec in rdr.records() {
            let rec = rec?;
            let x = (1..=dx).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            states.push(Vector::from_vec(x));
            if du > 0 && !rec[1 + dx].is_empty() {
                let u = (0..du).map(|i| parse(&rec[1 + dx + i])).collect::<Result<Vec<_>>>()?;
                inputs.push(Vector::from_vec(u));
            }
        }
        if states.is_empty() || states.len() != inputs.len() + 1 {
            return Err(Error::dim("trajectory csv must hold T input rows and T+1 states"));
        }
        Ok(Self { states, inputs, failed_at: None })
    }
}

/// Rolls the plant forward `steps` times. `policy(k, x_k)` supplies the input,
/// which is clipped to the plant bounds before integration. A non-finite state
/// stops the rollout and records the failing step.
pub fn rollout<P, F>(plant: &P, x0: &Vector, mut policy: F, steps: usize, dt: f64) -> Trajectory
where
    P: ControlAffine + ?Sized,
    F: FnMut(usize, &Vector) -> Vector,
{
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    states.push(x0.clone());
    for k in 0..steps {
        let x = &states[k];
        let u = plant.clip(&policy(k, x));
        if u.iter().any(|v| !v.is_finite()) {
            return Trajectory { states, inputs, failed_at: Some(k) };
        }
        match rk4_step(plant, x, &u, dt) {
            Ok(next) => {
                inputs.push(u);
                states.push(next);
            }
            Err(_) => return Trajectory { states, inputs, failed_at: Some(k) },
        }
    }
    Trajectory { states, inputs, failed_at: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn reference_single() -> Plant {
        single_pendulum(1.0, 1.0, 0.3, 9.81).unwrap()
    }

    fn unit_double() -> Plant {
        double_pendulum(1.0, 1.0, 1.0, 1.0, 9.81).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    struct Decay;

    impl ControlAffine for Decay {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &Vector) -> Vector {
            -x
        }
        fn control_field(&self, _x: &Vector) -> Matrix {
            Matrix::zeros(1, 1)
        }
        fn input_bounds(&self) -> Vec<(f64, f64)> {
            vec![(-1.0, 1.0)]
        }
    }

    #[test]
    fn single_pendulum_vector_field() {
        let p = reference_single();
        assert_eq!(p.drift(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
        let f = p.drift(&v(&[FRAC_PI_2, 0.0]));
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 9.81).abs() < 1e-12);
        for x in [v(&[0.3, -2.0]), v(&[-3.0, 5.0])] {
            assert_eq!(p.control_field(&x), Matrix::from_column_slice(2, 1, &[0.0, 1.0]));
        }
    }

    #[test]
    fn constructors_reject_bad_parameters() {
        assert!(single_pendulum(0.0, 1.0, 0.3, 9.81).is_err());
        assert!(single_pendulum(1.0, -1.0, 0.3, 9.81).is_err());
        assert!(double_pendulum(1.0, 1.0, 0.0, 1.0, 9.81).is_err());
        assert!(IntegratorConfig::new(0.0, 10).is_err());
        assert!(IntegratorConfig::new(0.01, 0).is_err());
    }

    #[test]
    fn double_pendulum_equilibrium_and_mass_matrix() {
        let p = unit_double();
        assert_eq!(p.drift(&Vector::zeros(4)), Vector::zeros(4));
        let Plant::DoublePendulum(dp) = &p else { unreachable!() };
        assert_eq!(dp.mass_matrix(0.4, 0.4), [[2.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn rk4_matches_taylor_polynomial() {
        let h: f64 = 0.1;
        let expected = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let next = rk4_step(&Decay, &v(&[1.0]), &v(&[0.0]), h).unwrap();
        assert!((next[0] - expected).abs() < 1e-15);
        assert!((next[0] - 0.904_837_5).abs() < 1e-8);
    }

    #[test]
    fn rk4_keeps_equilibrium() {
        let p = reference_single();
        assert_eq!(rk4_step(&p, &v(&[0.0, 0.0]), &v(&[0.0]), 0.01).unwrap(), v(&[0.0, 0.0]));
    }

    fn endpoint(p: &Plant, x0: &Vector, dt: f64) -> Vector {
        let n = (1.0 / dt).round() as usize;
        rollout(p, x0, |_, _| v(&[0.5]), n, dt).final_state().clone()
    }

    #[test]
    fn rk4_is_fourth_order_on_single_pendulum() {
        let p = reference_single();
        let x0 = v(&[1.0, 0.5]);
        let reference = endpoint(&p, &x0, 1e-4);
        let e1 = (endpoint(&p, &x0, 0.02) - &reference).norm();
        let e2 = (endpoint(&p, &x0, 0.01) - &reference).norm();
        let order = (e1 / e2).log2();
        assert!((3.7..=4.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn double_pendulum_energy_drift_is_fourth_order() {
        let p = unit_double();
        let Plant::DoublePendulum(dp) = &p else { unreachable!() };
        let x0 = v(&[0.3, -0.2, 0.0, 0.0]);
        let e0 = dp.energy(&x0);
        let drift = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let tr = rollout(&p, &x0, |_, _| Vector::zeros(2), n, dt);
            (dp.energy(tr.final_state()) - e0).abs()
        };
        let coarse = drift(0.01);
        let fine = drift(0.001);
        // The fall from near upright whips the second link, so the coarse
        // drift is visible; what matters is the fourth-order decay.
        assert!(coarse < 1e-3 * e0.abs(), "energy drift {coarse}");
        let order = (coarse / fine).log10();
        assert!((3.5..=4.5).contains(&order), "observed order {order}");
    }

    #[test]
    fn control_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [reference_single(), unit_double()] {
            for _ in 0..50 {
                let x = Vector::from_fn(p.state_dim(), |_, _| rng.random_range(-PI..PI));
                let u1 = Vector::from_fn(p.input_dim(), |_, _| rng.random_range(-5.0..5.0));
                let u2 = Vector::from_fn(p.input_dim(), |_, _| rng.random_range(-5.0..5.0));
                let a: f64 = rng.random();
                let lhs = p.derivative(&x, &(&u1 * a + &u2 * (1.0 - a)));
                let rhs = p.derivative(&x, &u1) * a + p.derivative(&x, &u2) * (1.0 - a);
                assert!((lhs - rhs).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_control_at_origin_stays_put() {
        let p = reference_single();
        let tr = rollout(&p, &v(&[0.0, 0.0]), |_, _| v(&[0.0]), 100, 0.01);
        assert_eq!(tr.len(), 100);
        assert!(tr.states.iter().all(|x| *x == v(&[0.0, 0.0])));
    }

    #[test]
    fn upright_is_unstable() {
        let p = reference_single();
        let tr = rollout(&p, &v(&[0.1, 0.0]), |_, _| v(&[0.0]), 50, 0.01);
        assert!(tr.states.windows(2).all(|w| w[1][0] > w[0][0]));
    }

    #[test]
    fn rollout_clips_and_replays() {
        let p = unit_double();
        let tr = rollout(&p, &v(&[0.5, -1.0, 2.0, 0.0]), |k, _| v(&[100.0, -3.0 * k as f64]), 100, 0.01);
        assert!(!tr.failed());
        for (x, u, next) in tr.snapshots() {
            assert!(u.iter().all(|c| c.abs() <= 5.0));
            assert_eq!(&rk4_step(&p, x, u, 0.01).unwrap(), next);
        }
    }

    #[test]
    fn non_finite_state_flags_failure() {
        let p = reference_single();
        let tr = rollout(&p, &v(&[f64::NAN, 0.0]), |_, _| v(&[0.0]), 10, 0.01);
        assert_eq!(tr.failed_at, Some(0));
        assert!(tr.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let p = reference_single();
        let tr = rollout(&p, &v(&[0.3, -1.7]), |_, x| v(&[-3.0 * x[0]]), 20, 0.01);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,x1,x2,u1\n"));
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }
}
