//! Small dense linear algebra: Kronecker and Hadamard products, symmetric
//! spectra and block positive-semidefiniteness checks.
//!
//! Everything here works on `nalgebra` dynamic matrices. The problems in this
//! toolkit never exceed a few dozen rows, so no sparse storage is used.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Absolute tolerance on the smallest eigenvalue when deciding `M ⪰ 0`.
pub const PSD_TOL: f64 = 1e-9;

/// Kronecker product; block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

/// Kronecker product of two column vectors.
pub fn kron_vec(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() * b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i * b.len() + j] = ai * bj;
        }
    }
    out
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "hadamard operands have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.component_mul(b))
}

pub fn ones(n: usize) -> Vector {
    Vector::from_element(n, 1.0)
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `‖m‖_∞` taken elementwise.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// A square matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(Matrix);

impl SymmetricMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`. Fails on non-square or non-finite input.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !all_finite(&m) {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        let t = m.transpose();
        Ok(Self((m + t) * 0.5))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        // Householder tridiagonalization followed by implicit symmetric QR.
        self.0.clone().symmetric_eigenvalues().min()
    }

    pub fn eigenvalues(&self) -> Vector {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(SymmetricMatrix::new(m.clone())?.min_eigenvalue())
}

/// Assembles `[[p, b], [bᵀ, c]]`.
pub fn block_2x2(p: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    if !p.is_square() || !c.is_square() || b.nrows() != p.nrows() || b.ncols() != c.nrows() {
        return Err(Error::dim(format!(
            "blocks P {:?}, B {:?}, C {:?} are not conformable",
            p.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let (n, m) = b.shape();
    let mut out = Matrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(p);
    out.view_mut((0, n), (n, m)).copy_from(b);
    out.view_mut((n, 0), (m, n)).copy_from(&b.transpose());
    out.view_mut((n, n), (m, m)).copy_from(c);
    Ok(out)
}

/// True iff `[[p, b], [bᵀ, c]] ⪰ 0`, tested on the assembled block matrix.
pub fn schur_psd_check(p: &SymmetricMatrix, b: &Matrix, c: &SymmetricMatrix) -> Result<bool> {
    let m = block_2x2(p.as_matrix(), b, c.as_matrix())?;
    Ok(SymmetricMatrix::new(m)?.is_psd(PSD_TOL))
}

/// JSON form of a matrix: `{rows, cols, data}` with `data` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixJson> for Matrix {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Self> {
        if j.data.len() != j.rows * j.cols {
            return Err(Error::dim(format!(
                "matrix json declares {}x{} but carries {} entries",
                j.rows,
                j.cols,
                j.data.len()
            )));
        }
        if j.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix json entries".into()));
        }
        Ok(Matrix::from_row_slice(j.rows, j.cols, &j.data))
    }
}

/// `#[serde(with = "crate::linalg::matrix_serde")]` adapter for [`Matrix`] fields.
pub mod matrix_serde {
    use super::{Matrix, MatrixJson};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        Matrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// Adapter for `Option<Matrix>` fields.
pub mod opt_matrix_serde {
    use super::{Matrix, MatrixJson};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(MatrixJson::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
        Option::<MatrixJson>::deserialize(d)?
            .map(Matrix::try_from)
            .transpose()
            .map_err(serde::de::Error::custom)
    }
}

/// Adapter for `f64` fields that may be infinite: JSON has no infinity, so
/// `±∞` and NaN are written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, \"inf\", \"-inf\" or \"nan\", got {other:?}"))),
            },
        }
    }
}

impl Serialize for SymmetricMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymmetricMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix::try_from(MatrixJson::deserialize(d)?).map_err(serde::de::Error::custom)?;
        SymmetricMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Cyclic Jacobi rotations; independent of the tridiagonal QR path.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut rot = Matrix::identity(n, n);
                    rot[(p, p)] = c;
                    rot[(q, q)] = c;
                    rot[(p, q)] = s;
                    rot[(q, p)] = -s;
                    a = rot.transpose() * &a * &rot;
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    #[test]
    fn kron_of_row_vectors() {
        let a = Matrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = Matrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(kron(&a, &b), Matrix::from_row_slice(1, 4, &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn kron_identity_is_block_diagonal() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = kron(&Matrix::identity(2, 2), &m);
        assert_eq!(k.shape(), (4, 6));
        assert_eq!(k.view((0, 0), (2, 3)), m);
        assert_eq!(k.view((2, 3), (2, 3)), m);
        assert!(k.view((0, 3), (2, 3)).iter().all(|v| *v == 0.0));
        assert!(k.view((2, 0), (2, 3)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kron_vec_matches_matrix_kron() {
        let a = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = Vector::from_vec(vec![3.0, 4.0]);
        let m = kron(&Matrix::from_column_slice(3, 1, a.as_slice()), &Matrix::from_column_slice(2, 1, b.as_slice()));
        assert_eq!(kron_vec(&a, &b).as_slice(), m.as_slice());
    }

    #[test]
    fn hadamard_examples() {
        let a = Vector::from_vec(vec![1.0, 0.0, 2.0]);
        let b = Vector::from_vec(vec![5.0, 7.0, 3.0]);
        assert_eq!(hadamard(&a, &b).unwrap().as_slice(), &[5.0, 0.0, 6.0]);
        assert_eq!(hadamard(&a, &ones(3)).unwrap(), a);
        assert!(matches!(hadamard(&a, &ones(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn min_eigenvalue_examples() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 5.0]));
        assert!((min_eigenvalue(&d).unwrap() - 2.0).abs() < 1e-14);
        let swap = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((min_eigenvalue(&swap).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn min_eigenvalue_rejects_non_finite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(min_eigenvalue(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn min_eigenvalue_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let g = random(&mut rng, 6, 6);
            let s = &g + g.transpose();
            let ev = jacobi_eigenvalues(&s);
            let got = min_eigenvalue(&s).unwrap();
            let scale = ev.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
            assert!((got - ev[0]).abs() <= 1e-9 * scale, "{got} vs {}", ev[0]);
        }
    }

    #[test]
    fn schur_examples() {
        let i2 = SymmetricMatrix::identity(2);
        assert!(schur_psd_check(&i2, &Matrix::zeros(2, 2), &i2).unwrap());
        let i1 = SymmetricMatrix::identity(1);
        assert!(!schur_psd_check(&i1, &Matrix::from_element(1, 1, 2.0), &i1).unwrap());
        assert!(matches!(
            schur_psd_check(&i2, &Matrix::zeros(1, 2), &i2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn schur_gram_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random(&mut rng, 3, 5);
            let full = g.transpose() * &g;
            let p = SymmetricMatrix::new(full.view((0, 0), (2, 2)).into_owned()).unwrap();
            let b = full.view((0, 2), (2, 3)).into_owned();
            let c = SymmetricMatrix::new(full.view((2, 2), (3, 3)).into_owned()).unwrap();
            assert!(schur_psd_check(&p, &b, &c).unwrap());
        }
    }

    #[test]
    fn matrix_json_is_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let j = MatrixJson::from(&m);
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = MatrixJson { rows: 2, cols: 2, data: vec![1.0] };
        assert!(Matrix::try_from(bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matrix_json_round_trips(rows in 0usize..5, cols in 0usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 1e6 - 5e5);
            let text = serde_json::to_string(&MatrixJson::from(&m)).unwrap();
            let back: MatrixJson = serde_json::from_str(&text).unwrap();
            proptest::prop_assert_eq!(Matrix::try_from(back).unwrap(), m);
        }
    }

    #[test]
    fn extended_floats_survive_json() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct W(#[serde(with = "extended_f64")] f64);
        for v in [1.25, f64::INFINITY, f64::NEG_INFINITY] {
            let text = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&text).unwrap().0, v);
        }
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert!(serde_json::from_str::<W>("\"nan\"").unwrap().0.is_nan());
        assert!(serde_json::from_str::<W>("\"big\"").is_err());
    }
}
