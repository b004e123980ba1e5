//! Simplex equiangular tight frames.
//!
//! `W* = c · U (I_K − 11ᵀ/K)` with `UᵀU = I_K`. Its Gram matrix is
//! `c² (I_K − 11ᵀ/K)`, which is what the ETF-mixed retrieve applies along the
//! task axis of the retrieve logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar in front of `U (I − 11ᵀ/K)`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleConvention {
    /// `√(K/(K−1))`: unit-norm vertices.
    #[default]
    Sqrt,
    /// `K/(K−1)`.
    Linear,
}

impl ScaleConvention {
    pub fn factor(self, k: usize) -> f64 {
        let r = k as f64 / (k as f64 - 1.0);
        match self {
            ScaleConvention::Sqrt => r.sqrt(),
            ScaleConvention::Linear => r,
        }
    }
}

impl std::str::FromStr for ScaleConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(ScaleConvention::Sqrt),
            "linear" => Ok(ScaleConvention::Linear),
            other => Err(Error::contract(format!("unknown ETF scale convention {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtfFrame<T> {
    etf_k: usize,
    dim: usize,
    basis: Tensor<T>,
    w_star: Tensor<T>,
    gram: Tensor<T>,
    convention: ScaleConvention,
}

impl<T: Scalar> EtfFrame<T> {
    pub fn etf_k(&self) -> usize {
        self.etf_k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Orthonormal `U`, `dim × etf_k`.
    pub fn basis(&self) -> &Tensor<T> {
        &self.basis
    }

    pub fn w_star(&self) -> &Tensor<T> {
        &self.w_star
    }

    /// `c² (I − 11ᵀ/K)`, evaluated in closed form.
    pub fn gram(&self) -> &Tensor<T> {
        &self.gram
    }

    pub fn convention(&self) -> ScaleConvention {
        self.convention
    }

    /// Same frame with the Gram replaced, for ablations such as identity mixing.
    pub fn with_gram(&self, gram: Tensor<T>) -> Result<Self> {
        if gram.shape() != [self.etf_k, self.etf_k] {
            return Err(Error::dim("etf_with_gram", &[self.etf_k, self.etf_k], gram.shape()));
        }
        Ok(EtfFrame { gram, ..self.clone() })
    }
}

/// Builds a frame from a seeded Gaussian `dim × etf_k` matrix, orthonormalized.
pub fn build_etf<T: Scalar>(etf_k: usize, dim: usize, seed: u64, convention: ScaleConvention) -> Result<EtfFrame<T>> {
    check_sizes(etf_k, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = Tensor::<T>::randn(dim, etf_k, T::one(), &mut rng);
    let basis = orthonormalize_columns(&gaussian)?;
    build_etf_from_basis(basis, convention)
}

/// Builds a frame from a caller-supplied `U`, which must have orthonormal
/// columns to within `1e-10`.
pub fn build_etf_from_basis<T: Scalar>(basis: Tensor<T>, convention: ScaleConvention) -> Result<EtfFrame<T>> {
    basis.expect_matrix("build_etf")?;
    let (dim, etf_k) = (basis.rows(), basis.cols());
    check_sizes(etf_k, dim)?;
    let utu = basis.transpose()?.matmul(&basis)?;
    if utu.max_abs_diff(&Tensor::eye(etf_k))?.to_f64_lossy() > 1e-10 {
        return Err(Error::contract("ETF basis columns are not orthonormal"));
    }
    let c = T::lit(convention.factor(etf_k));
    let kk = T::from_usize_lossy(etf_k);
    let centering = Tensor::from_fn(etf_k, etf_k, |i, j| {
        let delta = if i == j { T::one() } else { T::zero() };
        delta - T::one() / kk
    });
    let w_star = basis.matmul(&centering)?.scale(c);
    let gram = centering.scale(c * c);
    Ok(EtfFrame {
        etf_k,
        dim,
        basis,
        w_star,
        gram,
        convention,
    })
}

fn check_sizes(etf_k: usize, dim: usize) -> Result<()> {
    if etf_k < 2 {
        return Err(Error::contract(format!(
            "an ETF needs at least 2 vertices, got {etf_k}"
        )));
    }
    if dim < etf_k {
        return Err(Error::contract(format!(
            "ETF dimension {dim} is smaller than the vertex count {etf_k}"
        )));
    }
    Ok(())
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormalize_columns<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut q: Vec<Vec<T>> = (0..cols).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
    for j in 0..cols {
        for _ in 0..2 {
            for p in 0..j {
                let (done, rest) = q.split_at_mut(j);
                let dot: T = done[p].iter().zip(&rest[0]).map(|(&x, &y)| x * y).sum();
                for (v, &u) in rest[0].iter_mut().zip(&done[p]) {
                    *v -= dot * u;
                }
            }
        }
        let norm = q[j].iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm.to_f64_lossy() < 1e-12 {
            return Err(Error::contract("rank-deficient matrix cannot be orthonormalized"));
        }
        for v in q[j].iter_mut() {
            *v /= norm;
        }
    }
    Ok(Tensor::from_fn(rows, cols, |i, j| q[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{kem_retrieve, skem_retrieve, KemParams, MemorySlots, TaskFeatureBlock};

    fn col(t: &Tensor<f64>, j: usize) -> Vec<f64> {
        (0..t.rows()).map(|i| t.get(i, j)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn two_vertex_closed_form() {
        let f = build_etf_from_basis::<f64>(Tensor::eye(2), ScaleConvention::Sqrt).unwrap();
        let s = 2f64.sqrt();
        let expect = Tensor::from_rows(&[&[0.5 * s, -0.5 * s], &[-0.5 * s, 0.5 * s]]).unwrap();
        assert!(f.w_star().max_abs_diff(&expect).unwrap() < 1e-15);
        let (a, b) = (col(f.w_star(), 0), col(f.w_star(), 1));
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!((dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_rows_sum_to_zero_and_match_w_star() {
        let f = build_etf::<f64>(3, 4, 7, ScaleConvention::Sqrt).unwrap();
        let computed = f.w_star().transpose().unwrap().matmul(f.w_star()).unwrap();
        for i in 0..3 {
            let s: f64 = computed.row(i).iter().sum();
            assert!(s.abs() < 1e-12, "row {i} sums to {s}");
            let s: f64 = f.gram().row(i).iter().sum();
            assert!(s.abs() < 1e-12);
        }
        assert!(computed.max_abs_diff(f.gram()).unwrap() < 1e-12);
    }

    #[test]
    fn size_preconditions() {
        assert!(build_etf::<f64>(1, 4, 0, ScaleConvention::Sqrt).is_err());
        assert!(build_etf::<f64>(5, 4, 0, ScaleConvention::Sqrt).is_err());
        let skew = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]).unwrap();
        assert!(build_etf_from_basis::<f64>(skew, ScaleConvention::Sqrt).is_err());
    }

    #[test]
    fn conventions_differ_by_positive_scalar() {
        let s = build_etf::<f64>(4, 6, 3, ScaleConvention::Sqrt).unwrap();
        let l = build_etf::<f64>(4, 6, 3, ScaleConvention::Linear).unwrap();
        let ratio = 4.0 / 3.0;
        assert!(l.gram().max_abs_diff(&s.gram().scale(ratio)).unwrap() < 1e-12);
        assert_eq!(s.basis(), l.basis());
    }

    #[test]
    fn identity_gram_reduces_to_plain_retrieve() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = TaskFeatureBlock::new(3, 4, Tensor::<f64>::randn(12, 5, 1.0, &mut rng)).unwrap();
        let r = MemorySlots::init(2, 5, &mut rng);
        let p = KemParams::init(5, 3, &mut rng);
        let frame = build_etf::<f64>(3, 5, 1, ScaleConvention::Sqrt)
            .unwrap()
            .with_gram(Tensor::eye(3))
            .unwrap();
        assert_eq!(
            skem_retrieve(&f, &r, &p, &frame).unwrap(),
            kem_retrieve(&f, &r, &p).unwrap()
        );
    }

    #[test]
    fn skem_requires_matching_task_count() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = TaskFeatureBlock::new(2, 3, Tensor::<f64>::randn(6, 4, 1.0, &mut rng)).unwrap();
        let r = MemorySlots::init(2, 4, &mut rng);
        let p = KemParams::init(4, 2, &mut rng);
        let frame = build_etf::<f64>(3, 4, 1, ScaleConvention::Sqrt).unwrap();
        assert!(matches!(skem_retrieve(&f, &r, &p, &frame), Err(Error::Contract(_))));
    }
}
