//! Parameter initialization.
//!
//! Projections use Xavier-uniform, `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`;
//! memory slots use `normal(0, 1/√d)`.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(fan_in, fan_out, T::lit(bound), rng)
}

pub fn slot_init<T: Scalar, R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(len, width, T::lit(1.0 / (width as f64).sqrt()), rng)
}

/// Human-readable description of the initialization scheme, echoed in reports.
pub const INIT_DESCRIPTION: &str =
    "projections xavier_uniform(+-sqrt(6/(fan_in+fan_out))); memory slots normal(0, 1/sqrt(d))";
