//! Central finite-difference oracle for graph gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// Coordinates that exceeded `rtol` but whose discrepancy is within the
    /// rounding error of the difference quotient itself.
    pub roundoff_limited: usize,
}

/// Checks the analytic gradient of a scalar function of one tensor.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: T, rtol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step, rtol)
}

/// Checks the analytic gradient of a scalar function of several tensors.
///
/// Each coordinate is compared with `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
/// The relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// A coordinate also passes when `|analytic − numeric|` is below the rounding
/// floor of the quotient, `4·ε·max(|f(x ± h·e_i)|) / 2h`, since no finite
/// difference can resolve anything smaller; such coordinates are counted in
/// [`GradCheckReport::roundoff_limited`].
pub fn finite_diff_check_many<T, F>(f: F, xs: &[Tensor<T>], step: T, rtol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::contract("gradient check needs a scalar function"));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::Oracle(format!("function evaluated to {y}")));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut work = xs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut coordinates = 0;
    let mut roundoff_limited = 0;
    let mut passed = true;
    let eps = T::epsilon().to_f64_lossy();
    let two_h = (step + step).to_f64_lossy();
    for (t, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;

            let numeric = (plus - minus).to_f64_lossy() / two_h;
            let a = analytic[t].data()[i].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::Oracle(format!("non-finite error at input {t}, index {i}")));
            }
            if rel > rtol {
                let floor = 4.0 * eps * plus.abs().max(minus.abs()).to_f64_lossy() / two_h;
                if (a - numeric).abs() <= floor {
                    roundoff_limited += 1;
                } else {
                    passed = false;
                }
            }
            if rel > max_rel {
                max_rel = rel;
                worst = (t, i);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        passed,
        max_rel_error: max_rel,
        worst,
        coordinates,
        roundoff_limited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let r = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-5, 1e-10).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(3, 5, 1.0, &mut rng);
        let r = finite_diff_check(
            |g, v| {
                let s = g.softmax_rows(v)?;
                Ok(g.sum(s))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn two_layer_network_cross_entropy() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(5, 4, 1.0, &mut rng);
            let w1 = Tensor::<f64>::randn(4, 6, 0.5, &mut rng);
            let b1 = Tensor::<f64>::randn(1, 6, 0.5, &mut rng);
            let w2 = Tensor::<f64>::randn(6, 3, 0.5, &mut rng);
            let labels = [0, 2, 1, 1, 0];
            let r = finite_diff_check_many(
                |g, v| {
                    let x = g.constant(x.clone());
                    let h = g.matmul(x, v[0])?;
                    let h = g.add_row(h, v[1])?;
                    let h = g.tanh(h);
                    let o = g.matmul(h, v[2])?;
                    g.cross_entropy(o, &labels)
                },
                &[w1, b1, w2],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                // value is 2·sum(x), analytic gradient only sees one copy
                let c = g.constant(g.value(v).clone());
                let a = g.sum(v);
                let b = g.sum(c);
                let s = g.add(a, b)?;
                Ok(s)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_function_is_an_oracle_error() {
        let x = Tensor::<f64>::from_rows(&[&[1.0]]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let big = g.scale(v, f64::MAX);
                let big = g.scale(big, 10.0);
                Ok(g.sum(big))
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
