//! Central finite-difference checks for analytic gradients.
//!
//! The error of one coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`; a check reports the maximum over the coordinates
//! it visits.

use crate::error::{shape, Result};
use crate::rng::rng_from_seed;
use crate::tensorops::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor that keeps near-zero gradients from amplifying
/// round-off into large relative errors.
pub const REL_FLOOR: f64 = 1e-5;
/// Pass threshold used throughout the test suites and the CLI.
pub const REL_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn central_difference<F>(
    f: &mut F,
    inputs: &mut [Tensor],
    which: usize,
    idx: usize,
    eps: f64,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let orig = inputs[which].data()[idx];
    inputs[which].data_mut()[idx] = orig + eps;
    let plus = f(inputs);
    inputs[which].data_mut()[idx] = orig - eps;
    let minus = f(inputs);
    inputs[which].data_mut()[idx] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Maximum relative error between `analytic[i]` and the central differences
/// of the scalar function `f` with respect to every element of `inputs[i]`.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    finite_difference_check_at(f, inputs, analytic, eps, &coords)
}

/// Like [`finite_difference_check`] but only at the listed
/// `(input, element)` coordinates.
pub fn finite_difference_check_at<F>(
    mut f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(shape("one analytic gradient per input"));
    }
    for (x, g) in inputs.iter().zip(analytic) {
        x.same_shape(g, "finite_difference_check")?;
    }
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, k) in coords {
        let numeric = central_difference(&mut f, &mut work, i, k, eps);
        worst = worst.max(relative_error(analytic[i].data()[k], numeric));
    }
    Ok(worst)
}

/// Checks an op's backward: the op output is contracted with fixed random
/// weights `R` to form the scalar `sum(R * op(inputs))`, whose gradient is
/// `backward(inputs, R)`.
pub fn check_op<Fw, Bw>(forward: Fw, backward: Bw, inputs: &[Tensor], seed: u64) -> Result<f64>
where
    Fw: Fn(&[Tensor]) -> Result<Tensor>,
    Bw: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    let out = forward(inputs)?;
    let weights = Tensor::uniform(out.shape(), 1.0, &mut rng_from_seed(seed));
    let analytic = backward(inputs, &weights)?;
    finite_difference_check(
        |xs| {
            forward(xs)
                .and_then(|y| y.dot(&weights))
                .unwrap_or(f64::NAN)
        },
        inputs,
        &analytic,
        FD_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::ops;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng_from_seed(3));
        let w = Tensor::uniform(&[4, 2], 1.0, &mut rng_from_seed(4));
        let err = check_op(
            |xs| ops::matmul(&xs[0], &xs[1]),
            |xs, dy| {
                let (da, db) = ops::matmul_backward(&xs[0], &xs[1], dy);
                Ok(vec![da, db])
            },
            &[x, w],
            9,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::uniform(&[3, 3], 1.0, &mut rng_from_seed(5));
        let err = check_op(
            |xs| Ok(ops::elu_plus_one(&xs[0])),
            |xs, dy| Ok(vec![ops::elu_plus_one_backward(&xs[0], dy).scale(1.1)]),
            &[x],
            1,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-6);
    }
}
