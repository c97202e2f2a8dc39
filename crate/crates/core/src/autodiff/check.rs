//! Finite-difference gradient checking.

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare the tape's analytic gradients against central finite differences.
///
/// `build` receives a fresh tape plus the leaf nodes for `params` (in order)
/// and must return a scalar terminal node. Every parameter entry is
/// perturbed by `±fd_step`; the returned value is the maximum over all
/// entries of
///
/// `|analytic - central| / max(1e-8, |analytic| + |central|)`.
///
/// Runs in 64-bit; NaN in either estimate is an error.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    if fd_step <= 0.0 {
        return Err(Error::invalid("fd_step must be positive"));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let terminal = build(&mut tape, &ids)?;
        Ok(tape.value(terminal).data()[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let terminal = build(&mut tape, &ids)?;
    let grads = tape.backward_unit(terminal)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for ei in 0..params[pi].shape().count() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + fd_step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - fd_step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * fd_step);
            let a = analytic.data()[ei];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check at param {pi} entry {ei}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn rng_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        // f(x) = sum(x^2): analytic gradient 2x.
        let x = rng_tensor(Shape::new(1, 2, 3, 3), 1);
        let err = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = rng_tensor(Shape::new(1, 1, 2, 2), 2);
        let err = grad_check(
            |tape, ids| {
                let z = tape.scale(ids[0], 0.0);
                Ok(tape.sum(z))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_stack_gradients_pass() {
        let x = rng_tensor(Shape::new(1, 2, 5, 5), 3);
        let w = rng_tensor(Shape::new(3, 2, 3, 3), 4);
        let b = rng_tensor(Shape::new(1, 3, 1, 1), 5);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, 1, 1, 1)?;
                let y = tape.add_bias(y, ids[2])?;
                let y = tape.relu(y);
                Ok(tape.sum(y))
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn transposed_conv_gradients_pass() {
        let x = rng_tensor(Shape::new(1, 3, 4, 4), 6);
        let w = rng_tensor(Shape::new(3, 2, 2, 2), 7);
        let b = rng_tensor(Shape::new(1, 2, 1, 1), 8);
        let err = grad_check(
            |tape, ids| {
                let y = tape.transposed_conv2d(ids[0], ids[1], Some(ids[2]), 2, 0)?;
                Ok(tape.sum(y))
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn batch_norm_gradients_pass() {
        // Probe through a random linear functional: summing a symmetric
        // function of the normalized output leaves near-zero gradients
        // w.r.t. x, which central differences cannot resolve.
        let x = rng_tensor(Shape::new(2, 3, 4, 4), 9);
        let gamma = rng_tensor(Shape::new(1, 3, 1, 1), 10).map(|v| v + 2.0);
        let beta = rng_tensor(Shape::new(1, 3, 1, 1), 11);
        let probe = rng_tensor(Shape::new(2, 3, 4, 4), 14);
        let err = grad_check(
            |tape, ids| {
                let (y, _, _) = tape.batch_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let y = tape.mul_const(y, probe.clone())?;
                Ok(tape.sum(y))
            },
            &[x, gamma, beta],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn loss_primitives_gradients_pass() {
        // Small input scale keeps finite-difference cancellation noise well
        // below the gradient magnitudes.
        let pred = rng_tensor(Shape::new(1, 1, 4, 6), 12).scale(0.01);
        let target = rng_tensor(Shape::new(1, 1, 4, 6), 13).scale(0.01);
        let mask = Tensor::from_fn(Shape::new(1, 1, 4, 6), |_, _, h, w| {
            if (h + w) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let err = grad_check(
            |tape, ids| {
                let mse = tape.masked_sq_err(ids[0], &target, &mask)?;
                let smooth = tape.smooth_abs(ids[0]);
                let smooth = tape.scale(smooth, 0.1);
                tape.add(mse, smooth)
            },
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
