//! Completion loss: masked mean squared error plus a smoothness term.
//!
//! Supervision exists only at observed ground-truth pixels, so the squared
//! error is averaged over the ground-truth mask. The smoothness term is the
//! mean absolute first-order spatial difference of the prediction over both
//! axes, discouraging the gridded artifacts sparse inputs otherwise leave
//! behind.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::layers::ValidityMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub lambda_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_smooth: 0.1 }
    }
}

/// `mse(pred, gt | gt_mask) + lambda * smoothness(pred)` on a tape.
pub fn completion_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    gt: &Tensor<T>,
    gt_mask: &ValidityMask<T>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let mse = tape.masked_sq_err(pred, gt, gt_mask.tensor())?;
    if cfg.lambda_smooth == 0.0 {
        return Ok(mse);
    }
    let smooth = tape.smooth_abs(pred);
    let smooth = tape.scale(smooth, T::of_f64(cfg.lambda_smooth));
    tape.add(mse, smooth)
}

/// Loss value without gradient tracking.
pub fn completion_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    gt_mask: &ValidityMask<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone(), false);
    let loss = completion_loss_on_tape(&mut tape, p, gt, gt_mask, cfg)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Shape;

    #[test]
    fn perfect_constant_prediction_has_zero_loss() {
        let pred = Tensor::filled(Shape::new(1, 1, 3, 3), 4.0);
        let gt = pred.clone();
        let mask = ValidityMask::all_valid(1, 3, 3);
        let loss = completion_loss(&pred, &gt, &mask, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_supervised_pixel_gives_squared_error() {
        let mut pred = Tensor::zeros(Shape::new(1, 1, 2, 2));
        pred.set(0, 0, 0, 0, 3.0);
        let gt = Tensor::filled(Shape::new(1, 1, 2, 2), 0.5);
        let mut m = Tensor::zeros(Shape::new(1, 1, 2, 2));
        m.set(0, 0, 0, 0, 1.0);
        let mask = ValidityMask::new(m).unwrap();
        let loss =
            completion_loss(&pred, &gt, &mask, &LossConfig { lambda_smooth: 0.0 }).unwrap();
        assert_eq!(loss, 2.5 * 2.5);
    }

    #[test]
    fn smoothness_term_follows_hand_arithmetic() {
        // 1x2 prediction [0, 2] equal to ground truth: MSE 0, one
        // horizontal difference of 2, lambda 0.1 -> loss 0.2.
        let pred = Tensor::<f64>::new(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let gt = pred.clone();
        let mask = ValidityMask::all_valid(1, 1, 2);
        let loss = completion_loss(&pred, &gt, &mask, &LossConfig::default()).unwrap();
        assert!((loss - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_supervision_is_an_error() {
        let pred = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let gt = pred.clone();
        let mask = ValidityMask::all_invalid(1, 2, 2);
        assert!(matches!(
            completion_loss(&pred, &gt, &mask, &LossConfig::default()),
            Err(Error::NoSupervision)
        ));
    }

    #[test]
    fn unsupervised_pixels_do_not_affect_pure_mse() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let gt = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, _, _| {
            rng.random_range(0.0..10.0)
        });
        let mask = ValidityMask::new(Tensor::from_fn(
            Shape::new(1, 1, 4, 4),
            |_, _, h, w| if (h * 4 + w) % 3 == 0 { 1.0 } else { 0.0 },
        ))
        .unwrap();
        let pred = gt.clone();
        let cfg = LossConfig { lambda_smooth: 0.0 };
        let base = completion_loss(&pred, &gt, &mask, &cfg).unwrap();
        let mut pred2 = pred.clone();
        for h in 0..4 {
            for w in 0..4 {
                if mask.tensor().at(0, 0, h, w) == 0.0 {
                    pred2.set(0, 0, h, w, rng.random_range(-100.0..100.0));
                }
            }
        }
        let perturbed = completion_loss(&pred2, &gt, &mask, &cfg).unwrap();
        assert_eq!(base, perturbed);
    }

    #[test]
    fn loss_gradient_passes_finite_difference_check() {
        use crate::autodiff::grad_check;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pred = Tensor::from_fn(Shape::new(1, 1, 4, 5), |_, _, _, _| {
            rng.random_range(0.0..0.1)
        });
        let gt = Tensor::from_fn(Shape::new(1, 1, 4, 5), |_, _, _, _| {
            rng.random_range(0.0..0.1)
        });
        let mask = ValidityMask::new(Tensor::from_fn(
            Shape::new(1, 1, 4, 5),
            |_, _, h, w| if (h + 2 * w) % 3 != 0 { 1.0 } else { 0.0 },
        ))
        .unwrap();
        let err = grad_check(
            |tape, ids| {
                completion_loss_on_tape(tape, ids[0], &gt, &mask, &LossConfig::default())
            },
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
