//! Adam and AdamW parameter updates.

use crate::autodiff::{Gradients, NodeId};
use crate::error::{Error, Result};
use crate::network::{ParamId, ParamRegistry, TrainState};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerMode {
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// Plain Adam, no weight decay.
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            mode: OptimizerMode::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// AdamW with decoupled weight decay.
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            mode: OptimizerMode::AdamW,
            weight_decay,
            ..OptimizerConfig::adam(lr)
        }
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    cfg: OptimizerConfig,
    step: u64,
    trainable: Vec<ParamId>,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(registry: &ParamRegistry<T>, cfg: OptimizerConfig) -> Self {
        let trainable = registry.trainable_ids();
        let zeros = |ids: &[ParamId]| {
            ids.iter()
                .map(|id| Tensor::zeros(registry.get(*id).value.shape()))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            cfg,
            step: 0,
            first_moment: zeros(&trainable),
            second_moment: zeros(&trainable),
            trainable,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> OptimizerConfig {
        self.cfg
    }

    /// Rebuild from a checkpointed training state.
    pub fn from_train_state(registry: &ParamRegistry<T>, state: &TrainState<T>) -> Result<Self> {
        let trainable = registry.trainable_ids();
        if state.first_moment.len() != trainable.len() {
            return Err(Error::Checkpoint(format!(
                "resume state has {} moment tensors, registry has {} trainable parameters",
                state.first_moment.len(),
                trainable.len()
            )));
        }
        Ok(OptimizerState {
            cfg: OptimizerConfig {
                mode: state.mode,
                lr: state.lr,
                beta1: state.beta1,
                beta2: state.beta2,
                eps: state.eps,
                weight_decay: state.weight_decay,
            },
            step: state.step,
            trainable,
            first_moment: state.first_moment.clone(),
            second_moment: state.second_moment.clone(),
        })
    }

    /// Export the pieces that go into a checkpoint.
    pub fn export(&self, lr: f64) -> (OptimizerConfig, u64, Vec<Tensor<T>>, Vec<Tensor<T>>, f64) {
        (
            self.cfg,
            self.step,
            self.first_moment.clone(),
            self.second_moment.clone(),
            lr,
        )
    }

    /// One bias-corrected update over every trainable parameter. `lr`
    /// overrides the configured rate so a schedule can drive it.
    pub fn step(
        &mut self,
        lr: f64,
        registry: &mut ParamRegistry<T>,
        grads: &Gradients<T>,
        param_nodes: &[NodeId],
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let eps = T::of_f64(self.cfg.eps);
        let lr_t = T::of_f64(lr);
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let decay = T::of_f64(lr * self.cfg.weight_decay);

        for (k, id) in self.trainable.iter().enumerate() {
            let node = param_nodes[id.index()];
            let shape = registry.get(*id).value.shape();
            let zero;
            let g = match grads.get(node) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(shape);
                    &zero
                }
            };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    registry.get(*id).name
                )));
            }
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            let param = registry.value_mut(*id);
            for i in 0..shape.count() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                let mut update = lr_t * m_hat / (v_hat.sqrt() + eps);
                if self.cfg.mode == OptimizerMode::AdamW {
                    update += decay * param.data()[i];
                }
                param.data_mut()[i] = param.data()[i] - update;
            }
        }
        Ok(())
    }
}

/// Free-function form of one optimizer update.
pub fn optimizer_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    registry: &mut ParamRegistry<T>,
    grads: &Gradients<T>,
    param_nodes: &[NodeId],
) -> Result<()> {
    let lr = state.cfg.lr;
    state.step(lr, registry, grads, param_nodes)
}
