//! Minimal reverse-mode autodiff: the op set needed to train an implicit
//! decoder on top of a strided 3D CNN.

mod gradcheck;
mod graph;
pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub(crate) use gradcheck::grad_check_with;
pub use graph::{nearest_upsample_index, Fault, Gradients, Graph, NodeId};
pub use ops::{conv3d, cross_entropy, dice_loss, linear, softmax_rows};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::ZERO; n],
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
            step: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    /// He-normal initialization, `N(0, 2 / fan_in)`.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self::new(Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    /// Same values, fresh optimizer state, different scalar type.
    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter::new(self.value.cast())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One bias-corrected Adam update of every parameter from its `grad`.
    pub fn step<T: Real>(&self, params: &mut [&mut Parameter<T>]) {
        for p in params.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
            let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
            let step_size = T::from_f64(self.lr / c1);
            let inv_c2 = T::from_f64(1.0 / c2);
            let eps = T::from_f64(self.eps);
            let Parameter { value, grad, m, v, .. } = &mut **p;
            for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *x -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Weights of the combined cross-entropy + soft-Dice objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    w_ce: f64,
    w_dice: f64,
}

impl LossWeights {
    pub fn new(w_ce: f64, w_dice: f64) -> Result<Self> {
        if !(w_ce >= 0.0 && w_dice >= 0.0 && w_ce.is_finite() && w_dice.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and non-negative, got ({w_ce}, {w_dice})"
            )));
        }
        if w_ce == 0.0 && w_dice == 0.0 {
            return Err(Error::invalid("loss weights cannot both be zero"));
        }
        Ok(Self { w_ce, w_dice })
    }

    pub fn ce(&self) -> f64 {
        self.w_ce
    }

    pub fn dice(&self) -> f64 {
        self.w_dice
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_dice: 1.0,
        }
    }
}

/// Smoothing constant of the soft-Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Scalar values of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Adds `w_ce·CE(logits) + w_dice·Dice(softmax(logits))` to the graph.
/// Returns `(ce, dice, total)` node ids.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: std::rc::Rc<[usize]>,
    weights: LossWeights,
) -> Result<(NodeId, NodeId, NodeId)> {
    let ce = g.cross_entropy(logits, targets.clone())?;
    let probs = g.softmax_rows(logits)?;
    let dice = g.dice_loss(probs, targets, T::from_f64(DICE_SMOOTH))?;
    let total = g.weighted_sum(&[
        (ce, T::from_f64(weights.ce())),
        (dice, T::from_f64(weights.dice())),
    ])?;
    Ok((ce, dice, total))
}
