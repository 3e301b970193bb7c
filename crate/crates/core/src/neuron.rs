//! Leaky integrate-and-fire neurons with soft reset and a fast-sigmoid surrogate.
//!
//! Membrane update, per neuron and timestep:
//!
//! ```text
//! V[t] = β·V[t-1] + I[t] - S[t-1]·V_th
//! S[t] = Θ(V[t] - V_th)
//! ```
//!
//! `β` is shared by a whole layer and parameterised as `logistic(decay_param)`
//! so it can never leave `(0, 1)`. In the backward pass `Θ` is replaced by
//! `1 / (1 + λ|V - V_th|)²`, the derivative of the fast sigmoid
//! `S̃ = Ṽ / (1 + λ|Ṽ|)`. The same surrogate is used on the reset path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    /// Firing threshold `V_th`.
    pub threshold: f64,
    /// Surrogate sharpness `λ`.
    pub surrogate_slope: f64,
    /// Initial decay `β₀`, mapped back through the logit to the raw parameter.
    pub decay_init: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            threshold: 0.25,
            surrogate_slope: 25.0,
            decay_init: 0.5,
        }
    }
}

impl LifConfig {
    /// Returns every violated invariant at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            out.push(format!("lif.threshold must be > 0, got {}", self.threshold));
        }
        if !(self.surrogate_slope > 0.0 && self.surrogate_slope.is_finite()) {
            out.push(format!("lif.surrogate_slope must be > 0, got {}", self.surrogate_slope));
        }
        if !(self.decay_init > 0.0 && self.decay_init < 1.0) {
            out.push(format!("lif.decay_init must lie in (0, 1), got {}", self.decay_init));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }

    /// Raw decay parameter whose logistic image is `decay_init`.
    pub fn initial_decay_param(&self) -> f64 {
        logit(self.decay_init)
    }
}

/// Forward spike nonlinearity.
///
/// `FastSigmoid` swaps the Heaviside step for `S̃` itself, turning the network
/// into a smooth function whose exact gradient equals the surrogate gradient.
/// It exists for gradient verification; training and inference use `Heaviside`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeFn {
    #[default]
    Heaviside,
    FastSigmoid,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn beta_of<S: Scalar>(decay_param: S) -> S {
    S::one() / (S::one() + (-decay_param).exp())
}

#[inline]
pub(crate) fn fire<S: Scalar>(v: S, threshold: S, slope: S, mode: SpikeFn) -> S {
    match mode {
        SpikeFn::Heaviside => {
            if v >= threshold {
                S::one()
            } else {
                S::zero()
            }
        }
        SpikeFn::FastSigmoid => {
            let x = v - threshold;
            x / (S::one() + slope * x.abs())
        }
    }
}

#[inline]
pub(crate) fn surrogate<S: Scalar>(v: S, threshold: S, slope: S) -> S {
    let d = S::one() + slope * (v - threshold).abs();
    S::one() / (d * d)
}

/// Membrane potentials, last spikes, and the layer's raw decay parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S = f32> {
    pub membrane: Tensor4<S>,
    pub spikes: Tensor4<S>,
    pub decay_param: S,
}

impl<S: Scalar> LifState<S> {
    /// All neurons at rest: `V = 0`, no previous spike.
    pub fn quiescent(shape: crate::tensor::Shape4, decay_param: S) -> Result<Self> {
        Ok(LifState {
            membrane: Tensor4::zeros(shape)?,
            spikes: Tensor4::zeros(shape)?,
            decay_param,
        })
    }

    pub fn beta(&self) -> S {
        beta_of(self.decay_param)
    }
}

/// 1 where `V ≥ V_th`, else 0.
pub fn heaviside<S: Scalar>(v: &Tensor4<S>, threshold: S) -> Tensor4<S> {
    v.map(|x| fire(x, threshold, S::one(), SpikeFn::Heaviside))
}

/// Fast sigmoid `S̃ = Ṽ / (1 + λ|Ṽ|)` with `Ṽ = V - V_th`.
pub fn fast_sigmoid<S: Scalar>(v: &Tensor4<S>, cfg: &LifConfig) -> Tensor4<S> {
    let (th, slope) = (S::lit(cfg.threshold), S::lit(cfg.surrogate_slope));
    v.map(|x| fire(x, th, slope, SpikeFn::FastSigmoid))
}

/// Elementwise `1 / (1 + λ|V - V_th|)²`.
pub fn surrogate_grad<S: Scalar>(v: &Tensor4<S>, cfg: &LifConfig) -> Tensor4<S> {
    let (th, slope) = (S::lit(cfg.threshold), S::lit(cfg.surrogate_slope));
    v.map(|x| surrogate(x, th, slope))
}

/// One Heaviside LIF update. Returns the new state and the emitted spikes.
pub fn lif_step<S: Scalar>(state: &LifState<S>, input: &Tensor4<S>, cfg: &LifConfig) -> Result<(LifState<S>, Tensor4<S>)> {
    lif_step_with(state, input, cfg, SpikeFn::Heaviside)
}

pub fn lif_step_with<S: Scalar>(
    state: &LifState<S>,
    input: &Tensor4<S>,
    cfg: &LifConfig,
    mode: SpikeFn,
) -> Result<(LifState<S>, Tensor4<S>)> {
    if state.membrane.shape() != input.shape() {
        return Err(Error::shape("lif_step", state.membrane.shape(), input.shape()));
    }
    if state.spikes.shape() != input.shape() {
        return Err(Error::shape("lif_step", state.spikes.shape(), input.shape()));
    }
    let beta = state.beta();
    let (th, slope) = (S::lit(cfg.threshold), S::lit(cfg.surrogate_slope));
    let membrane = Tensor4::from_vec(
        input.shape(),
        state
            .membrane
            .data()
            .iter()
            .zip(state.spikes.data())
            .zip(input.data())
            .map(|((&v, &s), &i)| beta * v + i - s * th)
            .collect(),
    )?;
    let spikes = membrane.map(|v| fire(v, th, slope, mode));
    Ok((
        LifState {
            membrane,
            spikes: spikes.clone(),
            decay_param: state.decay_param,
        },
        spikes,
    ))
}

/// Forward values of one step that the backward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct LifStepFacts<'a, S> {
    /// `V[t]`.
    pub membrane: &'a Tensor4<S>,
    /// `V[t-1]`.
    pub prev_membrane: &'a Tensor4<S>,
    pub decay_param: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifGrads<S = f32> {
    /// `∂L/∂I[t]`, which equals the total membrane cotangent `∂L/∂V[t]`.
    pub input: Tensor4<S>,
    /// Carry into step `t-1` through the leak: `β·∂L/∂V[t]`.
    pub prev_membrane: Tensor4<S>,
    /// Carry into step `t-1` through the soft reset: `-V_th·∂L/∂V[t]`.
    pub prev_spikes: Tensor4<S>,
    /// Contribution of this step to `∂L/∂decay_param`.
    pub decay_param: S,
}

/// Reverse of one `lif_step`.
///
/// `grad_spikes` is the total cotangent of `S[t]` (downstream use plus the
/// reset term handed back from step `t+1`); `grad_next_membrane` is the leak
/// carry `β·∂L/∂V[t+1]`, zero at the last step.
pub fn lif_backward<S: Scalar>(
    facts: Option<&LifStepFacts<'_, S>>,
    grad_spikes: &Tensor4<S>,
    grad_next_membrane: &Tensor4<S>,
    cfg: &LifConfig,
) -> Result<LifGrads<S>> {
    let facts = facts.ok_or_else(|| Error::Internal("lif_backward called without recorded step facts".into()))?;
    let shape = facts.membrane.shape();
    for other in [facts.prev_membrane, grad_spikes, grad_next_membrane] {
        if other.shape() != shape {
            return Err(Error::shape("lif_backward", shape, other.shape()));
        }
    }
    let beta = beta_of(facts.decay_param);
    let (th, slope) = (S::lit(cfg.threshold), S::lit(cfg.surrogate_slope));
    let mut grad_v = Vec::with_capacity(shape.numel());
    let mut decay_acc = S::zero();
    for (((&v, &vp), &gs), &carry) in facts
        .membrane
        .data()
        .iter()
        .zip(facts.prev_membrane.data())
        .zip(grad_spikes.data())
        .zip(grad_next_membrane.data())
    {
        let gv = gs * surrogate(v, th, slope) + carry;
        decay_acc += gv * vp;
        grad_v.push(gv);
    }
    let input = Tensor4::from_vec(shape, grad_v)?;
    Ok(LifGrads {
        prev_membrane: input.map(|g| beta * g),
        prev_spikes: input.map(|g| -th * g),
        decay_param: decay_acc * beta * (S::one() - beta),
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    fn state(v: f64, s: f64, beta: f64) -> LifState<f64> {
        LifState {
            membrane: scalar(v),
            spikes: scalar(s),
            decay_param: logit(beta),
        }
    }

    #[test]
    fn soft_reset_trajectory() {
        let cfg = LifConfig::default();
        let (s1, spk1) = lif_step(&state(0.2, 0.0, 0.8), &scalar(0.2), &cfg).unwrap();
        assert!((s1.membrane.data()[0] - 0.36).abs() < 1e-12);
        assert_eq!(spk1.data(), &[1.0]);
        let (s2, spk2) = lif_step(&s1, &scalar(0.0), &cfg).unwrap();
        assert!((s2.membrane.data()[0] - 0.038).abs() < 1e-12);
        assert_eq!(spk2.data(), &[0.0]);
    }

    #[test]
    fn quiescent_neuron_stays_silent() {
        let cfg = LifConfig::default();
        let (s, spk) = lif_step(&state(0.0, 0.0, 0.5), &scalar(0.0), &cfg).unwrap();
        assert_eq!(s.membrane.data(), &[0.0]);
        assert_eq!(spk.data(), &[0.0]);
    }

    #[test]
    fn heaviside_boundary_fires() {
        let v = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![0.25, 0.25 - 1e-9, 1.0]).unwrap();
        assert_eq!(heaviside(&v, 0.25).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn surrogate_values() {
        let cfg = LifConfig::default();
        assert_eq!(surrogate_grad(&scalar(0.25), &cfg).data(), &[1.0]);
        let g = surrogate_grad(&scalar(0.29), &cfg).data()[0];
        assert!((g - 0.25).abs() < 1e-12);
        let far = surrogate_grad(&scalar(1e6), &cfg).data()[0];
        assert!(far > 0.0 && far < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = LifConfig::default();
        let st = LifState::<f64>::quiescent(Shape4::new(1, 1, 2, 2), 0.0).unwrap();
        assert!(matches!(lif_step(&st, &scalar(1.0), &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_without_facts_is_internal_error() {
        let z = scalar(0.0);
        let err = lif_backward::<f64>(None, &z, &z, &LifConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let (v, vp) = (scalar(0.3), scalar(0.1));
        let facts = LifStepFacts {
            membrane: &v,
            prev_membrane: &vp,
            decay_param: 0.0,
        };
        let z = scalar(0.0);
        let g = lif_backward(Some(&facts), &z, &z, &LifConfig::default()).unwrap();
        assert_eq!(g.input.data(), &[0.0]);
        assert_eq!(g.prev_membrane.data(), &[0.0]);
        assert_eq!(g.prev_spikes.data(), &[0.0]);
        assert_eq!(g.decay_param, 0.0);
    }

    #[test]
    fn one_step_input_gradient_is_surrogate() {
        let cfg = LifConfig::default();
        let (v, vp) = (scalar(0.31), scalar(0.0));
        let facts = LifStepFacts {
            membrane: &v,
            prev_membrane: &vp,
            decay_param: 0.0,
        };
        let g = lif_backward(Some(&facts), &scalar(1.0), &scalar(0.0), &cfg).unwrap();
        assert_eq!(g.input.data(), surrogate_grad(&v, &cfg).data());
    }

    #[test]
    fn config_problems_are_collected() {
        let bad = LifConfig {
            threshold: -1.0,
            surrogate_slope: 0.0,
            decay_init: 1.0,
        };
        assert_eq!(bad.problems().len(), 3);
        assert!(LifConfig::default().validate().is_ok());
    }
}
