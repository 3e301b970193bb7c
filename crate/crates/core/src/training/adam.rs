use super::Gradients;
use crate::error::{Error, Result};
use crate::network::LayerGraph;
use crate::tensor::Scalar;

/// Bias-corrected Adam moments for a list of parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments shaped like `lens`, with the usual `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    pub fn new(lens: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn for_graph(graph: &LayerGraph<S>, lr: f64) -> Self {
        let lens: Vec<usize> = graph.params().iter().map(|(_, p)| p.len()).collect();
        Self::new(&lens, lr)
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.v
    }

    /// Applies one update to the parameters of `graph`.
    pub fn step_graph(&mut self, graph: &mut LayerGraph<S>, grads: &Gradients<S>) -> Result<()> {
        let grads: Vec<&[S]> = grads.slices().collect();
        let mut params = graph.params_mut();
        adam_step(&mut params, &grads, self)
    }
}

/// One Adam step over parallel lists of parameter and gradient buffers.
pub fn adam_step<S: Scalar>(params: &mut [&mut [S]], grads: &[&[S]], state: &mut AdamState<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", (params.len(), grads.len()), state.m.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adam_step", (p.len(), g.len()), state.m[i].len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(state.beta1), S::lit(state.beta2));
    let (c1, c2) = (S::one() - b1, S::one() - b2);
    let corr1 = S::lit(1.0 - state.beta1.powi(t));
    let corr2 = S::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (S::lit(state.lr), S::lit(state.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
