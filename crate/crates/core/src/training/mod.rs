//! Surrogate-gradient training: loss, backpropagation through time, Adam and
//! the epoch loop.

mod adam;
mod backward;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use backward::bptt_backward;
pub use trainer::{evaluate, train, EpochRecord, TrainReport, TrainSchedule, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::network::{ForwardOptions, LayerGraph, Op};
use crate::neuron::SpikeFn;
use crate::tensor::{Scalar, Tensor4};

/// Mean squared error over every element, and its gradient `2(ŷ - y)/N`.
pub fn mse_loss<S: Scalar>(output: &Tensor4<S>, reference: &Tensor4<S>) -> Result<(f64, Tensor4<S>)> {
    if output.shape() != reference.shape() {
        return Err(Error::shape("mse_loss", output.shape(), reference.shape()));
    }
    let n = output.len() as f64;
    let loss = output
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| {
            let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = S::lit(2.0 / n);
    let grad = output.zip_map(reference, |a, b| scale * (a - b))?;
    Ok((loss, grad))
}

/// One gradient buffer per parameter, in the order of [`LayerGraph::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S = f32> {
    names: Vec<String>,
    values: Vec<Vec<S>>,
    conv_slot: Vec<usize>,
    decay_slot: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(graph: &LayerGraph<S>) -> Self {
        let mut conv_slot = vec![0; graph.conv_layers().len()];
        let mut decay_slot = vec![0; graph.decay_params().len()];
        let (mut names, mut values) = (Vec::new(), Vec::new());
        let params = graph.params();
        let mut iter = params.iter();
        for node in graph.nodes() {
            let count = match node.op {
                Op::Conv { layer, .. } | Op::Deconv { layer, .. } => {
                    conv_slot[layer] = values.len();
                    2
                }
                Op::Lif { lif, .. } | Op::Readout { lif, .. } => {
                    decay_slot[lif] = values.len();
                    1
                }
                _ => 0,
            };
            for _ in 0..count {
                let (name, p) = iter.next().expect("params follow the node order");
                names.push(name.clone());
                values.push(vec![S::zero(); p.len()]);
            }
        }
        Gradients {
            names,
            values,
            conv_slot,
            decay_slot,
        }
    }

    pub(crate) fn add_conv(&mut self, layer: usize, weight: &[S], bias: &[S]) {
        let slot = self.conv_slot[layer];
        for (acc, g) in self.values[slot].iter_mut().zip(weight) {
            *acc += *g;
        }
        for (acc, g) in self.values[slot + 1].iter_mut().zip(bias) {
            *acc += *g;
        }
    }

    pub(crate) fn add_decay(&mut self, lif: usize, g: S) {
        self.values[self.decay_slot[lif]][0] += g;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    pub fn slices(&self) -> impl Iterator<Item = &[S]> {
        self.values.iter().map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.names.iter().map(String::as_str).zip(self.slices())
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<S> {
        self.values.concat()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Forward, MSE against `reference`, and backward in one call.
pub fn loss_and_gradients<S: Scalar>(
    graph: &LayerGraph<S>,
    raw: &Tensor4<S>,
    reference: &Tensor4<S>,
    spike_fn: SpikeFn,
) -> Result<(f64, Gradients<S>)> {
    let opts = ForwardOptions {
        spike_fn,
        record_tape: true,
        zero_skip: None,
    };
    let out = graph.forward_with(raw, opts)?;
    let (loss, grad) = mse_loss(&out.output, reference)?;
    let tape = out.tape.ok_or_else(|| Error::Internal("forward did not record a tape".into()))?;
    let grads = bptt_backward(graph, tape, &grad)?;
    Ok((loss, grads))
}
