//! Reverse pass over a recorded forward.
//!
//! Nodes are visited in reverse order. Each node receives the sum of the
//! cotangents of its consumers, covering all `T·B` frames at once, so every
//! weight gradient is already summed over timesteps when the convolution
//! backward reduces over frames. LIF layers walk time backwards with the
//! membrane recurrence `∂V[t]/∂V[t-1] = β` and the reset path
//! `∂V[t]/∂S[t-1] = -V_th`.

use super::Gradients;
use crate::error::{Error, Result};
use crate::network::{LayerGraph, Op, Saved, Tape, Value};
use crate::neuron::{beta_of, surrogate};
use crate::tensor::{
    concat_channels_backward, conv2d_backward_opts, deconv2d_backward_opts, maxpool2x2_backward, Scalar, Shape4,
    Tensor4,
};

fn accumulate<S: Scalar>(slot: &mut Option<Tensor4<S>>, g: Tensor4<S>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Cotangent of a LIF input and the decay-parameter gradient.
#[allow(clippy::too_many_arguments)]
fn lif_reverse<S: Scalar>(
    grad_spikes: &Tensor4<S>,
    membrane: &Tensor4<S>,
    input_steps: usize,
    batch: usize,
    timesteps: usize,
    decay_param: S,
    threshold: S,
    slope: S,
) -> (Tensor4<S>, S) {
    let frame = membrane.shape().with_batch(1);
    let flen = frame.numel();
    let beta = beta_of(decay_param);
    let mut grad_in = Tensor4::zeros_unchecked(frame.with_batch(input_steps * batch));
    let mut decay_acc = 0.0f64;
    let mut carry_v = vec![S::zero(); flen];
    let mut carry_s = vec![S::zero(); flen];
    for b in 0..batch {
        carry_v.iter_mut().for_each(|c| *c = S::zero());
        carry_s.iter_mut().for_each(|c| *c = S::zero());
        for t in (0..timesteps).rev() {
            let gd = grad_spikes.frame(t * batch + b);
            let v = membrane.frame(t * batch + b);
            let v_prev = (t > 0).then(|| membrane.frame((t - 1) * batch + b));
            let gi = grad_in.frame_mut(if input_steps == 1 { b } else { t * batch + b });
            let mut acc = S::zero();
            for i in 0..flen {
                let gs = gd[i] + carry_s[i];
                let gv = gs * surrogate(v[i], threshold, slope) + carry_v[i];
                gi[i] += gv;
                if let Some(vp) = v_prev {
                    acc += gv * vp[i];
                }
                carry_v[i] = beta * gv;
                carry_s[i] = -threshold * gv;
            }
            decay_acc += acc.to_f64().unwrap_or(f64::NAN);
        }
    }
    let d = S::lit(decay_acc) * beta * (S::one() - beta);
    (grad_in, d)
}

/// Non-firing readout: only the final membrane is observed.
fn readout_reverse<S: Scalar>(
    grad_out: &Tensor4<S>,
    membrane: &Tensor4<S>,
    input_steps: usize,
    batch: usize,
    timesteps: usize,
    decay_param: S,
) -> (Tensor4<S>, S) {
    let frame = membrane.shape().with_batch(1);
    let beta = beta_of(decay_param);
    let mut grad_in = Tensor4::zeros_unchecked(frame.with_batch(input_steps * batch));
    let mut decay_acc = 0.0f64;
    for b in 0..batch {
        let mut gv = grad_out.frame(b).to_vec();
        for t in (0..timesteps).rev() {
            let gi = grad_in.frame_mut(if input_steps == 1 { b } else { t * batch + b });
            for (x, g) in gi.iter_mut().zip(&gv) {
                *x += *g;
            }
            if t > 0 {
                let vp = membrane.frame((t - 1) * batch + b);
                let acc: S = gv.iter().zip(vp).map(|(g, v)| *g * *v).sum();
                decay_acc += acc.to_f64().unwrap_or(f64::NAN);
            }
            gv.iter_mut().for_each(|g| *g *= beta);
        }
    }
    let d = S::lit(decay_acc) * beta * (S::one() - beta);
    (grad_in, d)
}

/// Gradients of every parameter given `∂L/∂output`.
///
/// The tape is consumed, so it cannot be replayed twice. A tape recorded for
/// a different graph or missing any node is rejected.
pub fn bptt_backward<S: Scalar>(graph: &LayerGraph<S>, tape: Tape<S>, loss_grad: &Tensor4<S>) -> Result<Gradients<S>> {
    if tape.signature != graph.signature() || tape.nodes.len() != graph.nodes().len() {
        return Err(Error::Internal("tape was recorded for a different graph".into()));
    }
    let cfg = graph.config();
    let (batch, timesteps) = (tape.batch, tape.timesteps);
    let want = Shape4::new(batch, 3, cfg.height, cfg.width);
    if loss_grad.shape() != want {
        return Err(Error::shape("bptt_backward", loss_grad.shape(), want));
    }
    let threshold = S::lit(cfg.lif.threshold);
    let slope = S::lit(cfg.lif.surrogate_slope);

    let mut grads = Gradients::zeros_like(graph);
    let mut cot: Vec<Option<Tensor4<S>>> = vec![None; tape.nodes.len()];
    let mut nodes = tape.nodes;
    let last = nodes.len() - 1;

    for id in (0..nodes.len()).rev() {
        let rec = nodes[id]
            .take()
            .ok_or_else(|| Error::Internal(format!("tape is missing node {id} ({})", graph.nodes()[id].name)))?;
        if rec.node != id || rec.op != graph.nodes()[id].op {
            return Err(Error::Internal(format!("tape node {id} does not match the graph")));
        }
        let g = if id == last {
            if !matches!(rec.op, Op::Readout { .. }) {
                return Err(Error::Internal("last node is not the readout".into()));
            }
            Some(loss_grad.clone())
        } else {
            cot[id].take()
        };
        // A node nobody depends on contributes nothing.
        let Some(g) = g else { continue };

        match (rec.op, rec.saved) {
            (Op::Input, Saved::Input) => {}
            (Op::Conv { layer, input }, Saved::Conv { input: Value { tensor, .. } })
            | (Op::Deconv { layer, input }, Saved::Conv { input: Value { tensor, .. } }) => {
                let params = &graph.conv_layers()[layer].params;
                let need_input = !matches!(graph.nodes()[input].op, Op::Input);
                let (gi, gw, gb) = if matches!(rec.op, Op::Conv { .. }) {
                    conv2d_backward_opts(&g, &tensor, params, need_input)?
                } else {
                    deconv2d_backward_opts(&g, &tensor, params, need_input)?
                };
                grads.add_conv(layer, gw.data(), &gb);
                if let Some(gi) = gi {
                    accumulate(&mut cot[input], gi)?;
                }
            }
            (Op::Lif { lif, input }, Saved::Lif { membrane, input_steps }) => {
                let (gi, gd) = lif_reverse(
                    &g,
                    &membrane,
                    input_steps,
                    batch,
                    timesteps,
                    graph.decay_params()[lif],
                    threshold,
                    slope,
                );
                grads.add_decay(lif, gd);
                accumulate(&mut cot[input], gi)?;
            }
            (Op::Readout { lif, input }, Saved::Readout { membrane, input_steps }) => {
                let (gi, gd) =
                    readout_reverse(&g, &membrane, input_steps, batch, timesteps, graph.decay_params()[lif]);
                grads.add_decay(lif, gd);
                accumulate(&mut cot[input], gi)?;
            }
            (Op::Pool { input }, Saved::Pool { indices }) => {
                accumulate(&mut cot[input], maxpool2x2_backward(&g, &indices)?)?;
            }
            (Op::Concat { a, b }, Saved::Concat { a_channels, skip_live }) => {
                let (ga, gb) = concat_channels_backward(&g, a_channels)?;
                accumulate(&mut cot[a], ga)?;
                if skip_live {
                    accumulate(&mut cot[b], gb)?;
                }
            }
            (op, _) => {
                return Err(Error::Internal(format!(
                    "tape node {id} ({}) lacks the values its backward needs",
                    op.kind()
                )))
            }
        }
    }
    Ok(grads)
}
