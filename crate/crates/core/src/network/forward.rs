//! Time-unrolled evaluation of a [`LayerGraph`].
//!
//! Layers are evaluated one after another with all `T` timesteps of a layer
//! computed before the next layer starts. This is exact: a layer at step `t`
//! only depends on its input at `t` and on its own state at `t - 1`. Node
//! values therefore hold `T·B` frames ordered `[t][b]`, which turns every
//! convolution into a single batched call. The input image is the same at
//! every step, so the first convolution runs once on `B` frames.

use std::sync::Arc;

use super::graph::{LayerGraph, NodeId, Op};
use crate::error::{Error, Result};
use crate::neuron::{beta_of, fire, SpikeFn};
use crate::tensor::{
    concat_channels, conv2d_forward, deconv2d_forward, maxpool2x2, PoolIndices, Scalar, Shape4, Tensor4,
};

/// A node output: `steps·B` frames, where `steps` is 1 for time-invariant values.
#[derive(Clone, Debug)]
pub(crate) struct Value<S> {
    pub tensor: Arc<Tensor4<S>>,
    pub steps: usize,
}

/// Forward facts one node's backward needs.
#[derive(Debug)]
pub(crate) enum Saved<S> {
    Input,
    Conv { input: Value<S> },
    Lif { membrane: Tensor4<S>, input_steps: usize },
    Readout { membrane: Tensor4<S>, input_steps: usize },
    Pool { indices: PoolIndices },
    Concat { a_channels: usize, skip_live: bool },
}

/// A recorded node: the operation, its parents, and saved forward values.
#[derive(Debug)]
pub struct TapeNode<S> {
    pub node: NodeId,
    pub op: Op,
    pub(crate) saved: Saved<S>,
}

impl<S> TapeNode<S> {
    pub fn parents(&self) -> Vec<NodeId> {
        self.op.inputs()
    }
}

/// Everything recorded by one forward pass, consumed by a single backward pass.
#[derive(Debug)]
pub struct Tape<S> {
    pub(crate) signature: (usize, usize),
    pub(crate) batch: usize,
    pub(crate) timesteps: usize,
    pub(crate) nodes: Vec<Option<TapeNode<S>>>,
}

impl<S> Tape<S> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Drops the record of one node; backward will then refuse the tape.
    pub fn forget(&mut self, node: NodeId) {
        if let Some(slot) = self.nodes.get_mut(node) {
            *slot = None;
        }
    }
}

/// Spike counts of one firing LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpikes {
    pub name: String,
    /// Neurons per sample.
    pub neurons: usize,
    /// Spikes per timestep, summed over all samples seen.
    pub counts: Vec<u64>,
}

/// Per-layer, per-timestep spike counts of the firing LIF layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrace {
    pub timesteps: usize,
    /// Images accumulated into the counts.
    pub samples: usize,
    pub layers: Vec<LayerSpikes>,
}

impl SpikeTrace {
    pub fn layer(&self, name: &str) -> Option<&LayerSpikes> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Adds the counts of another trace over the same layers.
    pub fn merge(&mut self, other: &SpikeTrace) -> Result<()> {
        if self.timesteps != other.timesteps || self.layers.len() != other.layers.len() {
            return Err(Error::Structure("cannot merge traces of different networks".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.name != b.name || a.neurons != b.neurons {
                return Err(Error::Structure(format!("layer {} vs {}", a.name, b.name)));
            }
            for (x, y) in a.counts.iter_mut().zip(&b.counts) {
                *x += y;
            }
        }
        self.samples += other.samples;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub spike_fn: SpikeFn,
    /// Keep what backward needs.
    pub record_tape: bool,
    /// Replace the skip input of the given encoder stage with zeros.
    pub zero_skip: Option<usize>,
}

impl ForwardOptions {
    pub fn training() -> Self {
        ForwardOptions {
            record_tape: true,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput<S> {
    /// Final membrane potential of the readout layer, shape `(B, 3, H, W)`.
    pub output: Tensor4<S>,
    pub tape: Option<Tape<S>>,
    pub trace: SpikeTrace,
}

/// Presents the same image at each of `timesteps` steps.
///
/// The frames share one allocation.
pub fn direct_code<S: Scalar>(image: &Tensor4<S>, timesteps: usize) -> Result<Vec<Arc<Tensor4<S>>>> {
    if timesteps == 0 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }
    if let Some(bad) = image.data().iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
        return Err(Error::precondition(
            "direct_code",
            format!("pixel values must lie in [0, 1], found {bad}"),
        ));
    }
    let frame = Arc::new(image.clone());
    Ok(vec![frame; timesteps])
}

struct LifRun<S> {
    spikes: Tensor4<S>,
    membrane: Option<Tensor4<S>>,
    counts: Vec<u64>,
}

fn frame_at<S: Scalar>(value: &Value<S>, t: usize, b: usize, batch: usize) -> &[S] {
    let idx = if value.steps == 1 { b } else { t * batch + b };
    value.tensor.frame(idx)
}

#[allow(clippy::too_many_arguments)]
fn run_lif<S: Scalar>(
    input: &Value<S>,
    batch: usize,
    timesteps: usize,
    decay_param: S,
    threshold: S,
    slope: S,
    mode: SpikeFn,
    keep_membrane: bool,
) -> LifRun<S> {
    let frame = input.tensor.shape().with_batch(1);
    let flen = frame.numel();
    let out_shape = frame.with_batch(timesteps * batch);
    let beta = beta_of(decay_param);
    let mut v = vec![S::zero(); batch * flen];
    let mut s_prev = vec![S::zero(); batch * flen];
    let mut spikes = Tensor4::zeros_unchecked(out_shape);
    let mut membrane = keep_membrane.then(|| Tensor4::zeros_unchecked(out_shape));
    let mut counts = vec![0u64; timesteps];
    for (t, count) in counts.iter_mut().enumerate() {
        for b in 0..batch {
            let x = frame_at(input, t, b, batch);
            let vs = &mut v[b * flen..(b + 1) * flen];
            let ss = &mut s_prev[b * flen..(b + 1) * flen];
            let out = spikes.frame_mut(t * batch + b);
            let mut fired = 0u64;
            for (((vi, si), oi), &xi) in vs.iter_mut().zip(ss.iter_mut()).zip(out.iter_mut()).zip(x) {
                let v_new = beta * *vi + xi - *si * threshold;
                let s_new = fire(v_new, threshold, slope, mode);
                *vi = v_new;
                *si = s_new;
                *oi = s_new;
                fired += u64::from(v_new >= threshold);
            }
            *count += fired;
            if let Some(m) = membrane.as_mut() {
                m.frame_mut(t * batch + b).copy_from_slice(vs);
            }
        }
    }
    LifRun {
        spikes,
        membrane,
        counts,
    }
}

/// Non-firing leaky integration; returns the last-step membrane and optionally the history.
fn run_readout<S: Scalar>(
    input: &Value<S>,
    batch: usize,
    timesteps: usize,
    decay_param: S,
    keep_membrane: bool,
) -> (Tensor4<S>, Option<Tensor4<S>>) {
    let frame = input.tensor.shape().with_batch(1);
    let flen = frame.numel();
    let beta = beta_of(decay_param);
    let mut v = Tensor4::zeros_unchecked(frame.with_batch(batch));
    let mut membrane = keep_membrane.then(|| Tensor4::zeros_unchecked(frame.with_batch(timesteps * batch)));
    for t in 0..timesteps {
        for b in 0..batch {
            let x = frame_at(input, t, b, batch);
            let vs = v.frame_mut(b);
            for i in 0..flen {
                vs[i] = beta * vs[i] + x[i];
            }
            if let Some(m) = membrane.as_mut() {
                m.frame_mut(t * batch + b).copy_from_slice(v.frame(b));
            }
        }
    }
    (v, membrane)
}

impl<S: Scalar> LayerGraph<S> {
    pub(crate) fn signature(&self) -> (usize, usize) {
        (self.nodes.len(), self.num_params())
    }

    /// Inference: Heaviside spikes, no tape.
    pub fn forward(&self, image: &Tensor4<S>) -> Result<ForwardOutput<S>> {
        self.forward_with(image, ForwardOptions::default())
    }

    pub fn forward_with(&self, image: &Tensor4<S>, opts: ForwardOptions) -> Result<ForwardOutput<S>> {
        let cfg = &self.config;
        let s = image.shape();
        let want = Shape4::new(s.batch, 3, cfg.height, cfg.width);
        if s != want {
            return Err(Error::Config(format!("input shape {s} does not match network input {want}")));
        }
        let frames = direct_code(image, cfg.timesteps)?;
        let (batch, timesteps) = (s.batch, cfg.timesteps);
        let threshold = S::lit(cfg.lif.threshold);
        let slope = S::lit(cfg.lif.surrogate_slope);

        // Release values after their last consumer unless the tape keeps them.
        let mut uses = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for i in n.op.inputs() {
                uses[i] += 1;
            }
        }

        let mut values: Vec<Option<Value<S>>> = vec![None; self.nodes.len()];
        let mut tape_nodes = Vec::with_capacity(if opts.record_tape { self.nodes.len() } else { 0 });
        let mut trace_layers = Vec::new();
        let mut output = None;

        for (id, node) in self.nodes.iter().enumerate() {
            let take = |values: &mut Vec<Option<Value<S>>>, uses: &mut Vec<usize>, i: NodeId| -> Result<Value<S>> {
                let v = values[i]
                    .clone()
                    .ok_or_else(|| Error::Internal(format!("value of node {i} missing")))?;
                uses[i] -= 1;
                if uses[i] == 0 {
                    values[i] = None;
                }
                Ok(v)
            };

            let (value, saved) = match node.op {
                Op::Input => (
                    Value {
                        tensor: Arc::clone(&frames[0]),
                        steps: 1,
                    },
                    Saved::Input,
                ),
                Op::Conv { layer, input } | Op::Deconv { layer, input } => {
                    let x = take(&mut values, &mut uses, input)?;
                    let params = &self.convs[layer].params;
                    let y = if matches!(node.op, Op::Conv { .. }) {
                        conv2d_forward(&x.tensor, params)?
                    } else {
                        deconv2d_forward(&x.tensor, params)?
                    };
                    let steps = x.steps;
                    (
                        Value {
                            tensor: Arc::new(y),
                            steps,
                        },
                        Saved::Conv { input: x },
                    )
                }
                Op::Lif { lif, input } => {
                    let x = take(&mut values, &mut uses, input)?;
                    let run = run_lif(
                        &x,
                        batch,
                        timesteps,
                        self.decay[lif],
                        threshold,
                        slope,
                        opts.spike_fn,
                        opts.record_tape,
                    );
                    trace_layers.push(LayerSpikes {
                        name: node.name.clone(),
                        neurons: node.neurons(),
                        counts: run.counts,
                    });
                    let saved = match run.membrane {
                        Some(membrane) => Saved::Lif {
                            membrane,
                            input_steps: x.steps,
                        },
                        None => Saved::Input,
                    };
                    (
                        Value {
                            tensor: Arc::new(run.spikes),
                            steps: timesteps,
                        },
                        saved,
                    )
                }
                Op::Readout { lif, input } => {
                    let x = take(&mut values, &mut uses, input)?;
                    let (last, membrane) = run_readout(&x, batch, timesteps, self.decay[lif], opts.record_tape);
                    output = Some(last.clone());
                    let saved = match membrane {
                        Some(membrane) => Saved::Readout {
                            membrane,
                            input_steps: x.steps,
                        },
                        None => Saved::Input,
                    };
                    (
                        Value {
                            tensor: Arc::new(last),
                            steps: 1,
                        },
                        saved,
                    )
                }
                Op::Pool { input } => {
                    let x = take(&mut values, &mut uses, input)?;
                    let (y, indices) = maxpool2x2(&x.tensor)?;
                    (
                        Value {
                            tensor: Arc::new(y),
                            steps: x.steps,
                        },
                        Saved::Pool { indices },
                    )
                }
                Op::Concat { a, b } => {
                    let xa = take(&mut values, &mut uses, a)?;
                    let xb = take(&mut values, &mut uses, b)?;
                    if xa.steps != xb.steps {
                        return Err(Error::Internal(format!("{}: operands differ in time layout", node.name)));
                    }
                    let skip_live = opts.zero_skip.is_none_or(|stage| self.skip_concats.get(stage) != Some(&id));
                    let y = if skip_live {
                        concat_channels(&xa.tensor, &xb.tensor)?
                    } else {
                        concat_channels(&xa.tensor, &Tensor4::zeros(xb.tensor.shape())?)?
                    };
                    (
                        Value {
                            tensor: Arc::new(y),
                            steps: xa.steps,
                        },
                        Saved::Concat {
                            a_channels: xa.tensor.shape().channels,
                            skip_live,
                        },
                    )
                }
            };

            if opts.record_tape {
                tape_nodes.push(Some(TapeNode {
                    node: id,
                    op: node.op,
                    saved,
                }));
            }
            if uses[id] > 0 {
                values[id] = Some(value);
            }
        }

        let output = output.ok_or_else(|| Error::Internal("graph has no readout node".into()))?;
        Ok(ForwardOutput {
            output,
            tape: opts.record_tape.then(|| Tape {
                signature: self.signature(),
                batch,
                timesteps,
                nodes: tape_nodes,
            }),
            trace: SpikeTrace {
                timesteps,
                samples: batch,
                layers: trace_layers,
            },
        })
    }
}
