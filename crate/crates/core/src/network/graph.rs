use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::neuron::LifConfig;
use crate::tensor::{ConvParams, Scalar, Shape4, Tensor4};

pub type NodeId = usize;

/// One operation in the layer graph. Inputs always refer to earlier nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Input,
    /// 3×3 convolution, padding 1. `layer` indexes the convolution store.
    Conv { layer: usize, input: NodeId },
    /// 2×2 transposed convolution, stride 2.
    Deconv { layer: usize, input: NodeId },
    /// Spiking LIF layer. `lif` indexes the decay store.
    Lif { lif: usize, input: NodeId },
    /// Non-firing LIF whose final membrane potential is the network output.
    Readout { lif: usize, input: NodeId },
    Pool { input: NodeId },
    /// Channel concatenation, `a` first.
    Concat { a: NodeId, b: NodeId },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input => vec![],
            Op::Conv { input, .. }
            | Op::Deconv { input, .. }
            | Op::Lif { input, .. }
            | Op::Readout { input, .. }
            | Op::Pool { input } => vec![input],
            Op::Concat { a, b } => vec![a, b],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::Deconv { .. } => "deconv",
            Op::Lif { .. } => "lif",
            Op::Readout { .. } => "readout",
            Op::Pool { .. } => "pool",
            Op::Concat { .. } => "concat",
        }
    }
}

/// A node and its per-sample output shape `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDesc {
    pub name: String,
    pub op: Op,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl NodeDesc {
    pub fn neurons(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    pub name: String,
    pub params: ConvParams<S>,
}

/// The assembled encoder-decoder: node list plus parameter stores.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph<S = f32> {
    pub(crate) config: NetworkConfig,
    pub(crate) nodes: Vec<NodeDesc>,
    pub(crate) convs: Vec<ConvLayer<S>>,
    /// Raw decay parameter per LIF node (readout included), `β = logistic(p)`.
    pub(crate) decay: Vec<S>,
    pub(crate) decay_names: Vec<String>,
    /// Concat node of each decoder stage, indexed by encoder stage.
    pub(crate) skip_concats: Vec<NodeId>,
}

struct Builder<S> {
    nodes: Vec<NodeDesc>,
    convs: Vec<ConvLayer<S>>,
    decay: Vec<S>,
    decay_names: Vec<String>,
    decay_init: S,
}

impl<S: Scalar> Builder<S> {
    fn push(&mut self, name: String, op: Op, (channels, height, width): (usize, usize, usize)) -> NodeId {
        self.nodes.push(NodeDesc {
            name,
            op,
            channels,
            height,
            width,
        });
        self.nodes.len() - 1
    }

    fn dims(&self, id: NodeId) -> (usize, usize, usize) {
        let n = &self.nodes[id];
        (n.channels, n.height, n.width)
    }

    fn conv(&mut self, name: &str, input: NodeId, out_channels: usize) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        let params = ConvParams::conv(
            Tensor4::zeros(Shape4::new(out_channels, c, 3, 3))?,
            vec![S::zero(); out_channels],
            1,
            1,
        )?;
        let out = params.output_shape(Shape4::new(1, c, h, w))?;
        self.convs.push(ConvLayer {
            name: name.to_string(),
            params,
        });
        let layer = self.convs.len() - 1;
        Ok(self.push(name.to_string(), Op::Conv { layer, input }, (out.channels, out.height, out.width)))
    }

    fn deconv(&mut self, name: &str, input: NodeId, out_channels: usize) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        let params = ConvParams::deconv(
            Tensor4::zeros(Shape4::new(c, out_channels, 2, 2))?,
            vec![S::zero(); out_channels],
            2,
            0,
        )?;
        let out = params.output_shape(Shape4::new(1, c, h, w))?;
        self.convs.push(ConvLayer {
            name: name.to_string(),
            params,
        });
        let layer = self.convs.len() - 1;
        Ok(self.push(name.to_string(), Op::Deconv { layer, input }, (out.channels, out.height, out.width)))
    }

    fn lif(&mut self, name: &str, input: NodeId, readout: bool) -> NodeId {
        self.decay.push(self.decay_init);
        self.decay_names.push(name.to_string());
        let lif = self.decay.len() - 1;
        let op = if readout {
            Op::Readout { lif, input }
        } else {
            Op::Lif { lif, input }
        };
        let dims = self.dims(input);
        self.push(name.to_string(), op, dims)
    }

    fn conv_lif(&mut self, prefix: &str, idx: usize, input: NodeId, channels: usize) -> Result<NodeId> {
        let c = self.conv(&format!("{prefix}.conv{idx}"), input, channels)?;
        Ok(self.lif(&format!("{prefix}.lif{idx}"), c, false))
    }
}

impl<S: Scalar> LayerGraph<S> {
    /// Builds and initialises a network; `cfg` must pass full validation.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut g = Self::skeleton(cfg)?;
        g.initialize(seed);
        Ok(g)
    }

    /// Like [`LayerGraph::build`] but accepts any structurally sound depth,
    /// which allows the tiny networks used for gradient verification.
    pub fn build_relaxed(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate_structure()?;
        let mut g = Self::skeleton(cfg)?;
        g.initialize(seed);
        Ok(g)
    }

    /// Graph with every weight zero and every decay at `decay_init`.
    pub(crate) fn skeleton(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate_structure()?;
        let mut b = Builder {
            nodes: Vec::new(),
            convs: Vec::new(),
            decay: Vec::new(),
            decay_names: Vec::new(),
            decay_init: S::lit(cfg.lif.initial_decay_param()),
        };
        let mut x = b.push("input".into(), Op::Input, (IMAGE_CHANNELS, cfg.height, cfg.width));

        let mut taps = Vec::with_capacity(cfg.depth);
        for stage in 0..cfg.depth {
            let prefix = format!("enc{stage}");
            let ch = cfg.stage_channels(stage);
            x = b.conv_lif(&prefix, 1, x, ch)?;
            x = b.conv_lif(&prefix, 2, x, ch)?;
            taps.push(x);
            let (c, h, w) = b.dims(x);
            x = b.push(format!("{prefix}.pool"), Op::Pool { input: x }, (c, h / 2, w / 2));
        }

        let bc = cfg.bottleneck_channels();
        x = b.conv_lif("bottleneck", 1, x, bc)?;
        x = b.conv_lif("bottleneck", 2, x, bc)?;

        let mut skip_concats = vec![0; cfg.depth];
        for stage in (0..cfg.depth).rev() {
            let prefix = format!("dec{stage}");
            let ch = cfg.stage_channels(stage);
            let up = b.deconv(&format!("{prefix}.up"), x, ch)?;
            let up = b.lif(&format!("{prefix}.up_lif"), up, false);
            let skip = taps[stage];
            let (ca, h, w) = b.dims(up);
            let (cs, hs, ws) = b.dims(skip);
            if (h, w) != (hs, ws) {
                return Err(Error::Internal(format!("{prefix}: upsampled {h}x{w} vs skip {hs}x{ws}")));
            }
            let cat = b.push(format!("{prefix}.concat"), Op::Concat { a: up, b: skip }, (ca + cs, h, w));
            skip_concats[stage] = cat;
            x = b.conv_lif(&prefix, 1, cat, ch)?;
            x = b.conv_lif(&prefix, 2, x, ch)?;
        }

        let out = b.conv("out.conv", x, IMAGE_CHANNELS)?;
        b.lif("out.readout", out, true);

        let g = LayerGraph {
            config: cfg.clone(),
            nodes: b.nodes,
            convs: b.convs,
            decay: b.decay,
            decay_names: b.decay_names,
            skip_concats,
        };
        g.audit()?;
        Ok(g)
    }

    /// Deterministic He-uniform weights from `seed`; biases zero.
    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.convs {
            let p = &mut layer.params;
            let k = p.kernel();
            let fan_in = if p.is_transposed() {
                (p.in_channels() * k * k / (p.stride * p.stride)).max(1)
            } else {
                p.in_channels() * k * k
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in p.weight.data_mut() {
                *w = S::lit(rng.gen_range(-bound..bound));
            }
            p.bias.iter_mut().for_each(|b| *b = S::zero());
        }
    }

    /// Checks the stage-wise channel/resolution invariants and the output shape.
    pub fn audit(&self) -> Result<()> {
        let cfg = &self.config;
        for node in &self.nodes {
            let expect = |stage: usize, ch: usize| (ch, cfg.height >> stage, cfg.width >> stage);
            let got = (node.channels, node.height, node.width);
            let want = if let Some(rest) = node.name.strip_prefix("enc") {
                let stage: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                if node.name.ends_with(".pool") {
                    Some(expect(stage + 1, cfg.stage_channels(stage)))
                } else {
                    Some(expect(stage, cfg.stage_channels(stage)))
                }
            } else if let Some(rest) = node.name.strip_prefix("dec") {
                let stage: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                if node.name.ends_with(".concat") {
                    Some(expect(stage, 2 * cfg.stage_channels(stage)))
                } else {
                    Some(expect(stage, cfg.stage_channels(stage)))
                }
            } else if node.name.starts_with("bottleneck") {
                Some(expect(cfg.depth, cfg.bottleneck_channels()))
            } else {
                Some(expect(0, IMAGE_CHANNELS))
            };
            if want != Some(got) {
                return Err(Error::Internal(format!(
                    "structural audit: {} has shape {got:?}, expected {want:?}",
                    node.name
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn lif_config(&self) -> &LifConfig {
        &self.config.lif
    }

    pub fn nodes(&self) -> &[NodeDesc] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<(NodeId, &NodeDesc)> {
        self.nodes.iter().enumerate().find(|(_, n)| n.name == name)
    }

    pub fn conv_layers(&self) -> &[ConvLayer<S>] {
        &self.convs
    }

    pub fn conv_layers_mut(&mut self) -> &mut [ConvLayer<S>] {
        &mut self.convs
    }

    pub fn decay_params(&self) -> &[S] {
        &self.decay
    }

    pub fn decay_params_mut(&mut self) -> &mut [S] {
        &mut self.decay
    }

    /// Number of plain convolutions (transposed convolutions excluded).
    pub fn conv_layer_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Conv { .. })).count()
    }

    pub fn deconv_layer_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Deconv { .. })).count()
    }

    /// LIF layers including the non-firing readout.
    pub fn lif_layer_count(&self) -> usize {
        self.decay.len()
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.params.num_params()).sum::<usize>() + self.decay.len()
    }

    /// Visits parameters in declaration order: each node's weight and bias,
    /// or its decay parameter.
    pub fn params(&self) -> Vec<(String, &[S])> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Conv { layer, .. } | Op::Deconv { layer, .. } => {
                    let c = &self.convs[layer];
                    out.push((format!("{}.weight", c.name), c.params.weight.data()));
                    out.push((format!("{}.bias", c.name), c.params.bias.as_slice()));
                }
                Op::Lif { lif, .. } | Op::Readout { lif, .. } => {
                    out.push((format!("{}.decay", self.decay_names[lif]), std::slice::from_ref(&self.decay[lif])));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameter slices, in the same order as [`LayerGraph::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [S]> {
        let order: Vec<bool> = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv { .. } | Op::Deconv { .. } => Some(true),
                Op::Lif { .. } | Op::Readout { .. } => Some(false),
                _ => None,
            })
            .collect();
        let mut convs = self.convs.iter_mut();
        let mut decays = self.decay.chunks_mut(1);
        let mut out = Vec::new();
        for is_conv in order {
            if is_conv {
                let c = convs.next().expect("conv store matches node list");
                let ConvParams { weight, bias, .. } = &mut c.params;
                out.push(weight.data_mut());
                out.push(bias.as_mut_slice());
            } else {
                out.push(decays.next().expect("decay store matches node list"));
            }
        }
        out
    }

    /// Same topology and values in another precision.
    pub fn cast<T: Scalar>(&self) -> LayerGraph<T> {
        LayerGraph {
            config: self.config.clone(),
            nodes: self.nodes.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| {
                    let p = &c.params;
                    let bias = p.bias.iter().map(|&b| T::lit(b.to_f64().unwrap_or(f64::NAN))).collect();
                    let params = if p.is_transposed() {
                        ConvParams::deconv(p.weight.cast(), bias, p.stride, p.padding)
                    } else {
                        ConvParams::conv(p.weight.cast(), bias, p.stride, p.padding)
                    }
                    .expect("cast preserves shapes");
                    ConvLayer {
                        name: c.name.clone(),
                        params,
                    }
                })
                .collect(),
            decay: self.decay.iter().map(|&d| T::lit(d.to_f64().unwrap_or(f64::NAN))).collect(),
            decay_names: self.decay_names.clone(),
            skip_concats: self.skip_concats.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, base: usize, size: usize) -> NetworkConfig {
        NetworkConfig {
            depth,
            base_channels: base,
            height: size,
            width: size,
            ..Default::default()
        }
    }

    #[test]
    fn depth4_has_nineteen_convolutions() {
        let g = LayerGraph::<f32>::skeleton(&cfg(4, 2, 32)).unwrap();
        assert_eq!(g.conv_layer_count(), 19);
        assert_eq!(g.deconv_layer_count(), 4);
        assert_eq!(g.lif_layer_count(), 23);
    }

    #[test]
    fn depth3_has_fifteen_convolutions() {
        let g = LayerGraph::<f32>::skeleton(&cfg(3, 2, 16)).unwrap();
        assert_eq!(g.conv_layer_count(), 15);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LayerGraph::<f32>::build(&cfg(3, 4, 16), 7).unwrap();
        let b = LayerGraph::<f32>::build(&cfg(3, 4, 16), 7).unwrap();
        let c = LayerGraph::<f32>::build(&cfg(3, 4, 16), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn build_rejects_unsupported_depth() {
        assert!(matches!(LayerGraph::<f32>::build(&cfg(2, 4, 16), 0), Err(Error::Config(_))));
        assert!(LayerGraph::<f32>::build_relaxed(&cfg(2, 4, 16), 0).is_ok());
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut g = LayerGraph::<f32>::build(&cfg(3, 2, 16), 1).unwrap();
        let lens: Vec<usize> = g.params().iter().map(|(_, p)| p.len()).collect();
        let mut_lens: Vec<usize> = g.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(lens, mut_lens);
        assert_eq!(lens.iter().sum::<usize>(), g.num_params());
    }

    #[test]
    fn output_shape_matches_input() {
        let g = LayerGraph::<f32>::skeleton(&cfg(3, 2, 64)).unwrap();
        let last = g.nodes().last().unwrap();
        assert_eq!((last.channels, last.height, last.width), (3, 64, 64));
    }
}
