//! Operation counts and energy estimates.
//!
//! A convolution-type layer costs `C_in · C_out · k² · H_out · W_out`
//! multiply-accumulates in a conventional network. In the spiking network
//! the same layer performs that many accumulates scaled by the spike rate of
//! the LIF layer it drives: total spikes over all timesteps divided by that
//! layer's neuron count. The final convolution drives the non-firing readout,
//! so it is scaled by the rate of the layer feeding it instead. Pooling and
//! concatenation are free.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{LayerGraph, NodeId, Op, SpikeTrace};
use crate::tensor::Scalar;

/// Per-operation energy in picojoules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTable {
    /// 32-bit floating-point multiply-accumulate.
    pub mac_pj: f64,
    /// 32-bit floating-point accumulate.
    pub acc_pj: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            mac_pj: 4.6,
            acc_pj: 0.9,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        if self.mac_pj > 0.0 && self.acc_pj > 0.0 && self.mac_pj.is_finite() && self.acc_pj.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "energy table entries must be positive, got MAC {} pJ, ACC {} pJ",
                self.mac_pj, self.acc_pj
            )))
        }
    }

    /// Joules for `flops` multiply-accumulates.
    pub fn cnn_energy_j(&self, flops: f64) -> f64 {
        flops * self.mac_pj * 1e-12
    }

    /// Joules for `sops` accumulates.
    pub fn snn_energy_j(&self, sops: f64) -> f64 {
        sops * self.acc_pj * 1e-12
    }
}

/// `(E_CNN - E_SNN) / E_CNN · 100`.
pub fn delta_e_percent(e_cnn: f64, e_snn: f64) -> f64 {
    (e_cnn - e_snn) / e_cnn * 100.0
}

/// Geometry of one convolution-type layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvShape {
    pub fn flops(&self) -> u64 {
        [self.in_channels, self.out_channels, self.kernel, self.kernel, self.out_height, self.out_width]
            .iter()
            .map(|&v| v as u64)
            .product()
    }
}

/// Shape of node `id` if it is a convolution or transposed convolution.
pub fn conv_shape<S: Scalar>(graph: &LayerGraph<S>, id: NodeId) -> Option<ConvShape> {
    let node = graph.nodes().get(id)?;
    match node.op {
        Op::Conv { layer, input } | Op::Deconv { layer, input } => Some(ConvShape {
            in_channels: graph.nodes()[input].channels,
            out_channels: node.channels,
            kernel: graph.conv_layers()[layer].params.kernel(),
            out_height: node.height,
            out_width: node.width,
        }),
        _ => None,
    }
}

/// Multiply-accumulates of node `id`; `None` for layers that cost nothing.
pub fn layer_flops<S: Scalar>(graph: &LayerGraph<S>, id: NodeId) -> Option<u64> {
    conv_shape(graph, id).map(|s| s.flops())
}

/// Sum of [`layer_flops`] over the graph.
pub fn network_flops<S: Scalar>(graph: &LayerGraph<S>) -> u64 {
    (0..graph.nodes().len()).filter_map(|id| layer_flops(graph, id)).sum()
}

/// Spikes per neuron over all timesteps, averaged over the images in the trace.
pub fn spike_rate(trace: &SpikeTrace, layer: &str) -> Result<f64> {
    let l = trace.layer(layer).ok_or_else(|| Error::Lookup(layer.to_string()))?;
    let total: u64 = l.counts.iter().sum();
    let per_image = (l.neurons * trace.samples.max(1)) as f64;
    Ok(total as f64 / per_image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    /// The convolution.
    pub layer: String,
    /// LIF layer whose rate scales it.
    pub rate_layer: String,
    pub flops: u64,
    pub spike_rate: f64,
    pub sops: f64,
    pub cnn_energy_j: f64,
    pub snn_energy_j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerCost>,
    pub timesteps: usize,
    pub samples: usize,
    pub total_flops: u64,
    pub total_sops: f64,
    pub e_cnn_j: f64,
    pub e_snn_j: f64,
    pub delta_e_percent: f64,
}

pub const REPORT_HEADER: &str = "layer,rate_layer,flops,spike_rate,sops,cnn_energy_j,snn_energy_j";

impl EnergyReport {
    /// Per-layer rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").ok();
        for l in &self.layers {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                l.layer, l.rate_layer, l.flops, l.spike_rate, l.sops, l.cnn_energy_j, l.snn_energy_j
            )
            .ok();
        }
        writeln!(
            out,
            "total,,{},,{},{},{}",
            self.total_flops, self.total_sops, self.e_cnn_j, self.e_snn_j
        )
        .ok();
        out
    }

    /// One line: GFLOPs, GSOPs, both energies and the reduction.
    pub fn summary(&self) -> String {
        format!(
            "GFLOPs {:.4}  GSOPs {:.4}  E_CNN {} J  E_SNN {} J  ΔE {:.4}%",
            self.total_flops as f64 / 1e9,
            self.total_sops / 1e9,
            joules(self.e_cnn_j),
            joules(self.e_snn_j),
            self.delta_e_percent
        )
    }
}

/// Four decimals, switching to scientific notation below a millijoule.
fn joules(e: f64) -> String {
    if e == 0.0 || e.abs() >= 1e-3 {
        format!("{e:.4}")
    } else {
        format!("{e:.4e}")
    }
}

/// Scales every convolution's FLOPs by the spike rate of the layer it drives.
pub fn energy_report<S: Scalar>(graph: &LayerGraph<S>, trace: &SpikeTrace, table: &EnergyTable) -> Result<EnergyReport> {
    table.validate()?;
    let firing: Vec<_> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::Lif { .. }))
        .collect();
    if trace.timesteps != graph.config().timesteps || trace.layers.len() != firing.len() {
        return Err(Error::Structure(format!(
            "{} layers over {} steps, graph has {} firing layers over {} steps",
            trace.layers.len(),
            trace.timesteps,
            firing.len(),
            graph.config().timesteps
        )));
    }
    for (l, n) in trace.layers.iter().zip(&firing) {
        if l.name != n.name || l.neurons != n.neurons() || l.counts.len() != trace.timesteps {
            return Err(Error::Structure(format!("trace layer {} vs graph layer {}", l.name, n.name)));
        }
    }
    if trace.samples == 0 {
        return Err(Error::Structure("trace covers no images".into()));
    }

    let nodes = graph.nodes();
    let mut layers = Vec::new();
    for (id, node) in nodes.iter().enumerate() {
        let Some(flops) = layer_flops(graph, id) else { continue };
        let consumer = nodes.iter().find(|n| n.op.inputs().contains(&id));
        let rate_node = match consumer.map(|c| c.op) {
            Some(Op::Lif { .. }) => consumer.map(|c| c.name.as_str()),
            Some(Op::Readout { .. }) => node.op.inputs().first().map(|&i| nodes[i].name.as_str()),
            _ => None,
        }
        .ok_or_else(|| Error::Structure(format!("{} does not drive a LIF layer", node.name)))?;
        let rate = spike_rate(trace, rate_node)?;
        let sops = flops as f64 * rate;
        layers.push(LayerCost {
            layer: node.name.clone(),
            rate_layer: rate_node.to_string(),
            flops,
            spike_rate: rate,
            sops,
            cnn_energy_j: table.cnn_energy_j(flops as f64),
            snn_energy_j: table.snn_energy_j(sops),
        });
    }
    let total_flops: u64 = layers.iter().map(|l| l.flops).sum();
    let total_sops: f64 = layers.iter().map(|l| l.sops).sum();
    let e_cnn_j = table.cnn_energy_j(total_flops as f64);
    let e_snn_j = table.snn_energy_j(total_sops);
    Ok(EnergyReport {
        layers,
        timesteps: trace.timesteps,
        samples: trace.samples,
        total_flops,
        total_sops,
        e_cnn_j,
        e_snn_j,
        delta_e_percent: delta_e_percent(e_cnn_j, e_snn_j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpikes, NetworkConfig};
    use crate::neuron::{lif_step, LifConfig, LifState};
    use crate::tensor::{Shape4, Tensor4};

    fn small() -> LayerGraph<f32> {
        let cfg = NetworkConfig {
            depth: 3,
            base_channels: 2,
            timesteps: 3,
            height: 16,
            width: 16,
            ..Default::default()
        };
        LayerGraph::build(&cfg, 1).unwrap()
    }

    #[test]
    fn flops_formula_examples() {
        let first = ConvShape {
            in_channels: 3,
            out_channels: 64,
            kernel: 3,
            out_height: 512,
            out_width: 512,
        };
        assert_eq!(first.flops(), 452_984_832);
        let unit = ConvShape {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            out_height: 1,
            out_width: 1,
        };
        assert_eq!(unit.flops(), 1);
    }

    #[test]
    fn only_convolutions_have_flops() {
        let g = small();
        for (id, n) in g.nodes().iter().enumerate() {
            let is_conv = matches!(n.op, Op::Conv { .. } | Op::Deconv { .. });
            assert_eq!(layer_flops(&g, id).is_some(), is_conv, "{}", n.name);
        }
    }

    fn trace(layer: LayerSpikes, samples: usize) -> SpikeTrace {
        SpikeTrace {
            timesteps: layer.counts.len(),
            samples,
            layers: vec![layer],
        }
    }

    #[test]
    fn spike_rate_examples() {
        let two = trace(
            LayerSpikes {
                name: "a".into(),
                neurons: 2,
                counts: vec![2, 1, 0],
            },
            1,
        );
        assert_eq!(spike_rate(&two, "a").unwrap(), 1.5);
        let saturated = trace(
            LayerSpikes {
                name: "a".into(),
                neurons: 7,
                counts: vec![7; 5],
            },
            1,
        );
        assert_eq!(spike_rate(&saturated, "a").unwrap(), 5.0);
        let silent = trace(
            LayerSpikes {
                name: "a".into(),
                neurons: 7,
                counts: vec![0; 5],
            },
            1,
        );
        assert_eq!(spike_rate(&silent, "a").unwrap(), 0.0);
        assert!(matches!(spike_rate(&silent, "b"), Err(Error::Lookup(_))));
        // Counts summed over two images average back to the per-image rate.
        let pair = trace(
            LayerSpikes {
                name: "a".into(),
                neurons: 2,
                counts: vec![4, 2, 0],
            },
            2,
        );
        assert_eq!(spike_rate(&pair, "a").unwrap(), 1.5);
    }

    #[test]
    fn report_totals_are_consistent() {
        let g = small();
        let img = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |n, c, y, x| ((n + c * 3 + y * 5 + x * 7) % 10) as f32 / 9.0)
            .unwrap();
        let out = g.forward(&img).unwrap();
        let table = EnergyTable::default();
        let r = energy_report(&g, &out.trace, &table).unwrap();
        assert_eq!(r.layers.len(), g.conv_layer_count() + g.deconv_layer_count());
        assert_eq!(r.total_flops, network_flops(&g));
        let t = g.config().timesteps as f64;
        for l in &r.layers {
            assert_eq!(l.sops, l.flops as f64 * l.spike_rate);
            assert!((0.0..=t).contains(&l.spike_rate));
            assert!(l.sops <= l.flops as f64 * t);
        }
        let last = r.layers.last().unwrap();
        assert_eq!((last.layer.as_str(), last.rate_layer.as_str()), ("out.conv", "dec0.lif2"));
        assert_eq!(r.delta_e_percent, (r.e_cnn_j - r.e_snn_j) / r.e_cnn_j * 100.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.layers.len() + 2);
        assert!(csv.starts_with(REPORT_HEADER));
    }

    #[test]
    fn mismatched_trace_is_structural_error() {
        let g = small();
        let img = Tensor4::filled(Shape4::new(1, 3, 16, 16), 0.5).unwrap();
        let mut t = g.forward(&img).unwrap().trace;
        t.layers.pop();
        assert!(matches!(energy_report(&g, &t, &EnergyTable::default()), Err(Error::Structure(_))));
        let bad = EnergyTable { mac_pj: 0.0, acc_pj: 0.9 };
        let t = g.forward(&img).unwrap().trace;
        assert!(matches!(energy_report(&g, &t, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn higher_threshold_never_adds_spikes_in_one_step() {
        let shape = Shape4::new(1, 1, 4, 8);
        let input = Tensor4::from_fn(shape, |_, _, y, x| (y * 8 + x) as f64 / 40.0 - 0.1).unwrap();
        let mut prev = usize::MAX;
        for th in [0.05, 0.1, 0.25, 0.4, 0.5, 0.8] {
            let cfg = LifConfig {
                threshold: th,
                ..Default::default()
            };
            let state = LifState::quiescent(shape, cfg.initial_decay_param()).unwrap();
            let (_, spikes) = lif_step(&state, &input, &cfg).unwrap();
            let n = spikes.data().iter().filter(|&&s| s > 0.0).count();
            assert!(n <= prev, "threshold {th}: {n} > {prev}");
            prev = n;
        }
    }
}
