//! Structure measurement: compression, neuron and gate counts, gate maps,
//! gradient-versus-lag profiles and vanilla-unit detection.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{first_layer_input, model_forward, ForwardOptions, GateKind, GateStatus, SequenceInput, StructureMasks};
use crate::model::Model;
use crate::net::{Net, NetOptions};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Which weight matrices enter the compression ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    /// Embedding, LSTM and output matrices.
    AllLayers,
    /// LSTM matrices only.
    LstmOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub total: usize,
    pub nonzero: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStructure {
    pub layer: usize,
    pub hidden: usize,
    pub neurons_kept: usize,
    pub nonconstant_gates: usize,
    /// Non-constant gates of kept neurons, in `i, f, g, o` order.
    pub nonconstant_by_gate: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub scope: CountScope,
    pub total_weights: usize,
    pub nonzero_weights: usize,
    /// `total / nonzero`; `None` when every weight is zero.
    pub compression: Option<f64>,
    pub all_zero: bool,
    pub tensors: Vec<TensorCount>,
    pub layers: Vec<LayerStructure>,
}

/// Kept neurons and non-constant gates among them.
pub fn count_structure(masks: &StructureMasks) -> (usize, usize) {
    let s = layer_structure(0, masks);
    (s.neurons_kept, s.nonconstant_gates)
}

fn layer_structure(layer: usize, masks: &StructureMasks) -> LayerStructure {
    let mut by_gate = [0usize; 4];
    let mut kept = 0;
    for k in 0..masks.hidden() {
        if !masks.is_kept(k) {
            continue;
        }
        kept += 1;
        for g in GateKind::ALL {
            if masks.gate(g, k).is_active() {
                by_gate[g.index()] += 1;
            }
        }
    }
    LayerStructure {
        layer,
        hidden: masks.hidden(),
        neurons_kept: kept,
        nonconstant_gates: by_gate.iter().sum(),
        nonconstant_by_gate: by_gate,
    }
}

pub fn compression_report(model: &Model, masks: &[StructureMasks], scope: CountScope) -> Result<CompressionReport> {
    if masks.len() != model.spec.num_layers() {
        return Err(Error::dim(
            "compression_report",
            format!("{} masks for {} layers", masks.len(), model.spec.num_layers()),
        ));
    }
    let names = match scope {
        CountScope::AllLayers => model.weight_names(),
        CountScope::LstmOnly => model.lstm_weight_names(),
    };
    let tensors: Vec<TensorCount> = names
        .into_iter()
        .map(|n| {
            let t = model.get(&n)?;
            Ok(TensorCount {
                total: t.len(),
                nonzero: t.count_nonzero(),
                name: n,
            })
        })
        .collect::<Result<_>>()?;
    let total: usize = tensors.iter().map(|t| t.total).sum();
    let nonzero: usize = tensors.iter().map(|t| t.nonzero).sum();
    Ok(CompressionReport {
        scope,
        total_weights: total,
        nonzero_weights: nonzero,
        compression: (nonzero > 0).then(|| total as f64 / nonzero as f64),
        all_zero: nonzero == 0,
        tensors,
        layers: masks.iter().enumerate().map(|(l, m)| layer_structure(l, m)).collect(),
    })
}

impl CompressionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ratio = match self.compression {
            Some(c) => format!("{c:.2}x"),
            None => "undefined (all weights zero)".to_string(),
        };
        let _ = writeln!(
            s,
            "compression {ratio}  ({} of {} weights nonzero, {:?})",
            self.nonzero_weights, self.total_weights, self.scope
        );
        for t in &self.tensors {
            let _ = writeln!(s, "  {:<12} {:>9} / {:>9}", t.name, t.nonzero, t.total);
        }
        for l in &self.layers {
            let [i, f, g, o] = l.nonconstant_by_gate;
            let _ = writeln!(
                s,
                "  layer {}: neurons {}/{}  non-constant gates {}/{}  (i {i}, f {f}, g {g}, o {o})",
                l.layer,
                l.neurons_kept,
                l.hidden,
                l.nonconstant_gates,
                4 * l.hidden
            );
        }
        s
    }
}

/// Kept neuron whose input, forget and information-flow gates are all
/// constant. `sign` is the sign of the constant information flow, so the
/// unit saturates to `h = sign * o`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaUnit {
    pub neuron: usize,
    pub sign: i8,
}

pub fn detect_vanilla_units(masks: &StructureMasks) -> Vec<VanillaUnit> {
    let mut out = Vec::new();
    for k in masks.kept() {
        let constant = |g| match masks.gate(g, k) {
            GateStatus::Constant(v) => Some(v),
            GateStatus::Active => None,
        };
        if let (Some(_), Some(_), Some(g)) = (
            constant(GateKind::Input),
            constant(GateKind::Forget),
            constant(GateKind::Cell),
        ) {
            let sign = if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                0
            };
            out.push(VanillaUnit { neuron: k, sign });
        }
    }
    out
}

/// Norm of `d h_T[j] / d x_{T-t}` over the layer-input dimensions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagNorm {
    #[default]
    L2,
    /// Sum of absolute values.
    L1,
}

/// `mean[j][t]` is the average over sequences of the gradient norm of
/// neuron `j` at the last step with respect to the layer input `t` steps
/// earlier; `count[t]` sequences were long enough to contribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagProfile {
    pub layer: usize,
    pub mean: Vec<Vec<f64>>,
    pub count: Vec<usize>,
}

/// Layer-input vectors of `layer` at every step of one sequence.
fn layer_inputs(model: &Model, input: &SequenceInput, layer: usize) -> Result<Vec<Vec<f64>>> {
    if layer == 0 {
        (0..input.len()).map(|t| first_layer_input(model, input, t)).collect()
    } else {
        let out = model_forward(model, None, input, &ForwardOptions::default())?;
        Ok(out.hidden[layer - 1].clone())
    }
}

/// Gradient-versus-lag profile of LSTM layer `layer` of a deterministic
/// model. Sequences shorter than `max_lag + 1` contribute only the lags
/// they have.
pub fn gradient_lag_profile(
    model: &Model,
    sequences: &[SequenceInput],
    layer: usize,
    max_lag: usize,
    norm: LagNorm,
) -> Result<LagProfile> {
    if layer >= model.spec.num_layers() {
        return Err(Error::Config(format!("model has no LSTM layer {layer}")));
    }
    if sequences.is_empty() {
        return Err(Error::Data("no sequences for the lag profile".into()));
    }
    let base = model.base_model()?;
    let hdim = base.spec.hidden[layer];
    let mut sum = vec![vec![0.0; max_lag + 1]; hdim];
    let mut count = vec![0usize; max_lag + 1];
    for seq in sequences {
        let xs = layer_inputs(&base, seq, layer)?;
        let t_len = xs.len();
        if t_len == 0 {
            continue;
        }
        let mut graph = Graph::new();
        let net = Net::build(&mut graph, &base, &NetOptions::default(), None)?;
        let leaves: Vec<Var> = xs
            .iter()
            .map(|x| graph.param(Tensor::matrix(1, x.len(), x.clone()).expect("row vector")))
            .collect();
        let (mut h, mut c) = (None, None);
        for &x in &leaves {
            let (hn, cn) = net.layer_step(&mut graph, layer, x, h, c, None)?;
            h = Some(hn);
            c = Some(cn);
        }
        let h_last = h.expect("non-empty sequence");
        let lags = max_lag.min(t_len - 1);
        for j in 0..hdim {
            let mut seed = Tensor::zeros(&[1, hdim]);
            seed.data_mut()[j] = 1.0;
            let grads = graph.backward_with_seed(h_last, seed)?;
            for t in 0..=lags {
                let g = grads.get_or_zeros(&graph, leaves[t_len - 1 - t]);
                let v = match norm {
                    LagNorm::L2 => g.norm_sq().sqrt(),
                    LagNorm::L1 => g.data().iter().map(|x| x.abs()).sum(),
                };
                sum[j][t] += v;
            }
        }
        for c in count.iter_mut().take(lags + 1) {
            *c += 1;
        }
    }
    let mean = sum
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&count)
                .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                .collect()
        })
        .collect();
    Ok(LagProfile { layer, mean, count })
}

impl LagProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("neuron,lag,mean_norm,count\n");
        for (j, row) in self.mean.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{j},{t},{v:e},{}", self.count[t]);
            }
        }
        s
    }

    pub fn from_csv(layer: usize, text: &str) -> Result<LagProfile> {
        let mut rows: Vec<(usize, usize, f64, usize)> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let err = || Error::Parse {
                path: "lag profile".into(),
                line: i + 1,
                msg: format!("bad row {line:?}"),
            };
            if f.len() != 4 {
                return Err(err());
            }
            rows.push((
                f[0].parse().map_err(|_| err())?,
                f[1].parse().map_err(|_| err())?,
                f[2].parse().map_err(|_| err())?,
                f[3].parse().map_err(|_| err())?,
            ));
        }
        let neurons = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let lags = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut mean = vec![vec![0.0; lags]; neurons];
        let mut count = vec![0; lags];
        for (j, t, v, n) in rows {
            mean[j][t] = v;
            count[t] = n;
        }
        Ok(LagProfile { layer, mean, count })
    }
}

/// One cell of a gate map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateCell {
    pub layer: usize,
    pub gate: GateKind,
    pub neuron: usize,
    pub status: GateStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    pub neurons: Vec<usize>,
    pub cells: Vec<GateCell>,
}

/// Up to `k` kept neurons chosen uniformly with a seeded generator, in
/// increasing order. `None` selects every kept neuron.
pub fn choose_neurons(masks: &StructureMasks, k: Option<usize>, seed: u64) -> Vec<usize> {
    let kept = masks.kept();
    match k {
        Some(k) if k < kept.len() => {
            let mut rng = SeededRng::seed_from_u64(seed);
            let mut pick: Vec<usize> = sample(&mut rng, kept.len(), k).into_iter().map(|i| kept[i]).collect();
            pick.sort_unstable();
            pick
        }
        _ => kept,
    }
}

/// Gate map of one layer: one row per gate kind, one column per neuron.
pub fn render_gate_map(masks: &StructureMasks, layer: usize, neurons: &[usize]) -> Result<GateMap> {
    for &k in neurons {
        if k >= masks.hidden() || !masks.is_kept(k) {
            return Err(Error::Contract(format!("neuron {k} is not a kept neuron of layer {layer}")));
        }
    }
    let mut cells = Vec::with_capacity(4 * neurons.len());
    for g in GateKind::ALL {
        for &k in neurons {
            cells.push(GateCell {
                layer,
                gate: g,
                neuron: k,
                status: masks.gate(g, k),
            });
        }
    }
    Ok(GateMap {
        neurons: neurons.to_vec(),
        cells,
    })
}

impl GateMap {
    /// `layer,gate,neuron,status,value,value_2dp`; `value` carries full
    /// precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,gate,neuron,status,value,value_2dp\n");
        for c in &self.cells {
            let (status, value, short) = match c.status {
                GateStatus::Active => ("active", String::new(), String::new()),
                GateStatus::Constant(v) => ("constant", format!("{v:?}"), format!("{v:.2}")),
            };
            let _ = writeln!(s, "{},{},{},{status},{value},{short}", c.layer, c.gate.symbol(), c.neuron);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<GateMap> {
        let mut cells = Vec::new();
        let mut neurons = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let err = |m: &str| Error::Parse {
                path: "gate map".into(),
                line: i + 1,
                msg: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let gate = f[1]
                .chars()
                .next()
                .and_then(GateKind::from_symbol)
                .ok_or_else(|| err("bad gate"))?;
            let status = match f[3] {
                "active" => GateStatus::Active,
                "constant" => GateStatus::Constant(f[4].parse().map_err(|_| err("bad value"))?),
                _ => return Err(err("bad status")),
            };
            let neuron: usize = f[2].parse().map_err(|_| err("bad neuron"))?;
            if gate == GateKind::Input {
                neurons.push(neuron);
            }
            cells.push(GateCell {
                layer: f[0].parse().map_err(|_| err("bad layer"))?,
                gate,
                neuron,
                status,
            });
        }
        Ok(GateMap { neurons, cells })
    }

    /// Aligned text grid; active cells show `*`, constant cells their
    /// value to two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::from("gate");
        for k in &self.neurons {
            let _ = write!(s, " {k:>6}");
        }
        s.push('\n');
        for (row, g) in GateKind::ALL.iter().enumerate() {
            let _ = write!(s, "{:<4}", g.symbol());
            for c in &self.cells[row * self.neurons.len()..(row + 1) * self.neurons.len()] {
                match c.status {
                    GateStatus::Active => {
                        let _ = write!(s, " {:>6}", "*");
                    }
                    GateStatus::Constant(v) => {
                        let _ = write!(s, " {v:>6.2}");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
