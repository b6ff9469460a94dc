//! LSTM cell, structure masks and the mask-aware inference forward pass.
//!
//! A gate whose ingoing row is entirely zero outputs the activation of its
//! bias regardless of input, so the forward pass substitutes the
//! precomputed constant and skips that row. A neuron whose outgoing
//! columns are entirely zero cannot influence any output; its state is not
//! computed at all and its hidden value is reported as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, InputSpec, LstmParams, Model, TaskKind};
use crate::tensor::{dot, sigmoid, Tensor};

/// The four gates of an LSTM unit, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Input,
    Forget,
    /// Information flow (candidate cell content).
    Cell,
    Output,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [GateKind::Input, GateKind::Forget, GateKind::Cell, GateKind::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> char {
        match self {
            GateKind::Input => 'i',
            GateKind::Forget => 'f',
            GateKind::Cell => 'g',
            GateKind::Output => 'o',
        }
    }

    pub fn from_symbol(c: char) -> Option<GateKind> {
        GateKind::ALL.into_iter().find(|g| g.symbol() == c)
    }

    pub fn activate(self, x: f64) -> f64 {
        match self {
            GateKind::Cell => x.tanh(),
            _ => sigmoid(x),
        }
    }
}

/// Value of a gate with no ingoing connections: the gate activation of its
/// bias.
pub fn constant_gate_value(bias: f64, gate: GateKind) -> f64 {
    gate.activate(bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum GateStatus {
    Active,
    Constant(f64),
}

impl GateStatus {
    pub fn is_active(self) -> bool {
        matches!(self, GateStatus::Active)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronStatus {
    Kept,
    Removed,
}

/// Gate and neuron status of one LSTM layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMasks {
    /// `gates[g][k]` for gate kind `g` (storage order) and neuron `k`.
    pub gates: [Vec<GateStatus>; 4],
    pub neurons: Vec<NeuronStatus>,
}

impl StructureMasks {
    pub fn dense(hidden: usize) -> Self {
        StructureMasks {
            gates: std::array::from_fn(|_| vec![GateStatus::Active; hidden]),
            neurons: vec![NeuronStatus::Kept; hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.neurons.len()
    }

    pub fn gate(&self, g: GateKind, k: usize) -> GateStatus {
        self.gates[g.index()][k]
    }

    pub fn is_kept(&self, k: usize) -> bool {
        self.neurons[k] == NeuronStatus::Kept
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.hidden()).filter(|&k| self.is_kept(k)).collect()
    }

    /// Checks sizes and that constant values lie in the range of their
    /// activation.
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        for g in GateKind::ALL {
            let col = &self.gates[g.index()];
            if col.len() != h {
                return Err(Error::dim("masks", format!("{} gate entries for {h} neurons", col.len())));
            }
            for s in col {
                if let GateStatus::Constant(v) = *s {
                    // Closed ranges: large biases saturate to the endpoints
                    // in floating point.
                    let ok = match g {
                        GateKind::Cell => (-1.0..=1.0).contains(&v),
                        _ => (0.0..=1.0).contains(&v),
                    };
                    if !ok {
                        return Err(Error::Contract(format!(
                            "constant {} gate value {v} outside activation range",
                            g.symbol()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runtime switches and instrumentation for the inference forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// For a kept neuron whose `i`, `f` and `g` gates are constant with a
    /// nonzero information flow, output `sign(g) * o` instead of
    /// `o * tanh(c)`. This is the saturated limit of such a unit; it is
    /// not exact early in a sequence.
    pub vanilla_shortcut: bool,
}

/// Multiply-accumulate counts observed by the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub macs: u64,
}

/// One LSTM step.
///
/// Without masks this is the textbook update. With masks, constant gates use
/// their stored value, removed neurons are skipped (their `h` and `c` are
/// zero), and recurrent products only visit kept neurons.
pub fn lstm_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
    masks: Option<&StructureMasks>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut count = OpCount::default();
    lstm_cell_forward_with(x, h_prev, c_prev, params, masks, &ForwardOptions::default(), &mut count)
}

pub fn lstm_cell_forward_with(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
    masks: Option<&StructureMasks>,
    opts: &ForwardOptions,
    count: &mut OpCount,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let hdim = params.hidden();
    let idim = params.input();
    if x.len() != idim || h_prev.len() != hdim || c_prev.len() != hdim {
        return Err(Error::dim(
            "lstm_cell",
            format!(
                "x {} (want {idim}), h {} / c {} (want {hdim})",
                x.len(),
                h_prev.len(),
                c_prev.len()
            ),
        ));
    }
    if let Some(m) = masks {
        if m.hidden() != hdim {
            return Err(Error::dim("lstm_cell", format!("masks for {} neurons, layer has {hdim}", m.hidden())));
        }
    }
    let kept: Vec<usize> = match masks {
        Some(m) => m.kept(),
        None => (0..hdim).collect(),
    };
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let bias = params.b.data();

    for &k in &kept {
        let mut gate = [0.0; 4];
        for g in GateKind::ALL {
            let row = g.index() * hdim + k;
            let status = masks.map_or(GateStatus::Active, |m| m.gate(g, k));
            gate[g.index()] = match status {
                GateStatus::Constant(v) => v,
                GateStatus::Active => {
                    let wh = params.wh.row(row);
                    let mut pre = bias[row] + dot(params.wx.row(row), x);
                    for &j in &kept {
                        pre += wh[j] * h_prev[j];
                    }
                    count.macs += (idim + kept.len()) as u64;
                    g.activate(pre)
                }
            };
        }
        let [i, f, g, o] = gate;
        c[k] = f * c_prev[k] + i * g;
        let shortcut = opts.vanilla_shortcut
            && g != 0.0
            && masks.is_some_and(|m| {
                !m.gate(GateKind::Input, k).is_active()
                    && !m.gate(GateKind::Forget, k).is_active()
                    && !m.gate(GateKind::Cell, k).is_active()
            });
        h[k] = if shortcut { g.signum() * o } else { o * c[k].tanh() };
    }
    Ok((h, c))
}

/// Training-time group weights of one layer: `z_gates` (`4H`, storage
/// order) multiplies gate preactivations before the bias, `z_h` (`H`)
/// multiplies the hidden output.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupValues {
    pub z_gates: Vec<f64>,
    pub z_h: Vec<f64>,
}

impl GroupValues {
    pub fn ones(hidden: usize) -> Self {
        GroupValues {
            z_gates: vec![1.0; 4 * hidden],
            z_h: vec![1.0; hidden],
        }
    }
}

/// LSTM step with explicit group weights:
/// `gate = act((Wx x + Wh h) * z_gate + b)`, `h = o * tanh(c) * z_h`.
pub fn lstm_cell_forward_grouped(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
    z: &GroupValues,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let hdim = params.hidden();
    if z.z_gates.len() != 4 * hdim || z.z_h.len() != hdim {
        return Err(Error::dim("lstm_cell_grouped", "group weight lengths"));
    }
    if x.len() != params.input() || h_prev.len() != hdim || c_prev.len() != hdim {
        return Err(Error::dim("lstm_cell_grouped", "state sizes"));
    }
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    for k in 0..hdim {
        let mut gate = [0.0; 4];
        for g in GateKind::ALL {
            let row = g.index() * hdim + k;
            let lin = dot(params.wx.row(row), x) + dot(params.wh.row(row), h_prev);
            gate[g.index()] = g.activate(lin * z.z_gates[row] + params.b.data()[row]);
        }
        let [i, f, g, o] = gate;
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh() * z.z_h[k];
    }
    Ok((h, c))
}

/// Folds group weights into the weight matrices: row `r` of `wx` and `wh`
/// is scaled by `z_gates[r]`, column `k` of `wh` by `z_h[k]`.
///
/// The neuron factor also scales whatever consumes this layer's output; use
/// [`scale_columns`] on the next layer's input matrix with the same `z_h`.
/// With that, the plain cell on folded parameters reproduces the grouped
/// cell exactly up to rounding.
pub fn fold_group_weights(params: &LstmParams, z: &GroupValues) -> Result<LstmParams> {
    params.validate()?;
    let hdim = params.hidden();
    if z.z_gates.len() != 4 * hdim || z.z_h.len() != hdim {
        return Err(Error::dim("fold_group_weights", "group weight lengths"));
    }
    let mut out = params.clone();
    for r in 0..4 * hdim {
        let zg = z.z_gates[r];
        for w in out.wx.row_mut(r) {
            *w *= zg;
        }
        for (k, w) in out.wh.row_mut(r).iter_mut().enumerate() {
            *w = *w * z.z_h[k] * zg;
        }
    }
    Ok(out)
}

/// Scales column `k` of `w` by `scale[k]`.
pub fn scale_columns(w: &mut Tensor, scale: &[f64]) -> Result<()> {
    let (r, c) = w.dims2();
    if scale.len() != c {
        return Err(Error::dim("scale_columns", format!("{} scales for {c} columns", scale.len())));
    }
    for i in 0..r {
        for (x, s) in w.row_mut(i).iter_mut().zip(scale) {
            *x *= s;
        }
    }
    Ok(())
}

/// Scales row `r` of `w` by `scale[r]`.
pub fn scale_rows(w: &mut Tensor, scale: &[f64]) -> Result<()> {
    let r = w.rows();
    if scale.len() != r {
        return Err(Error::dim("scale_rows", format!("{} scales for {r} rows", scale.len())));
    }
    for (i, s) in scale.iter().enumerate() {
        for x in w.row_mut(i) {
            *x *= s;
        }
    }
    Ok(())
}

/// A model input sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceInput {
    Tokens(Vec<usize>),
    /// One feature vector per step.
    Dense(Vec<Vec<f64>>),
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        match self {
            SequenceInput::Tokens(t) => t.len(),
            SequenceInput::Dense(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of [`model_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Per-step logits for language models, a single row otherwise.
    pub logits: Vec<Vec<f64>>,
    /// Hidden states of every layer at every step, `[layer][step][unit]`.
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub ops: OpCount,
}

/// Vector entering the first LSTM layer at one step.
pub(crate) fn first_layer_input(model: &Model, input: &SequenceInput, t: usize) -> Result<Vec<f64>> {
    match (&model.spec.input, input) {
        (InputSpec::OneHot { vocab }, SequenceInput::Tokens(ids)) => {
            let id = model.spec.resolve_token(ids[t])?;
            let mut x = vec![0.0; *vocab];
            x[id] = 1.0;
            Ok(x)
        }
        (InputSpec::Embedding { .. }, SequenceInput::Tokens(ids)) => {
            let id = model.spec.resolve_token(ids[t])?;
            Ok(model.get(names::EMBED)?.row(id).to_vec())
        }
        (InputSpec::Dense { dim }, SequenceInput::Dense(rows)) => {
            if rows[t].len() != *dim {
                return Err(Error::dim("model_forward", format!("input width {} != {dim}", rows[t].len())));
            }
            Ok(rows[t].clone())
        }
        _ => Err(Error::Data("input kind does not match the model".into())),
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64], count: &mut OpCount) -> Vec<f64> {
    count.macs += (w.rows() * w.cols()) as u64;
    (0..w.rows()).map(|r| b.data()[r] + dot(w.row(r), x)).collect()
}

/// Deterministic forward pass over one sequence, starting from zero state.
pub fn model_forward(
    model: &Model,
    masks: Option<&[StructureMasks]>,
    input: &SequenceInput,
    opts: &ForwardOptions,
) -> Result<ModelOutput> {
    let spec = &model.spec;
    let nl = spec.num_layers();
    if input.is_empty() {
        return Err(Error::Data("empty input sequence".into()));
    }
    if let Some(m) = masks {
        if m.len() != nl {
            return Err(Error::dim("model_forward", format!("{} mask sets for {nl} layers", m.len())));
        }
    }
    let layers: Vec<LstmParams> = (0..nl).map(|l| model.layer(l)).collect::<Result<_>>()?;
    let fc_w = model.get(names::FC_W)?;
    let fc_b = model.get(names::FC_B)?;
    let mut h: Vec<Vec<f64>> = spec.hidden.iter().map(|&n| vec![0.0; n]).collect();
    let mut c = h.clone();
    let mut ops = OpCount::default();
    let mut hidden = vec![Vec::with_capacity(input.len()); nl];
    let mut logits = Vec::new();

    for t in 0..input.len() {
        let mut x = first_layer_input(model, input, t)?;
        for l in 0..nl {
            let (hn, cn) = lstm_cell_forward_with(
                &x,
                &h[l],
                &c[l],
                &layers[l],
                masks.map(|m| &m[l]),
                opts,
                &mut ops,
            )?;
            h[l] = hn;
            c[l] = cn;
            hidden[l].push(h[l].clone());
            x = h[l].clone();
        }
        if spec.task == TaskKind::LanguageModel {
            logits.push(affine(fc_w, fc_b, &x, &mut ops));
        }
    }
    if spec.task != TaskKind::LanguageModel {
        logits.push(affine(fc_w, fc_b, &h[nl - 1], &mut ops));
    }
    Ok(ModelOutput { logits, hidden, ops })
}
