//! Differentiable forward pass used for training.
//!
//! A [`Net`] registers every tensor of a [`Model`] on a fresh [`Graph`] and
//! knows how to unroll the LSTM stack over a minibatch. Weight matrices with
//! a `.log_sigma` companion are variational: in sampling mode recurrent
//! matrices, embeddings and group weights get one realization per
//! minibatch (shared by all timesteps), while input and output projections
//! use per-example noise on the preactivation (local reparameterization).
//! Without sampling, variational tensors contribute their means.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{names, InputSpec, Model};
use crate::tensor::Tensor;
use crate::SeededRng;

/// A weight as used in the graph.
#[derive(Clone, Copy, Debug)]
enum Weight {
    Plain(Var),
    /// Local reparameterization: mean and variance matrices.
    Local { mean: Var, var: Var },
}

#[derive(Clone, Debug)]
struct LayerVars {
    wx: Weight,
    wh: Var,
    b: Var,
    z_gates: Option<Var>,
    z_h: Option<Var>,
}

/// Input to the first layer at one timestep for the whole batch.
#[derive(Clone, Debug)]
pub enum StepInput {
    Ids(Vec<usize>),
    Dense(Tensor),
}

/// Hidden and cell state of every layer, `[B, H]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl State {
    pub fn zeros(model: &Model, batch: usize) -> Self {
        let h: Vec<Tensor> = model.spec.hidden.iter().map(|&n| Tensor::zeros(&[batch, n])).collect();
        State { c: h.clone(), h }
    }
}

pub struct SequenceOutput {
    /// Top-layer hidden state at every step.
    pub top: Vec<Var>,
    pub final_h: Vec<Var>,
    pub final_c: Vec<Var>,
}

pub struct Net {
    /// Leaf for every registered tensor, by name.
    pub leaves: BTreeMap<String, Var>,
    /// Names of the variational (mean, log-sigma) pairs in the model.
    pub vd_pairs: Vec<(String, String)>,
    embed: Option<Var>,
    vocab_z: Option<Var>,
    feature_z: Option<Var>,
    layers: Vec<LayerVars>,
    fc: Weight,
    fc_b: Var,
    input: InputSpec,
    sampling: bool,
}

fn normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape from product")
}

/// Options for [`Net::build`].
#[derive(Clone, Debug, Default)]
pub struct NetOptions {
    /// Tensors registered as constants (no gradient, no KL).
    pub frozen: BTreeSet<String>,
}

impl Net {
    /// Registers the model on `graph`. When `rng` is given, variational
    /// tensors are sampled; otherwise their means are used.
    pub fn build(
        graph: &mut Graph,
        model: &Model,
        opts: &NetOptions,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Net> {
        let mut leaves = BTreeMap::new();
        for (name, t) in &model.params {
            let v = if opts.frozen.contains(name) {
                graph.constant(t.clone())
            } else {
                graph.param(t.clone())
            };
            leaves.insert(name.clone(), v);
        }
        let mut vd_pairs = Vec::new();
        for name in model.params.keys() {
            if let Some(base) = name.strip_suffix(names::LOG_SIGMA_SUFFIX) {
                if !model.has(base) {
                    return Err(Error::Contract(format!("{name} has no mean tensor {base}")));
                }
                vd_pairs.push((base.to_string(), name.clone()));
            }
        }
        let sampling = rng.is_some();
        let leaf = |n: &str| -> Result<Var> {
            leaves
                .get(n)
                .copied()
                .ok_or_else(|| Error::Contract(format!("model has no tensor named {n}")))
        };
        let is_vd = |n: &str| sampling && model.has(&names::log_sigma(n)) && !opts.frozen.contains(n);

        // Realize a per-minibatch sample: m + exp(log_sigma) * eps.
        let realize = |graph: &mut Graph, n: &str, rng: &mut Option<&mut SeededRng>| -> Result<Var> {
            let m = leaf(n)?;
            if !is_vd(n) {
                return Ok(m);
            }
            let ls = leaf(&names::log_sigma(n))?;
            let r = rng.as_deref_mut().expect("sampling implies rng");
            let eps = graph.constant(normal_tensor(graph.value(m).shape(), r));
            let sigma = graph.exp(ls);
            let noise = graph.mul(sigma, eps)?;
            graph.add(m, noise)
        };
        let local = |graph: &mut Graph, n: &str| -> Result<Weight> {
            let m = leaf(n)?;
            if !is_vd(n) {
                return Ok(Weight::Plain(m));
            }
            let ls = leaf(&names::log_sigma(n))?;
            let two_ls = graph.scale(ls, 2.0);
            let var = graph.exp(two_ls);
            Ok(Weight::Local { mean: m, var })
        };

        let embed = if model.has(names::EMBED) {
            Some(realize(graph, names::EMBED, &mut rng)?)
        } else {
            None
        };
        let vocab_z = if model.has(names::VOCAB_Z) {
            Some(realize(graph, names::VOCAB_Z, &mut rng)?)
        } else {
            None
        };
        let feature_z = if model.has(names::FEATURE_Z) {
            Some(realize(graph, names::FEATURE_Z, &mut rng)?)
        } else {
            None
        };
        let mut layers = Vec::new();
        for l in 0..model.spec.num_layers() {
            let z_gates = if model.has(&names::z_gates(l)) {
                Some(realize(graph, &names::z_gates(l), &mut rng)?)
            } else {
                None
            };
            let z_h = if model.has(&names::z_h(l)) {
                Some(realize(graph, &names::z_h(l), &mut rng)?)
            } else {
                None
            };
            layers.push(LayerVars {
                wx: local(graph, &names::wx(l))?,
                wh: realize(graph, &names::wh(l), &mut rng)?,
                b: leaf(&names::bias(l))?,
                z_gates,
                z_h,
            });
        }
        let fc = local(graph, names::FC_W)?;
        let fc_b = leaf(names::FC_B)?;
        Ok(Net {
            leaves,
            vd_pairs,
            embed,
            vocab_z,
            feature_z,
            layers,
            fc,
            fc_b,
            input: model.spec.input,
            sampling,
        })
    }

    /// `x @ W^T` for a possibly variational weight.
    fn apply(&self, graph: &mut Graph, w: Weight, x: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        match w {
            Weight::Plain(m) => graph.matmul_t(x, m),
            Weight::Local { mean, var } => {
                let mu = graph.matmul_t(x, mean)?;
                let x2 = graph.square(x);
                let v = graph.matmul_t(x2, var)?;
                self.local_noise(graph, mu, v, rng)
            }
        }
    }

    /// `mu + sqrt(v) * eps` with fresh per-entry noise.
    fn local_noise(&self, graph: &mut Graph, mu: Var, v: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let rng = rng.ok_or_else(|| Error::Contract("local reparameterization needs an rng".into()))?;
        let shape = graph.value(v).shape().to_vec();
        // Floor keeps sqrt differentiable where the variance vanishes.
        let eps_floor = graph.constant(Tensor::full(&shape, 1e-16));
        let v = graph.add(v, eps_floor)?;
        let sd = graph.sqrt(v);
        let eps = graph.constant(normal_tensor(&shape, rng));
        let noise = graph.mul(sd, eps)?;
        graph.add(mu, noise)
    }

    /// First-layer preactivation contribution `[B, 4H]` for one step.
    fn first_layer_pre(&self, graph: &mut Graph, step: &StepInput, rng: Option<&mut SeededRng>) -> Result<Var> {
        let wx = self.layers[0].wx;
        match (&self.input, step) {
            (InputSpec::OneHot { .. }, StepInput::Ids(ids)) => {
                if self.feature_z.is_some() {
                    return Err(Error::Config("one-hot input takes vocabulary group weights, not feature ones".into()));
                }
                let zt = match self.vocab_z {
                    Some(z) => Some(graph.lookup(z, ids)?),
                    None => None,
                };
                match wx {
                    Weight::Plain(m) => {
                        let cols = graph.lookup_cols(m, ids)?;
                        match zt {
                            Some(zt) => graph.mul(cols, zt),
                            None => Ok(cols),
                        }
                    }
                    Weight::Local { mean, var } => {
                        let mut mu = graph.lookup_cols(mean, ids)?;
                        let mut v = graph.lookup_cols(var, ids)?;
                        if let Some(zt) = zt {
                            mu = graph.mul(mu, zt)?;
                            let z2 = graph.square(zt);
                            v = graph.mul(v, z2)?;
                        }
                        self.local_noise(graph, mu, v, rng)
                    }
                }
            }
            (InputSpec::Embedding { .. }, StepInput::Ids(ids)) => {
                let emb = self.embed.ok_or_else(|| Error::Contract("missing embedding".into()))?;
                let mut x = graph.lookup(emb, ids)?;
                if let Some(z) = self.vocab_z {
                    let zt = graph.lookup(z, ids)?;
                    x = graph.mul(x, zt)?;
                }
                if let Some(z) = self.feature_z {
                    x = graph.mul(x, z)?;
                }
                self.apply(graph, wx, x, rng)
            }
            (InputSpec::Dense { .. }, StepInput::Dense(t)) => {
                let mut x = graph.constant(t.clone());
                if self.vocab_z.is_some() {
                    return Err(Error::Config("dense input has no vocabulary group weights".into()));
                }
                if let Some(z) = self.feature_z {
                    x = graph.mul(x, z)?;
                }
                self.apply(graph, wx, x, rng)
            }
            _ => Err(Error::Data("step input kind does not match the model input".into())),
        }
    }

    fn cell(
        &self,
        graph: &mut Graph,
        l: usize,
        pre_x: Var,
        h: Option<Var>,
        c: Option<Var>,
    ) -> Result<(Var, Var)> {
        let lv = &self.layers[l];
        let hdim = graph.value(lv.wh).cols();
        let mut pre = match h {
            Some(h) => {
                let ph = graph.matmul_t(h, lv.wh)?;
                graph.add(pre_x, ph)?
            }
            None => pre_x,
        };
        if let Some(z) = lv.z_gates {
            pre = graph.mul(pre, z)?;
        }
        pre = graph.add(pre, lv.b)?;
        let si = graph.slice_cols(pre, 0, hdim)?;
        let sf = graph.slice_cols(pre, hdim, hdim)?;
        let sg = graph.slice_cols(pre, 2 * hdim, hdim)?;
        let so = graph.slice_cols(pre, 3 * hdim, hdim)?;
        let i = graph.sigmoid(si);
        let f = graph.sigmoid(sf);
        let g = graph.tanh(sg);
        let o = graph.sigmoid(so);
        let ig = graph.mul(i, g)?;
        let c_new = match c {
            Some(c) => {
                let fc = graph.mul(f, c)?;
                graph.add(fc, ig)?
            }
            None => ig,
        };
        let tc = graph.tanh(c_new);
        let mut h_new = graph.mul(o, tc)?;
        if let Some(z) = lv.z_h {
            h_new = graph.mul(h_new, z)?;
        }
        Ok((h_new, c_new))
    }

    /// One step of layer `l` on an explicit layer input `x` of shape
    /// `[B, I_l]`. Input group weights are not applied.
    pub fn layer_step(
        &self,
        graph: &mut Graph,
        l: usize,
        x: Var,
        h: Option<Var>,
        c: Option<Var>,
        rng: Option<&mut SeededRng>,
    ) -> Result<(Var, Var)> {
        let lv = self
            .layers
            .get(l)
            .ok_or_else(|| Error::Contract(format!("no LSTM layer {l}")))?;
        let pre_x = self.apply(graph, lv.wx, x, rng)?;
        self.cell(graph, l, pre_x, h, c)
    }

    /// Unrolls the LSTM stack. `init` of `None` starts from zero state.
    /// `valid[t]` (one `[B, 1]` 0/1 column per step) freezes the state of
    /// sequences that have already ended.
    pub fn run_sequence(
        &self,
        graph: &mut Graph,
        steps: &[StepInput],
        init: Option<&State>,
        valid: Option<&[Tensor]>,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<SequenceOutput> {
        if steps.is_empty() {
            return Err(Error::Data("empty sequence".into()));
        }
        if self.sampling && rng.is_none() {
            return Err(Error::Contract("sampling net needs an rng".into()));
        }
        let nl = self.layers.len();
        let mut h: Vec<Option<Var>> = vec![None; nl];
        let mut c: Vec<Option<Var>> = vec![None; nl];
        if let Some(s) = init {
            for l in 0..nl {
                h[l] = Some(graph.constant(s.h[l].clone()));
                c[l] = Some(graph.constant(s.c[l].clone()));
            }
        }
        let mut top = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            let mut below: Option<Var> = None;
            for l in 0..nl {
                let pre_x = match below {
                    None => self.first_layer_pre(graph, step, rng.as_deref_mut())?,
                    Some(x) => self.apply(graph, self.layers[l].wx, x, rng.as_deref_mut())?,
                };
                let (mut hn, mut cn) = self.cell(graph, l, pre_x, h[l], c[l])?;
                if let Some(valid) = valid {
                    let m = graph.constant(valid[t].clone());
                    hn = masked_update(graph, hn, h[l], m)?;
                    cn = masked_update(graph, cn, c[l], m)?;
                }
                h[l] = Some(hn);
                c[l] = Some(cn);
                below = Some(hn);
            }
            top.push(below.expect("at least one layer"));
        }
        Ok(SequenceOutput {
            top,
            final_h: h.into_iter().map(|v| v.expect("ran")).collect(),
            final_c: c.into_iter().map(|v| v.expect("ran")).collect(),
        })
    }

    /// Output projection `[N, H] -> [N, O]`.
    pub fn output(&self, graph: &mut Graph, h: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let y = self.apply(graph, self.fc, h, rng)?;
        graph.add(y, self.fc_b)
    }

    /// Sum of the KL terms of every trainable variational pair.
    pub fn kl(&self, graph: &mut Graph, frozen: &BTreeSet<String>) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (m, ls) in &self.vd_pairs {
            if frozen.contains(m) {
                continue;
            }
            let kl = graph.vd_kl(self.leaves[m], self.leaves[ls])?;
            total = Some(match total {
                Some(t) => graph.add(t, kl)?,
                None => kl,
            });
        }
        Ok(total)
    }
}

/// `new` where `valid` is 1, `old` where it is 0 (zero when there is no
/// previous state).
fn masked_update(graph: &mut Graph, new: Var, old: Option<Var>, valid: Var) -> Result<Var> {
    match old {
        Some(old) => {
            let d = graph.sub(new, old)?;
            let d = graph.mul(d, valid)?;
            graph.add(old, d)
        }
        None => graph.mul(new, valid),
    }
}

/// Training objective pieces for one minibatch.
pub struct BatchGraph {
    pub data_loss: Var,
    pub logits: Var,
    pub final_state: Option<State>,
}

/// Builds the data loss of a language-model batch. `inputs[b][t]` and
/// `targets[b][t]`.
pub fn lm_loss(
    graph: &mut Graph,
    net: &Net,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    init: Option<&State>,
    mut rng: Option<&mut SeededRng>,
) -> Result<BatchGraph> {
    let b = inputs.len();
    let t_len = inputs.first().map_or(0, Vec::len);
    if b == 0 || t_len == 0 || targets.len() != b {
        return Err(Error::Data("empty or ragged language-model batch".into()));
    }
    let steps: Vec<StepInput> = (0..t_len)
        .map(|t| StepInput::Ids(inputs.iter().map(|row| row[t]).collect()))
        .collect();
    let out = net.run_sequence(graph, &steps, init, None, rng.as_deref_mut())?;
    let stacked = graph.concat(&out.top, 0)?;
    let logits = net.output(graph, stacked, rng)?;
    let flat_targets: Vec<usize> = (0..t_len).flat_map(|t| targets.iter().map(move |row| row[t])).collect();
    let data_loss = graph.softmax_xent(logits, &flat_targets, None)?;
    let final_state = State {
        h: out.final_h.iter().map(|&v| graph.value(v).clone()).collect(),
        c: out.final_c.iter().map(|&v| graph.value(v).clone()).collect(),
    };
    Ok(BatchGraph {
        data_loss,
        logits,
        final_state: Some(final_state),
    })
}

/// Classification loss on the state after each sequence's last real token.
pub fn classification_loss(
    graph: &mut Graph,
    net: &Net,
    ids: &[Vec<usize>],
    lengths: &[usize],
    labels: &[usize],
    mut rng: Option<&mut SeededRng>,
) -> Result<BatchGraph> {
    let b = ids.len();
    let t_len = ids.first().map_or(0, Vec::len);
    if b == 0 || t_len == 0 || lengths.len() != b || labels.len() != b {
        return Err(Error::Data("empty or inconsistent classification batch".into()));
    }
    let steps: Vec<StepInput> = (0..t_len)
        .map(|t| StepInput::Ids(ids.iter().map(|row| row[t]).collect()))
        .collect();
    let ragged = lengths.iter().any(|&l| l != t_len);
    let valid: Option<Vec<Tensor>> = ragged.then(|| {
        (0..t_len)
            .map(|t| {
                let col = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
                Tensor::from_vec(&[b, 1], col).expect("b rows")
            })
            .collect()
    });
    let out = net.run_sequence(graph, &steps, None, valid.as_deref(), rng.as_deref_mut())?;
    let last = *out.top.last().expect("non-empty");
    let logits = net.output(graph, last, rng)?;
    let data_loss = graph.softmax_xent(logits, labels, None)?;
    Ok(BatchGraph {
        data_loss,
        logits,
        final_state: None,
    })
}

/// Gaussian negative log-likelihood (up to a constant) of real targets
/// given predictions from the final state: `mean((y - yhat)^2) / (2 s^2)`.
pub fn regression_loss(
    graph: &mut Graph,
    net: &Net,
    inputs: &[Vec<Vec<f64>>],
    targets: &[Vec<f64>],
    noise_std: f64,
    mut rng: Option<&mut SeededRng>,
) -> Result<BatchGraph> {
    let b = inputs.len();
    let t_len = inputs.first().map_or(0, Vec::len);
    if b == 0 || t_len == 0 || targets.len() != b {
        return Err(Error::Data("empty or inconsistent regression batch".into()));
    }
    let d = inputs[0][0].len();
    let steps: Vec<StepInput> = (0..t_len)
        .map(|t| {
            let data = inputs.iter().flat_map(|seq| seq[t].iter().copied()).collect();
            Tensor::from_vec(&[b, d], data).map(StepInput::Dense)
        })
        .collect::<Result<_>>()?;
    let out = net.run_sequence(graph, &steps, None, None, rng.as_deref_mut())?;
    let last = *out.top.last().expect("non-empty");
    let pred = net.output(graph, last, rng)?;
    let o = targets[0].len();
    let y = graph.constant(Tensor::from_vec(&[b, o], targets.iter().flatten().copied().collect())?);
    let diff = graph.sub(pred, y)?;
    let sq = graph.square(diff);
    let mse = graph.mean(sq);
    let data_loss = graph.scale(mse, 1.0 / (2.0 * noise_std * noise_std));
    Ok(BatchGraph {
        data_loss,
        logits: pred,
        final_state: None,
    })
}
