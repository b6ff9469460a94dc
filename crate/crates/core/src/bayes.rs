//! Sparse variational dropout with group weights on gates, neurons and
//! inputs.
//!
//! Every sparsified weight carries a factorized normal posterior
//! `N(m, sigma^2)` under a log-uniform prior. Group weights `z` are
//! variational scalars of the same kind: `z_gates` multiplies each gate
//! preactivation before the bias, `z_h` multiplies each neuron's output,
//! and `vocab.z` / `feature.z` multiply the inputs. After training, entries whose
//! signal-to-noise ratio `m^2 / sigma^2` falls below the threshold are
//! zeroed, the remaining means are kept, and the group weights are folded
//! into the weight matrices.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{fold_group_weights, scale_columns, scale_rows, GroupValues, StructureMasks};
use crate::model::{names, InputSpec, Model};
use crate::prune::{derive_structure_pruned, Grouping};
use crate::tensor::{sigmoid, Tensor};
use crate::SeededRng;

/// Constants of the sigmoid-based approximation to the negative KL
/// divergence between the posterior and the log-uniform prior.
pub const KL_K1: f64 = 0.63576;
pub const KL_K2: f64 = 1.87320;
pub const KL_K3: f64 = 1.48695;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Approximate KL of one weight as a function of `log alpha`, where
/// `alpha = sigma^2 / m^2`:
/// `KL ≈ -(k1 * sigmoid(k2 + k3 * log_alpha) - 0.5 * log(1 + 1/alpha) - k1)`.
pub fn kl_of_log_alpha(log_alpha: f64) -> f64 {
    if log_alpha == f64::INFINITY {
        return 0.0;
    }
    -(KL_K1 * sigmoid(KL_K2 + KL_K3 * log_alpha) - 0.5 * softplus(-log_alpha) - KL_K1)
}

/// Per-weight KL and its partial derivatives `(kl, d/dm, d/dlog_sigma)`.
///
/// `m = 0` is the `alpha -> inf` limit, where the KL and both derivatives
/// vanish.
pub(crate) fn kl_element(m: f64, log_sigma: f64) -> (f64, f64, f64) {
    if m == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let m2 = m * m;
    let s2 = (2.0 * log_sigma).exp();
    let log_alpha = 2.0 * log_sigma - m2.ln();
    let kl = kl_of_log_alpha(log_alpha);
    let s = sigmoid(KL_K2 + KL_K3 * log_alpha);
    let ds = s * (1.0 - s);
    // 1 / (1 + alpha), computed without overflow.
    let inv_one_plus_alpha = m2 / (m2 + s2);
    let dkl_dla = -KL_K1 * KL_K3 * ds - 0.5 * inv_one_plus_alpha;
    let dkl_dm = 2.0 * KL_K1 * KL_K3 * ds / m + m / (m2 + s2);
    (kl, dkl_dm, 2.0 * dkl_dla)
}

/// Variational parameters of a tensor of weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VdParam {
    pub mean: Tensor,
    pub log_sigma: Tensor,
}

impl VdParam {
    pub fn new(mean: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mean.shape() != log_sigma.shape() {
            return Err(Error::dim(
                "vd_param",
                format!("mean {:?} vs log_sigma {:?}", mean.shape(), log_sigma.shape()),
            ));
        }
        if let Some(i) = log_sigma.first_non_finite() {
            return Err(Error::NonFinite(format!("log_sigma[{i}]")));
        }
        Ok(VdParam { mean, log_sigma })
    }

    pub fn from_model(model: &Model, name: &str) -> Result<Self> {
        Self::new(model.get(name)?.clone(), model.get(&names::log_sigma(name))?.clone())
    }

    /// Signal-to-noise ratio `m^2 / sigma^2` of every entry.
    pub fn snr(&self) -> Tensor {
        self.mean
            .zip_map(&self.log_sigma, |m, ls| m * m * (-2.0 * ls).exp())
    }

    /// Summed KL divergence from the log-uniform prior.
    pub fn kl(&self) -> f64 {
        kl_term(self)
    }
}

/// One posterior sample `m + sigma * eps`, `eps ~ N(0, 1)`.
pub fn sample_realization(vd: &VdParam, rng: &mut SeededRng) -> Tensor {
    let data = vd
        .mean
        .data()
        .iter()
        .zip(vd.log_sigma.data())
        .map(|(&m, &ls)| {
            let e: f64 = StandardNormal.sample(rng);
            m + ls.exp() * e
        })
        .collect();
    Tensor::from_vec(vd.mean.shape(), data).expect("shape of the mean")
}

pub fn kl_term(vd: &VdParam) -> f64 {
    vd.mean
        .data()
        .iter()
        .zip(vd.log_sigma.data())
        .map(|(&m, &ls)| kl_element(m, ls).0)
        .sum()
}

/// Negative ELBO estimate for a minibatch of `batch` examples from a
/// dataset of `dataset` examples: `(N / B) * data_loss + kl`.
pub fn elbo_loss(data_loss: f64, kl_total: f64, dataset: usize, batch: usize) -> Result<f64> {
    if batch == 0 || dataset < batch {
        return Err(Error::Contract(format!(
            "need N >= B >= 1, got N={dataset}, B={batch}"
        )));
    }
    Ok(dataset as f64 / batch as f64 * data_loss + kl_total)
}

/// `true` where the entry survives: `m^2 / sigma^2 >= tau`.
pub fn snr_mask(vd: &VdParam, tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("SNR threshold must be positive, got {tau}")));
    }
    Ok(vd.snr().data().iter().map(|&s| s >= tau).collect())
}

/// Which sparsity levels carry variational group weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayesVariant {
    /// Individual weights only.
    #[serde(rename = "W")]
    W,
    /// Weights and neurons.
    #[serde(rename = "W+N")]
    WN,
    /// Weights, gates and neurons.
    #[serde(rename = "W+G+N")]
    WGN,
}

impl BayesVariant {
    pub fn has_neuron_groups(self) -> bool {
        !matches!(self, BayesVariant::W)
    }

    pub fn has_gate_groups(self) -> bool {
        matches!(self, BayesVariant::WGN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesConfig {
    pub variant: BayesVariant,
    #[serde(default = "default_tau")]
    pub snr_threshold: f64,
    #[serde(default = "default_log_sigma")]
    pub log_sigma_init: f64,
    /// One group weight per vocabulary entry (token input only).
    #[serde(default)]
    pub vocab_groups: bool,
    /// One group weight per component of the first-layer input vector;
    /// only used by the W+N and W+G+N variants.
    #[serde(default)]
    pub feature_groups: bool,
    /// Keep group weights at exactly 1, untrained and outside the KL.
    #[serde(default)]
    pub freeze_group_weights: bool,
}

fn default_tau() -> f64 {
    0.05
}

fn default_log_sigma() -> f64 {
    -3.0
}

impl BayesConfig {
    pub fn new(variant: BayesVariant) -> Self {
        BayesConfig {
            variant,
            snr_threshold: default_tau(),
            log_sigma_init: default_log_sigma(),
            vocab_groups: false,
            feature_groups: false,
            freeze_group_weights: false,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.snr_threshold > 0.0) {
            return Err(Error::Config("snr_threshold must be positive".into()));
        }
        if !self.log_sigma_init.is_finite() {
            return Err(Error::Config("log_sigma_init must be finite".into()));
        }
        match model.spec.input {
            InputSpec::Dense { .. } if self.vocab_groups => {
                return Err(Error::Config("vocabulary group weights need token input".into()))
            }
            InputSpec::OneHot { .. } if self.feature_groups => {
                return Err(Error::Config(
                    "one-hot input takes vocabulary group weights, not feature ones".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Names of all group-weight mean tensors this configuration adds.
    pub fn group_names(&self, model: &Model) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_groups {
            v.push(names::VOCAB_Z.to_string());
        }
        if !self.variant.has_neuron_groups() {
            return v;
        }
        if self.feature_groups {
            v.push(names::FEATURE_Z.to_string());
        }
        for l in 0..model.spec.num_layers() {
            if self.variant.has_gate_groups() {
                v.push(names::z_gates(l));
            }
            v.push(names::z_h(l));
        }
        v
    }
}

/// Turns a plain model into a variational one: every weight matrix gets a
/// log-sigma companion and the configured group weights are added with
/// mean 1.
pub fn make_variational(model: &Model, cfg: &BayesConfig) -> Result<Model> {
    cfg.validate(model)?;
    let mut out = model.base_model()?;
    for n in out.weight_names() {
        let shape = out.get(&n)?.shape().to_vec();
        out.params
            .insert(names::log_sigma(&n), Tensor::full(&shape, cfg.log_sigma_init));
    }
    for n in cfg.group_names(model) {
        let len = group_len(model, &n)?;
        out.params.insert(n.clone(), Tensor::ones(&[len]));
        if !cfg.freeze_group_weights {
            out.params
                .insert(names::log_sigma(&n), Tensor::full(&[len], cfg.log_sigma_init));
        }
    }
    Ok(out)
}

fn group_len(model: &Model, name: &str) -> Result<usize> {
    if name == names::VOCAB_Z {
        return model
            .spec
            .input
            .vocab()
            .ok_or_else(|| Error::Config("vocabulary group weights need token input".into()));
    }
    if name == names::FEATURE_Z {
        return Ok(model.spec.input.lstm_input_dim());
    }
    for l in 0..model.spec.num_layers() {
        let h = model.spec.hidden[l];
        if name == names::z_gates(l) {
            return Ok(4 * h);
        }
        if name == names::z_h(l) {
            return Ok(h);
        }
    }
    Err(Error::Contract(format!("unknown group weight {name}")))
}

/// Mean of a tensor with sub-threshold entries zeroed. Tensors without a
/// log-sigma companion are returned unchanged.
fn masked_mean(model: &Model, name: &str, tau: f64) -> Result<Tensor> {
    let mean = model.get(name)?.clone();
    if !model.has(&names::log_sigma(name)) {
        return Ok(mean);
    }
    let vd = VdParam::from_model(model, name)?;
    let keep = snr_mask(&vd, tau)?;
    let mut out = vd.mean;
    for (x, k) in out.data_mut().iter_mut().zip(keep) {
        if !k {
            *x = 0.0;
        }
    }
    Ok(out)
}

/// Deterministic test-time model: SNR masking, means, then group weights
/// folded into the weight matrices. The result has only plain tensors.
pub fn test_time_weights(model: &Model, cfg: &BayesConfig) -> Result<Model> {
    let tau = cfg.snr_threshold;
    let mut out = model.base_model()?;
    for n in out.weight_names() {
        out.params.insert(n.clone(), masked_mean(model, &n, tau)?);
    }
    let nl = model.spec.num_layers();
    for l in 0..nl {
        let h = model.spec.hidden[l];
        let z_gates = if model.has(&names::z_gates(l)) {
            masked_mean(model, &names::z_gates(l), tau)?.into_data()
        } else {
            vec![1.0; 4 * h]
        };
        let z_h = if model.has(&names::z_h(l)) {
            masked_mean(model, &names::z_h(l), tau)?.into_data()
        } else {
            vec![1.0; h]
        };
        let folded = fold_group_weights(&out.layer(l)?, &GroupValues { z_gates, z_h: z_h.clone() })?;
        out.set_layer(l, folded);
        let next = out.next_layer_weight(l);
        scale_columns(out.get_mut(&next)?, &z_h)?;
    }
    if model.has(names::VOCAB_Z) {
        let z = masked_mean(model, names::VOCAB_Z, tau)?.into_data();
        match model.spec.input {
            InputSpec::Embedding { .. } => scale_rows(out.get_mut(names::EMBED)?, &z)?,
            _ => scale_columns(out.get_mut(&names::wx(0))?, &z)?,
        }
    }
    if model.has(names::FEATURE_Z) {
        let z = masked_mean(model, names::FEATURE_Z, tau)?.into_data();
        scale_columns(out.get_mut(&names::wx(0))?, &z)?;
    }
    Ok(out)
}

/// Outcome of Bayesian structure derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesStructure {
    pub masks: Vec<StructureMasks>,
    /// Per-token keep flags from the vocabulary group weights.
    pub vocab: Option<Vec<bool>>,
    /// Per-component keep flags from the feature group weights.
    pub features: Option<Vec<bool>>,
    /// The collapsed deterministic model the masks describe.
    pub model: Model,
}

/// Gate `g` of neuron `k` is constant iff its folded ingoing row is zero,
/// i.e. its gate group weight was pruned or every ingoing weight was.
/// Neuron `k` is removed iff its folded outgoing columns are zero.
pub fn derive_structure_bayes(model: &Model, cfg: &BayesConfig) -> Result<BayesStructure> {
    let collapsed = test_time_weights(model, cfg)?;
    let masks = derive_structure_pruned(&collapsed, Grouping::FiveGroup)?;
    let keep = |name: &str| -> Result<Option<Vec<bool>>> {
        if !model.has(name) {
            return Ok(None);
        }
        let m = masked_mean(model, name, cfg.snr_threshold)?;
        Ok(Some(m.data().iter().map(|&z| z != 0.0).collect()))
    };
    Ok(BayesStructure {
        masks,
        vocab: keep(names::VOCAB_Z)?,
        features: keep(names::FEATURE_Z)?,
        model: collapsed,
    })
}
