//! Model specification and the named parameter store.
//!
//! LSTM weights are kept in gate-major row order: the input matrix `wx` is
//! `4H x I` and the recurrent matrix `wh` is `4H x H`, with rows
//! `[i | f | g | o]`. Row `gate * H + k` is the complete ingoing weight set
//! of one gate of neuron `k`; column `k` of `wh` (together with column `k`
//! of the next layer's input matrix) is the outgoing weight set of neuron
//! `k`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Token ids fed as one-hot vectors straight into the first LSTM.
    OneHot { vocab: usize },
    /// Token ids looked up in a `vocab x dim` embedding matrix.
    Embedding { vocab: usize, dim: usize },
    /// Real-valued feature vectors of width `dim`.
    Dense { dim: usize },
}

impl InputSpec {
    /// Width of the vector entering the first LSTM layer.
    pub fn lstm_input_dim(&self) -> usize {
        match *self {
            InputSpec::OneHot { vocab } => vocab,
            InputSpec::Embedding { dim, .. } => dim,
            InputSpec::Dense { dim } => dim,
        }
    }

    pub fn vocab(&self) -> Option<usize> {
        match *self {
            InputSpec::OneHot { vocab } | InputSpec::Embedding { vocab, .. } => Some(vocab),
            InputSpec::Dense { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One prediction from the final hidden state.
    Classification,
    /// Next-token prediction at every step.
    LanguageModel,
    /// One real-valued prediction per output unit from the final state.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputSpec,
    /// Hidden sizes of the stacked LSTM layers (one or two).
    pub hidden: Vec<usize>,
    pub output: usize,
    pub task: TaskKind,
    /// Token id substituted for ids outside the vocabulary. Without it,
    /// unknown ids are an error.
    #[serde(default)]
    pub oov_id: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.len() > 2 {
            return Err(Error::Config(format!(
                "one or two LSTM layers supported, got {}",
                self.hidden.len()
            )));
        }
        if self.hidden.contains(&0) || self.output == 0 || self.input.lstm_input_dim() == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if let InputSpec::Embedding { vocab: 0, .. } = self.input {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if self.task == TaskKind::LanguageModel && self.input.vocab() != Some(self.output) {
            return Err(Error::Config(
                "a language model needs token input and output size equal to the vocabulary".into(),
            ));
        }
        if let (Some(oov), Some(v)) = (self.oov_id, self.input.vocab()) {
            if oov >= v {
                return Err(Error::Config(format!("oov id {oov} outside vocabulary of {v}")));
            }
        }
        Ok(())
    }

    /// Architecture label in the usual layer-stack notation.
    pub fn architecture(&self) -> String {
        let mut s = String::new();
        if let InputSpec::Embedding { .. } = self.input {
            s.push_str("Emb + ");
        }
        if self.hidden.len() == 2 {
            s.push_str("2 LSTM + FC");
        } else {
            s.push_str("LSTM + FC");
        }
        s
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Input width of LSTM layer `l`.
    pub fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input.lstm_input_dim()
        } else {
            self.hidden[l - 1]
        }
    }

    /// Resolves a token id, applying the OOV substitution if configured.
    pub fn resolve_token(&self, id: usize) -> Result<usize> {
        let v = self
            .input
            .vocab()
            .ok_or_else(|| Error::Data("model does not take token input".into()))?;
        if id < v {
            Ok(id)
        } else if let Some(oov) = self.oov_id {
            Ok(oov)
        } else {
            Err(Error::Data(format!("token id {id} outside vocabulary of {v}")))
        }
    }
}

/// Canonical tensor names in a [`ParamStore`].
pub mod names {
    pub const EMBED: &str = "embed.w";
    pub const FC_W: &str = "fc.w";
    pub const FC_B: &str = "fc.b";
    /// One group weight per vocabulary entry.
    pub const VOCAB_Z: &str = "vocab.z";
    /// One group weight per component of the first-layer input vector.
    pub const FEATURE_Z: &str = "feature.z";
    pub const LOG_SIGMA_SUFFIX: &str = ".log_sigma";

    pub fn wx(l: usize) -> String {
        format!("lstm{l}.wx")
    }
    pub fn wh(l: usize) -> String {
        format!("lstm{l}.wh")
    }
    pub fn bias(l: usize) -> String {
        format!("lstm{l}.b")
    }
    /// Gate group weights, `4H` entries in `[i | f | g | o]` order.
    pub fn z_gates(l: usize) -> String {
        format!("lstm{l}.z_gates")
    }
    /// Neuron group weights, `H` entries.
    pub fn z_h(l: usize) -> String {
        format!("lstm{l}.z_h")
    }
    pub fn log_sigma(name: &str) -> String {
        format!("{name}{LOG_SIGMA_SUFFIX}")
    }
}

/// Ordered map from tensor name to value.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Owned copy of one LSTM layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4H x I`
    pub wx: Tensor,
    /// `4H x H`
    pub wh: Tensor,
    /// `4H`
    pub b: Tensor,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }

    pub fn input(&self) -> usize {
        self.wx.cols()
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: Tensor::zeros(&[4 * hidden, input]),
            wh: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        LstmParams {
            wx: uniform(&[4 * hidden, input], scale, rng),
            wh: uniform(&[4 * hidden, hidden], scale, rng),
            b: uniform(&[4 * hidden], scale, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.wh.cols();
        if self.wh.shape() != [4 * h, h] || self.wx.rows() != 4 * h || self.b.shape() != [4 * h] {
            return Err(Error::dim(
                "lstm params",
                format!(
                    "wx {:?}, wh {:?}, b {:?}",
                    self.wx.shape(),
                    self.wh.shape(),
                    self.b.shape()
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if scale > 0.0 {
        let dist = Uniform::new_inclusive(-scale, scale).expect("finite scale");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::from_vec(shape, data).expect("shape from product")
}

/// Initialization knobs for the plain (deterministic) parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Weights are drawn uniformly from `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Initial value of the forget-gate biases; other biases start at zero.
    pub forget_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            init_scale: 0.1,
            forget_bias: 0.0,
        }
    }
}

/// A model: its spec and every named tensor it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, init: &InitConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let s = init.init_scale;
        let mut params = ParamStore::new();
        if let InputSpec::Embedding { vocab, dim } = spec.input {
            params.insert(names::EMBED.into(), uniform(&[vocab, dim], s, rng));
        }
        for (l, &h) in spec.hidden.iter().enumerate() {
            let i = spec.layer_input(l);
            params.insert(names::wx(l), uniform(&[4 * h, i], s, rng));
            params.insert(names::wh(l), uniform(&[4 * h, h], s, rng));
            let mut b = Tensor::zeros(&[4 * h]);
            for k in 0..h {
                b.data_mut()[h + k] = init.forget_bias;
            }
            params.insert(names::bias(l), b);
        }
        let top = *spec.hidden.last().expect("validated");
        params.insert(names::FC_W.into(), uniform(&[spec.output, top], s, rng));
        params.insert(names::FC_B.into(), Tensor::zeros(&[spec.output]));
        Ok(Model { spec, params })
    }

    /// All-zero model of the given spec.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let init = InitConfig {
            init_scale: 0.0,
            forget_bias: 0.0,
        };
        let mut m = Self::init(spec, &init, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for t in m.params.values_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor named {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn layer(&self, l: usize) -> Result<LstmParams> {
        Ok(LstmParams {
            wx: self.get(&names::wx(l))?.clone(),
            wh: self.get(&names::wh(l))?.clone(),
            b: self.get(&names::bias(l))?.clone(),
        })
    }

    pub fn set_layer(&mut self, l: usize, p: LstmParams) {
        self.params.insert(names::wx(l), p.wx);
        self.params.insert(names::wh(l), p.wh);
        self.params.insert(names::bias(l), p.b);
    }

    /// Names of every weight matrix (biases and group weights excluded), in
    /// network order.
    pub fn weight_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.has(names::EMBED) {
            v.push(names::EMBED.to_string());
        }
        v.extend(self.lstm_weight_names());
        v.push(names::FC_W.to_string());
        v
    }

    pub fn lstm_weight_names(&self) -> Vec<String> {
        (0..self.spec.num_layers())
            .flat_map(|l| [names::wx(l), names::wh(l)])
            .collect()
    }

    /// Name of the matrix that consumes the output of LSTM layer `l`.
    pub fn next_layer_weight(&self, l: usize) -> String {
        if l + 1 < self.spec.num_layers() {
            names::wx(l + 1)
        } else {
            names::FC_W.to_string()
        }
    }

    /// Tensors that make up the deterministic network (no variational or
    /// group-weight state).
    pub fn base_names(&self) -> Vec<String> {
        let mut v = self.weight_names();
        for l in 0..self.spec.num_layers() {
            v.push(names::bias(l));
        }
        v.push(names::FC_B.to_string());
        v
    }

    /// Copy containing only the deterministic network tensors.
    pub fn base_model(&self) -> Result<Model> {
        let mut params = ParamStore::new();
        for n in self.base_names() {
            params.insert(n.clone(), self.get(&n)?.clone());
        }
        Ok(Model {
            spec: self.spec.clone(),
            params,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in &self.params {
            if let Some(i) = t.first_non_finite() {
                return Err(Error::NonFinite(format!("{n}[{i}] = {}", t.data()[i])));
            }
        }
        Ok(())
    }
}
