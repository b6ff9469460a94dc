//! Random models, zero patterns and inputs shared by the integration tests.
#![allow(dead_code)]

use gatesparse::lstm::SequenceInput;
use gatesparse::model::{names, InputSpec, Model, ModelSpec, TaskKind};
use gatesparse::SeededRng;
use rand::Rng;

pub fn random_spec(rng: &mut SeededRng) -> ModelSpec {
    let layers = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=6)).collect();
    let (input, task, output) = match rng.random_range(0..4) {
        0 => {
            let dim = rng.random_range(1..=4);
            (InputSpec::Dense { dim }, TaskKind::Regression, rng.random_range(1..=3))
        }
        1 => {
            let vocab = rng.random_range(3..=6);
            (InputSpec::OneHot { vocab }, TaskKind::LanguageModel, vocab)
        }
        2 => {
            let vocab = rng.random_range(3..=6);
            let dim = rng.random_range(1..=4);
            (InputSpec::Embedding { vocab, dim }, TaskKind::LanguageModel, vocab)
        }
        _ => {
            let vocab = rng.random_range(3..=6);
            (InputSpec::OneHot { vocab }, TaskKind::Classification, rng.random_range(2..=4))
        }
    };
    let spec = ModelSpec {
        oov_id: input.vocab().map(|_| 1),
        input,
        hidden,
        output,
        task,
    };
    spec.validate().expect("generated spec is valid");
    spec
}

/// Every tensor, biases included, uniform in `[-scale, scale]`.
pub fn random_model(rng: &mut SeededRng, spec: ModelSpec, scale: f64) -> Model {
    let mut m = Model::zeros(spec).expect("valid spec");
    for t in m.params.values_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
    m
}

/// Zeroes whole gate rows with probability `p_gate`, whole outgoing sets
/// with probability `p_neuron` and single LSTM or output weights with
/// probability `p_entry`.
pub fn sprinkle_zeros(m: &mut Model, rng: &mut SeededRng, p_gate: f64, p_neuron: f64, p_entry: f64) {
    for l in 0..m.spec.num_layers() {
        let h = m.spec.hidden[l];
        let next = m.next_layer_weight(l);
        for r in 0..4 * h {
            if rng.random_bool(p_gate) {
                m.get_mut(&names::wx(l)).unwrap().row_mut(r).fill(0.0);
                m.get_mut(&names::wh(l)).unwrap().row_mut(r).fill(0.0);
            }
        }
        for k in 0..h {
            if rng.random_bool(p_neuron) {
                zero_column(m.get_mut(&names::wh(l)).unwrap(), k);
                zero_column(m.get_mut(&next).unwrap(), k);
            }
        }
    }
    let mut targets: Vec<String> = m.lstm_weight_names();
    targets.push(names::FC_W.to_string());
    for n in targets {
        for x in m.get_mut(&n).unwrap().data_mut() {
            if rng.random_bool(p_entry) {
                *x = 0.0;
            }
        }
    }
}

pub fn zero_column(t: &mut gatesparse::Tensor, k: usize) {
    for r in 0..t.rows() {
        t.set2(r, k, 0.0);
    }
}

pub fn random_input(rng: &mut SeededRng, spec: &ModelSpec, len: usize) -> SequenceInput {
    match spec.input {
        InputSpec::Dense { dim } => {
            SequenceInput::Dense((0..len).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
        }
        InputSpec::OneHot { vocab } | InputSpec::Embedding { vocab, .. } => {
            SequenceInput::Tokens((0..len).map(|_| rng.random_range(0..vocab)).collect())
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
