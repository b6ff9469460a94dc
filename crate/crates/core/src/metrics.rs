//! Quality metrics.

use crate::error::{Error, Result};

/// Mean cross-entropy in nats converted to bits.
pub fn bits_per_char(mean_nats: f64) -> f64 {
    mean_nats / std::f64::consts::LN_2
}

/// `exp` of the mean per-token cross-entropy in nats.
pub fn perplexity(mean_nats: f64) -> f64 {
    mean_nats.exp()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-row `-log softmax(logits)[target]` in nats.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
    lse - logits[target]
}
