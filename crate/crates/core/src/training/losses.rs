//! Losses shared by training and guidance.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::world::ControlKind;

/// Pitch heads treat targets below this as non-activating.
pub const SPARSE_THRESHOLD: f64 = 0.2;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// `mean((a - b)^2)`.
pub fn mse<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Elementwise `softplus(x) - y x`, the BCE of `sigmoid(x)` against `y`.
pub fn bce_logits_elems<T: Real>(g: &mut Graph<T>, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let sp = g.softplus(logits)?;
    let yx = g.mul(logits, targets)?;
    g.sub(sp, yx)
}

pub fn bce_logits<T: Real>(g: &mut Graph<T>, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let e = bce_logits_elems(g, logits, targets)?;
    g.mean(e)
}

/// Per-entry weights that average the below- and above-threshold partitions
/// separately and then take the mean of the two. An empty partition leaves
/// the plain mean over the other.
pub fn sparse_weights(targets: &[f64], threshold: f64) -> Vec<f64> {
    let below = targets.iter().filter(|&&y| y < threshold).count();
    let above = targets.len() - below;
    let (wb, wa) = match (below, above) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (n, 0) => (1.0 / n as f64, 0.0),
        (b, a) => (0.5 / b as f64, 0.5 / a as f64),
    };
    targets
        .iter()
        .map(|&y| if y < threshold { wb } else { wa })
        .collect()
}

/// Sparse BCE from precomputed per-entry losses.
pub fn sparse_mean(losses: &[f64], targets: &[f64], threshold: f64) -> f64 {
    let part = |keep: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = losses
            .iter()
            .zip(targets)
            .filter(|(_, &y)| keep(y))
            .map(|(&l, _)| l)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    match (part(&|y| y < threshold), part(&|y| y >= threshold)) {
        (Some(b), Some(a)) => 0.5 * b + 0.5 * a,
        (Some(m), None) | (None, Some(m)) => m,
        (None, None) => 0.0,
    }
}

/// Sparse-weighted BCE of `sigmoid(logits)` against constant `targets`.
pub fn sparse_bce<T: Real>(g: &mut Graph<T>, logits: NodeId, targets: &Tensor, threshold: f64) -> Result<NodeId> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::invalid(format!(
            "sparse_bce shapes {:?} and {:?} differ",
            g.shape(logits),
            targets.shape()
        )));
    }
    let ys: Vec<f64> = targets.data().iter().map(|&y| f64::from(y)).collect();
    let w = sparse_weights(&ys, threshold);
    let shape = targets.shape().to_vec();
    let y = g.constant(Tensor::new(shape.clone(), ys.iter().map(|&v| T::lit(v)).collect())?);
    let w = g.constant(Tensor::new(shape, w.into_iter().map(T::lit).collect())?);
    let e = bce_logits_elems(g, logits, y)?;
    let e = g.mul(e, w)?;
    g.sum(e)
}

/// Binary cross-entropy of probabilities, `p` clamped away from 0 and 1.
pub fn bce_prob(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Training loss of a control head given raw outputs and targets of the same shape.
pub fn head_loss<T: Real>(g: &mut Graph<T>, kind: ControlKind, raw: NodeId, targets: &Tensor) -> Result<NodeId> {
    match kind {
        ControlKind::Intensity => {
            let pred = crate::models::activate(g, kind, raw)?;
            let y = g.constant(targets.cast());
            mse(g, pred, y)
        }
        ControlKind::Pitch => sparse_bce(g, raw, targets, SPARSE_THRESHOLD),
        ControlKind::Beats => {
            let y = g.constant(targets.cast());
            bce_logits(g, raw, y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_mean_hand_case() {
        let losses = [0.1, 0.1, 0.1, 0.9];
        let targets = [0.0, 0.1, 0.0, 1.0];
        assert_eq!(sparse_mean(&losses, &targets, 0.2), 0.5);
        let plain = losses.iter().sum::<f64>() / 4.0;
        assert!((plain - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sparse_reduces_to_plain_when_one_partition() {
        let losses = [0.3, 0.7, 0.2];
        assert_eq!(sparse_mean(&losses, &[0.5, 0.9, 0.2], 0.2), sparse_mean(&losses, &[0.0; 3], 0.0));
        let w = sparse_weights(&[0.5, 0.9, 0.2], 0.2);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn graph_sparse_bce_matches_reference() {
        let logits = [-2.0, 0.5, 1.5, -0.3];
        let targets = [0.0f32, 0.1, 0.9, 0.3];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([4], logits.to_vec()).unwrap(), true);
        let l = sparse_bce(&mut g, x, &Tensor::new([4], targets.to_vec()).unwrap(), 0.2).unwrap();
        let per: Vec<f64> = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| bce_prob(1.0 / (1.0 + (-x as f64).exp()), f64::from(y)))
            .collect();
        let ys: Vec<f64> = targets.iter().map(|&y| f64::from(y)).collect();
        assert!((g.scalar(l) - sparse_mean(&per, &ys, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn sparse_bce_gradient_vanishes_at_targets() {
        let targets = [0.05f32, 0.15, 0.6, 0.95];
        let logits: Vec<f64> = targets
            .iter()
            .map(|&y| (f64::from(y) / (1.0 - f64::from(y))).ln())
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([4], logits).unwrap(), true);
        let l = sparse_bce(&mut g, x, &Tensor::new([4], targets.to_vec()).unwrap(), 0.2).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|d| d.abs() < 1e-7));
    }
}
