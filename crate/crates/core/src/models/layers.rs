//! Building blocks shared by the sequence models.

use rand::Rng;

use super::{Bound, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub(crate) const ROPE_BASE: f64 = 10_000.0;
pub(crate) const LN_EPS: f64 = 1e-5;
/// Fourier time features: 16 geometric frequencies from 1 to 1000, sin and cos.
pub const TIME_FREQS: usize = 16;
pub const TIME_FEATURES: usize = 2 * TIME_FREQS;

pub(crate) fn add_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::uniform([d_in, d_out], -bound, bound, rng));
    store.add(&format!("{name}.b"), Tensor::zeros([d_out]));
}

/// `x @ w + b` over the last axis.
pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add(y, p.get(&format!("{name}.b"))?)
}

pub(crate) fn add_block(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(store, &format!("{name}.attn.{proj}"), dim, dim, rng);
    }
    add_linear(store, &format!("{name}.mlp.in"), dim, hidden, rng);
    add_linear(store, &format!("{name}.mlp.out"), hidden, dim, rng);
}

/// Pre-norm bidirectional transformer layer with rotary attention over
/// `x [B, N, D]`.
pub(crate) fn block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;

    let h = g.layer_norm(x, LN_EPS)?;
    let split = |g: &mut Graph<T>, proj: &str, rope: bool| -> Result<NodeId> {
        let y = linear(g, p, &format!("{name}.attn.{proj}"), h)?;
        let y = g.reshape(y, &[b, n, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        if rope {
            g.rope(y, ROPE_BASE)
        } else {
            Ok(y)
        }
    };
    let q = split(g, "q", true)?;
    let k = split(g, "k", true)?;
    let v = split(g, "v", false)?;
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(scores)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let out = linear(g, p, &format!("{name}.attn.o"), ctx)?;
    let x = g.add(x, out)?;

    let h = g.layer_norm(x, LN_EPS)?;
    let h = linear(g, p, &format!("{name}.mlp.in"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{name}.mlp.out"), h)?;
    g.add(x, h)
}

/// `[sin(f_i t), cos(f_i t)]` for geometric `f_i` in `[1, 1000]`.
pub fn fourier_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..TIME_FREQS {
        let f = 1000f64.powf(i as f64 / (TIME_FREQS - 1) as f64);
        out[i] = (f * t).sin();
        out[TIME_FREQS + i] = (f * t).cos();
    }
    out
}

/// Constant `[B, 32]` time features.
pub(crate) fn time_features<T: Real>(g: &mut Graph<T>, t: &[f64]) -> Result<NodeId> {
    let data = t
        .iter()
        .flat_map(|&ti| fourier_features(ti))
        .map(T::lit)
        .collect();
    Ok(g.constant(Tensor::new(vec![t.len(), TIME_FEATURES], data)?))
}

/// Time token `[B, 1, D]` from a projection of the Fourier features.
pub(crate) fn time_token<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, t: &[f64]) -> Result<NodeId> {
    let feats = time_features(g, t)?;
    let tok = linear(g, p, name, feats)?;
    let d = g.shape(tok)[1];
    g.reshape(tok, &[t.len(), 1, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_frequency_range() {
        let f = fourier_features(0.0);
        assert!(f[..TIME_FREQS].iter().all(|&v| v == 0.0));
        assert!(f[TIME_FREQS..].iter().all(|&v| v == 1.0));
        // Lowest frequency is 1 rad per unit time.
        assert!((fourier_features(0.5)[0] - 0.5f64.sin()).abs() < 1e-15);
        assert!((fourier_features(0.001)[TIME_FREQS - 1] - 1f64.sin()).abs() < 1e-12);
    }
}
