use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(|analytic|, 1e-8)` over checked elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Checks `d out / d leaf` against central differences.
///
/// The numeric derivative is Richardson-extrapolated from steps `eps` and
/// `eps / 2`, which cancels the leading truncation term so that curved
/// primitives are resolved well past the step size. `indices` restricts the
/// check to a subset of leaf elements; `None` checks all of them. The graph
/// is left evaluated at the original leaf value with gradients cleared.
pub fn finite_diff_check(
    g: &mut Graph<f64>,
    out: NodeId,
    leaf: NodeId,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be > 0")));
    }
    if !g.requires_grad(leaf) {
        return Err(Error::invalid(format!(
            "node {} does not require a gradient",
            leaf.index()
        )));
    }
    g.zero_grad();
    g.evaluate()?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(|t| t.into_data())
        .unwrap_or_else(|| vec![0.0; g.value(leaf).len()]);
    g.zero_grad();

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };

    let probe = |g: &mut Graph<f64>, i: usize, x0: f64, h: f64| -> Result<f64> {
        g.set_leaf_element(leaf, i, x0 + h);
        g.evaluate()?;
        let up = g.scalar(out);
        g.set_leaf_element(leaf, i, x0 - h);
        g.evaluate()?;
        let down = g.scalar(out);
        Ok((up - down) / (2.0 * h))
    };

    let mut report = FdReport::default();
    for &i in indices {
        let x0 = g.value(leaf)[i];
        let coarse = probe(g, i, x0, eps)?;
        let fine = probe(g, i, x0, eps / 2.0)?;
        g.set_leaf_element(leaf, i, x0);
        let numeric = (4.0 * fine - coarse) / 3.0;
        let abs = (analytic[i] - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(abs / analytic[i].abs().max(1e-8));
        report.checked += 1;
    }
    g.evaluate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![0.7, -1.3]));
        let y = g.scale(x, 3.0).unwrap();
        let s = g.sum(y).unwrap();
        let r = finite_diff_check(&mut g, s, x, 1e-3, None).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn rejects_bad_step() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        assert!(finite_diff_check(&mut g, x, x, 0.0, None).is_err());
    }
}
