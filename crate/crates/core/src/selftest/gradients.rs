//! Finite-difference sweep over every graph primitive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{finite_diff_check, FdReport, Graph, NodeId, Tensor};

type Build = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Maps a uniform draw in [-2, 2] into the primitive's domain.
    domain: fn(f64) -> f64,
    build: Build,
}

fn any(x: f64) -> f64 {
    x
}

fn positive(x: f64) -> f64 {
    x.abs() + 0.5
}

/// Keeps draws away from the kink at zero by more than the FD step.
fn off_kink(x: f64) -> f64 {
    if x.abs() < 0.05 {
        x + 0.1
    } else {
        x
    }
}

const CASES: &[Case] = &[
    Case { name: "add", shapes: &[&[3, 4], &[4]], domain: any, build: |g, x| g.add(x[0], x[1]) },
    Case { name: "sub", shapes: &[&[2, 3, 4], &[3, 4]], domain: any, build: |g, x| g.sub(x[0], x[1]) },
    Case { name: "mul", shapes: &[&[3, 4], &[3, 4]], domain: any, build: |g, x| g.mul(x[0], x[1]) },
    Case { name: "div", shapes: &[&[3, 4], &[4]], domain: positive, build: |g, x| g.div(x[0], x[1]) },
    Case { name: "neg", shapes: &[&[5]], domain: any, build: |g, x| g.neg(x[0]) },
    Case { name: "exp", shapes: &[&[5]], domain: any, build: |g, x| g.exp(x[0]) },
    Case { name: "log", shapes: &[&[5]], domain: positive, build: |g, x| g.log(x[0]) },
    Case { name: "sqrt", shapes: &[&[5]], domain: positive, build: |g, x| g.sqrt(x[0]) },
    Case { name: "square", shapes: &[&[5]], domain: any, build: |g, x| g.square(x[0]) },
    Case { name: "pow", shapes: &[&[5]], domain: positive, build: |g, x| g.pow(x[0], 1.7) },
    Case { name: "scale", shapes: &[&[5]], domain: any, build: |g, x| g.scale(x[0], -2.5) },
    Case { name: "offset", shapes: &[&[5]], domain: any, build: |g, x| g.offset(x[0], 0.3) },
    Case { name: "sigmoid", shapes: &[&[6]], domain: any, build: |g, x| g.sigmoid(x[0]) },
    Case { name: "tanh", shapes: &[&[6]], domain: any, build: |g, x| g.tanh(x[0]) },
    Case { name: "gelu", shapes: &[&[6]], domain: any, build: |g, x| g.gelu(x[0]) },
    Case { name: "relu", shapes: &[&[6]], domain: off_kink, build: |g, x| g.relu(x[0]) },
    Case { name: "abs", shapes: &[&[6]], domain: off_kink, build: |g, x| g.abs(x[0]) },
    Case { name: "softplus", shapes: &[&[6]], domain: any, build: |g, x| g.softplus(x[0]) },
    Case {
        name: "clamp",
        shapes: &[&[8]],
        domain: |x| if (x.abs() - 1.0).abs() < 0.05 { x * 0.9 } else { x },
        build: |g, x| g.clamp(x[0], -1.0, 1.0),
    },
    Case { name: "sum", shapes: &[&[3, 4]], domain: any, build: |g, x| g.sum(x[0]) },
    Case { name: "mean", shapes: &[&[3, 4]], domain: any, build: |g, x| g.mean(x[0]) },
    Case { name: "sum_axis", shapes: &[&[2, 3, 4]], domain: any, build: |g, x| g.sum_axis(x[0], 1) },
    Case { name: "mean_axis", shapes: &[&[2, 3, 4]], domain: any, build: |g, x| g.mean_axis(x[0], 2) },
    Case { name: "max_axis", shapes: &[&[3, 5]], domain: any, build: |g, x| g.max_axis(x[0], 1) },
    Case { name: "softmax", shapes: &[&[3, 5]], domain: any, build: |g, x| g.softmax(x[0]) },
    Case { name: "layer_norm", shapes: &[&[3, 6]], domain: any, build: |g, x| g.layer_norm(x[0], 1e-5) },
    Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: any, build: |g, x| g.matmul(x[0], x[1]) },
    Case {
        name: "matmul_batched_shared",
        shapes: &[&[2, 3, 4], &[4, 5]],
        domain: any,
        build: |g, x| g.matmul(x[0], x[1]),
    },
    Case {
        name: "matmul_transposed",
        shapes: &[&[2, 4, 3], &[2, 5, 4]],
        domain: any,
        build: |g, x| g.matmul_t(x[0], x[1], true, true),
    },
    Case {
        name: "matmul_rhs_transposed_shared",
        shapes: &[&[2, 3, 4], &[5, 4]],
        domain: any,
        build: |g, x| g.matmul_t(x[0], x[1], false, true),
    },
    Case {
        name: "conv1d",
        shapes: &[&[2, 11, 3], &[4, 3, 2]],
        domain: any,
        build: |g, x| g.conv1d(x[0], x[1], 2, 1, 1),
    },
    Case {
        name: "conv1d_dilated",
        shapes: &[&[1, 12, 2], &[3, 2, 3]],
        domain: any,
        build: |g, x| g.conv1d(x[0], x[1], 1, 3, 3),
    },
    Case {
        name: "conv_transpose1d",
        shapes: &[&[2, 5, 3], &[3, 4, 2]],
        domain: any,
        build: |g, x| g.conv_transpose1d(x[0], x[1], 2, 1),
    },
    Case {
        name: "concat",
        shapes: &[&[2, 3], &[2, 2]],
        domain: any,
        build: |g, x| g.concat(&[x[0], x[1]], 1),
    },
    Case { name: "slice", shapes: &[&[3, 6]], domain: any, build: |g, x| g.slice(x[0], 1, 2, 3) },
    Case { name: "reshape", shapes: &[&[3, 4]], domain: any, build: |g, x| g.reshape(x[0], &[2, 6]) },
    Case { name: "permute", shapes: &[&[2, 3, 4]], domain: any, build: |g, x| g.permute(x[0], &[1, 2, 0]) },
    Case { name: "transpose", shapes: &[&[3, 4]], domain: any, build: |g, x| g.transpose(x[0]) },
    Case {
        name: "gather",
        shapes: &[&[4, 3]],
        domain: any,
        build: |g, x| g.gather(x[0], 0, &[2, 0, 2, 3]),
    },
    Case { name: "rope", shapes: &[&[2, 5, 6]], domain: any, build: |g, x| g.rope(x[0], 10000.0) },
    Case {
        name: "stft_mag",
        shapes: &[&[2, 48]],
        domain: any,
        build: |g, x| g.stft_mag(x[0], 16, 8),
    },
];

/// Names of all primitives covered by [`primitive_sweep`].
pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs every primitive through `sum(op(inputs) * r)` for a random
/// projection `r`, checking the gradient of every input.
pub fn primitive_sweep(seed: u64, eps: f64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CASES.len());
    for case in CASES {
        let mut g = Graph::<f64>::new();
        let inputs: Vec<NodeId> = case
            .shapes
            .iter()
            .map(|s| {
                let t = Tensor::<f64>::uniform(s.to_vec(), -2.0, 2.0, &mut rng).map(case.domain);
                g.param(t)
            })
            .collect();
        let y = (case.build)(&mut g, &inputs)?;
        let proj = Tensor::<f64>::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng);
        let r = g.constant(proj);
        let yr = g.mul(y, r)?;
        let loss = g.sum(yr)?;
        let mut worst = FdReport::default();
        for &x in &inputs {
            let rep = finite_diff_check(&mut g, loss, x, eps, None)?;
            worst.max_rel_error = worst.max_rel_error.max(rep.max_rel_error);
            worst.max_abs_error = worst.max_abs_error.max(rep.max_abs_error);
            worst.checked += rep.checked;
        }
        out.push((case.name, worst));
    }
    Ok(out)
}
