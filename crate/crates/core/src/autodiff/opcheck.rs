//! Randomized finite-difference sweep over every recorded op.
//!
//! Each case draws shapes and values, reduces the op output to a scalar by a
//! fixed random weighting, and checks the gradient of every differentiable
//! operand with [`finite_diff_check`]. Values are kept away from kinks
//! (relu, abs, clamp) and from the edges of each op's domain.

use rand::Rng;

use crate::autodiff::gradcheck::finite_diff_check;
use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::ops::Unary;
use crate::error::Result;
use crate::seed;
use crate::tensor::Tensor;

pub const OPCHECK_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    /// Max relative error over cases, operands and coordinates.
    pub worst: f64,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    operands: Vec<Tensor<f64>>,
    /// Operands whose gradient is checked.
    wrt: Vec<usize>,
    build: Build,
}

fn dims<R: Rng>(rng: &mut R, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

fn uniform<R: Rng>(rng: &mut R, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Magnitude in `[lo, hi)` with a random sign.
fn signed<R: Rng>(rng: &mut R, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(operands: Vec<Tensor<f64>>, wrt: Vec<usize>, build: Build) -> Case {
    Case { operands, wrt, build }
}

fn unary_case<R: Rng>(rng: &mut R, u: Unary) -> Case {
    let d = dims(rng, 2, 1, 4);
    let x = match u {
        Unary::Relu | Unary::Abs => signed(rng, &d, 0.2, 2.0),
        Unary::Sqrt | Unary::Log => uniform(rng, &d, 0.3, 2.0),
        _ => uniform(rng, &d, -2.0, 2.0),
    };
    case(vec![x], vec![0], Box::new(move |g, v| g.unary(v[0], u)))
}

fn op_case<R: Rng>(rng: &mut R, op: &str) -> Case {
    match op {
        "add" | "sub" | "mul" => {
            let d = dims(rng, 2, 1, 4);
            let (a, b) = (uniform(rng, &d, -2.0, 2.0), uniform(rng, &d, -2.0, 2.0));
            let op = op.to_string();
            case(
                vec![a, b],
                vec![0, 1],
                Box::new(move |g, v| match op.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }),
            )
        }
        "div" => {
            let d = dims(rng, 2, 1, 4);
            let (a, b) = (uniform(rng, &d, -2.0, 2.0), signed(rng, &d, 0.5, 2.0));
            case(vec![a, b], vec![0, 1], Box::new(|g, v| g.div(v[0], v[1])))
        }
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            let d = dims(rng, 3, 1, 3);
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(move |g, v| g.scale(v[0], s)))
        }
        "add_scalar" => {
            let s = rng.random_range(-3.0..3.0);
            let d = dims(rng, 3, 1, 3);
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(move |g, v| g.add_scalar(v[0], s)))
        }
        "clamp" => {
            let d = dims(rng, 2, 1, 5);
            // stay 0.05 clear of the bounds ±0.5
            let x = Tensor::from_fn(&d, |_| loop {
                let v: f64 = rng.random_range(-1.5..1.5);
                if (v.abs() - 0.5).abs() > 0.05 {
                    break v;
                }
            });
            case(vec![x], vec![0], Box::new(|g, v| g.clamp(v[0], -0.5, 0.5)))
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let a = uniform(rng, &[m, k], -2.0, 2.0);
            let b = uniform(rng, &[k, n], -2.0, 2.0);
            case(vec![a, b], vec![0, 1], Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "transpose" => {
            let d = dims(rng, 2, 1, 5);
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(|g, v| g.transpose(v[0])))
        }
        "conv2d" => {
            let (n, c, o) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=3));
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let h = rng.random_range(3..=6);
            let w = rng.random_range(3..=6);
            let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
            let b = uniform(rng, &[o], -1.0, 1.0);
            case(
                vec![x, wt, b],
                vec![0, 1, 2],
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
            )
        }
        "upsample_nearest2x" => {
            let d = dims(rng, 4, 1, 3);
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(|g, v| g.upsample2x(v[0])))
        }
        "mean_pool2x" => {
            let mut d = dims(rng, 4, 1, 3);
            d[2] *= 2;
            d[3] *= 2;
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(|g, v| g.mean_pool2x(v[0])))
        }
        "group_norm" => {
            let c = [1, 2, 4, 6][rng.random_range(0..4)];
            let (n, h, w) = (rng.random_range(1..=2), rng.random_range(2..=3), rng.random_range(2..=3));
            let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
            let gamma = uniform(rng, &[c], 0.5, 1.5);
            let beta = uniform(rng, &[c], -1.0, 1.0);
            case(vec![x, gamma, beta], vec![0, 1, 2], Box::new(|g, v| g.group_norm(v[0], v[1], v[2])))
        }
        "add_channel_bias" => {
            let d = dims(rng, 4, 1, 3);
            let x = uniform(rng, &d, -2.0, 2.0);
            let b = uniform(rng, &d[..2], -2.0, 2.0);
            case(vec![x, b], vec![0, 1], Box::new(|g, v| g.add_channel_bias(v[0], v[1])))
        }
        "add_row_bias" => {
            let d = dims(rng, 2, 1, 4);
            let x = uniform(rng, &d, -2.0, 2.0);
            let b = uniform(rng, &d[1..], -2.0, 2.0);
            case(vec![x, b], vec![0, 1], Box::new(|g, v| g.add_row_bias(v[0], v[1])))
        }
        "reshape" => {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let x = uniform(rng, &[a, b], -2.0, 2.0);
            case(vec![x], vec![0], Box::new(move |g, v| g.reshape(v[0], &[b, a])))
        }
        "concat" => {
            let axis = rng.random_range(0..3);
            let mut da = dims(rng, 3, 1, 3);
            let mut db = da.clone();
            da[axis] = rng.random_range(1..=3);
            db[axis] = rng.random_range(1..=3);
            let a = uniform(rng, &da, -2.0, 2.0);
            let b = uniform(rng, &db, -2.0, 2.0);
            case(vec![a, b], vec![0, 1], Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)))
        }
        "slice" => {
            let axis = rng.random_range(0..3);
            let d = dims(rng, 3, 2, 4);
            let start = rng.random_range(0..d[axis]);
            let len = rng.random_range(1..=d[axis] - start);
            let x = uniform(rng, &d, -2.0, 2.0);
            case(vec![x], vec![0], Box::new(move |g, v| g.slice(v[0], axis, start, len)))
        }
        "sum" | "mean" | "norm2" => {
            let d = dims(rng, 3, 1, 3);
            let x = signed(rng, &d, 0.1, 2.0);
            let op = op.to_string();
            case(
                vec![x],
                vec![0],
                Box::new(move |g, v| match op.as_str() {
                    "sum" => g.sum(v[0]),
                    "mean" => g.mean(v[0]),
                    _ => g.norm2(v[0]),
                }),
            )
        }
        "spatial_mean" => {
            let d = dims(rng, 4, 1, 3);
            case(vec![uniform(rng, &d, -2.0, 2.0)], vec![0], Box::new(|g, v| g.spatial_mean(v[0])))
        }
        "normalize_rows" => {
            let d = dims(rng, 2, 1, 4);
            let x = signed(rng, &d, 0.2, 2.0);
            case(vec![x], vec![0], Box::new(|g, v| g.normalize_rows(v[0])))
        }
        "gather_rows" => {
            let d = dims(rng, 2, 1, 4);
            let rows: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..d[0])).collect();
            let x = uniform(rng, &d, -2.0, 2.0);
            case(vec![x], vec![0], Box::new(move |g, v| g.gather_rows(v[0], rows.clone())))
        }
        "softmax_cross_entropy" => {
            let (m, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let x = uniform(rng, &[m, k], -3.0, 3.0);
            case(
                vec![x],
                vec![0],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], targets.clone())),
            )
        }
        "mse" => {
            let d = dims(rng, 2, 1, 4);
            let (a, b) = (uniform(rng, &d, -2.0, 2.0), uniform(rng, &d, -2.0, 2.0));
            case(vec![a, b], vec![0, 1], Box::new(|g, v| g.mse(v[0], v[1])))
        }
        other => unreachable!("no generator for {other}"),
    }
}

const UNARIES: [(&str, Unary); 10] = [
    ("neg", Unary::Neg),
    ("silu", Unary::Silu),
    ("sigmoid", Unary::Sigmoid),
    ("relu", Unary::Relu),
    ("abs", Unary::Abs),
    ("square", Unary::Square),
    ("sqrt", Unary::Sqrt),
    ("exp", Unary::Exp),
    ("log", Unary::Log),
    ("tanh", Unary::Tanh),
];

const OPS: [&str; 24] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "clamp",
    "matmul",
    "transpose",
    "conv2d",
    "upsample_nearest2x",
    "mean_pool2x",
    "group_norm",
    "add_channel_bias",
    "add_row_bias",
    "reshape",
    "concat",
    "slice",
    "sum",
    "mean",
    "spatial_mean",
    "norm2",
    "normalize_rows",
    "gather_rows",
];

/// Names covered by [`op_sweep`], in report order.
pub fn op_names() -> Vec<&'static str> {
    UNARIES
        .iter()
        .map(|(n, _)| *n)
        .chain(OPS)
        .chain(["softmax_cross_entropy", "mse"])
        .collect()
}

fn reduce(g: &mut Graph<f64>, y: NodeId, w: &Tensor<f64>) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_case<R: Rng>(rng: &mut R, c: &Case) -> Result<f64> {
    // the reduction weights depend on the output shape, so probe it once
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = c.operands.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (c.build)(&mut probe, &ids)?;
    let out_dims = probe.dims(out).to_vec();
    let w = signed(rng, &out_dims, 0.5, 1.5);
    let mut worst: f64 = 0.0;
    for &k in &c.wrt {
        let err = finite_diff_check(
            |g, x| {
                let ids: Vec<NodeId> = c
                    .operands
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                let y = (c.build)(g, &ids)?;
                reduce(g, y, &w)
            },
            &c.operands[k],
            OPCHECK_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs `cases` random cases per op; op `name` uses stream `(seed, "opcheck/<name>", case)`.
pub fn op_sweep(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for name in op_names() {
        let stage = format!("opcheck/{name}");
        let mut worst: f64 = 0.0;
        for i in 0..cases {
            let mut rng = seed::stream(seed, &stage, i as u64);
            let c = match UNARIES.iter().find(|(n, _)| *n == name) {
                Some((_, u)) => unary_case(&mut rng, *u),
                None => op_case(&mut rng, name),
            };
            worst = worst.max(check_case(&mut rng, &c)?);
        }
        out.push(OpCheck { op: name, cases, worst });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_sweep() {
        let report = op_sweep(5, 3).unwrap();
        assert_eq!(report.len(), 36);
        for r in &report {
            assert!(r.worst < 1e-4, "{} {}", r.op, r.worst);
        }
    }
}
