//! Shared test oracles.
//!
//! The gradient oracle is central finite differences over a scalar
//! function of flat inputs; it never touches the tape's backward pass,
//! so the two routes are independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svae_reweight::losses;
use svae_reweight::tensor::{NodeId, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a unit floor: `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_err(analytical: &[f64], numerical: &[f64]) -> f64 {
    assert_eq!(analytical.len(), numerical.len());
    analytical
        .iter()
        .zip(numerical)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

pub type GraphBuilder = Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>;

/// One gradcheck case: tracked inputs plus a graph builder. The scalar
/// probe is `sum(output * direction)` with a fixed random direction so
/// every output coordinate participates.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: GraphBuilder,
}

/// Runs the tape gradient against the finite-difference oracle; returns
/// the worst relative error over all input coordinates.
pub fn run_case(case: &GradCase, direction: Vec<f64>) -> f64 {
    let shapes: Vec<Vec<usize>> = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
    let sizes: Vec<usize> = case.inputs.iter().map(|t| t.numel()).collect();

    let eval = |flat: &[f64], want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut offset = 0;
        for (shape, &size) in shapes.iter().zip(&sizes) {
            let t = Tensor::param(flat[offset..offset + size].to_vec(), shape.clone()).unwrap();
            ids.push(tape.leaf(&t));
            offset += size;
        }
        let out = (case.build)(&mut tape, &ids);
        let dir = tape
            .constant_from(direction.clone(), tape.shape(out).to_vec())
            .unwrap();
        let weighted = tape.mul(out, dir).unwrap();
        let loss = tape.sum(weighted, None).unwrap();
        let value = tape.value(loss)[0];
        if !want_grads {
            return (value, None);
        }
        tape.backward(loss).unwrap();
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).unwrap().to_vec())
            .collect();
        (value, Some(grads))
    };

    let flat0: Vec<f64> = case
        .inputs
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let (_, grads) = eval(&flat0, true);
    let analytical: Vec<f64> = grads.unwrap().into_iter().flatten().collect();
    let mut scalar = |flat: &[f64]| eval(flat, false).0;
    let numerical = finite_diff(&mut scalar, &flat0, FD_STEP);
    max_rel_err(&analytical, &numerical)
}

fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(1..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::param(data, shape).unwrap()
}

/// Values bounded away from zero (for division and relu kinks).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, min_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(min_abs..2.0)
        })
        .collect();
    Tensor::param(data, shape).unwrap()
}

/// Builds the randomized case for one named op.
pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> GradCase {
    match op {
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            GradCase {
                inputs: vec![
                    rand_tensor(rng, vec![m, k], -2.0, 2.0),
                    rand_tensor(rng, vec![k, n], -2.0, 2.0),
                ],
                build: Box::new(|t, ids| t.matmul(ids[0], ids[1]).unwrap()),
            }
        }
        "add" | "sub" | "mul" => {
            let shape = rand_shape(rng, 3);
            let op = op.to_string();
            GradCase {
                inputs: vec![
                    rand_tensor(rng, shape.clone(), -2.0, 2.0),
                    rand_tensor(rng, shape, -2.0, 2.0),
                ],
                build: Box::new(move |t, ids| match op.as_str() {
                    "add" => t.add(ids[0], ids[1]).unwrap(),
                    "sub" => t.sub(ids[0], ids[1]).unwrap(),
                    _ => t.mul(ids[0], ids[1]).unwrap(),
                }),
            }
        }
        "div" => {
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![
                    rand_tensor(rng, shape.clone(), -2.0, 2.0),
                    rand_tensor_off_zero(rng, shape, 0.4),
                ],
                build: Box::new(|t, ids| t.div(ids[0], ids[1]).unwrap()),
            }
        }
        "exp" => {
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -2.0, 2.0)],
                build: Box::new(|t, ids| t.exp(ids[0]).unwrap()),
            }
        }
        "log" => {
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![rand_tensor(rng, shape, 0.2, 3.0)],
                build: Box::new(|t, ids| t.log(ids[0]).unwrap()),
            }
        }
        "neg" => {
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -2.0, 2.0)],
                build: Box::new(|t, ids| t.neg(ids[0]).unwrap()),
            }
        }
        "relu" => {
            // Inputs off the kink: finite differences straddle x = 0.
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![rand_tensor_off_zero(rng, shape, 0.05)],
                build: Box::new(|t, ids| t.relu(ids[0]).unwrap()),
            }
        }
        "sigmoid" => {
            let shape = rand_shape(rng, 3);
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -4.0, 4.0)],
                build: Box::new(|t, ids| t.sigmoid(ids[0]).unwrap()),
            }
        }
        "softmax" => {
            let mut shape = rand_shape(rng, 2);
            shape.push(rng.random_range(2..5));
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -3.0, 3.0)],
                build: Box::new(|t, ids| t.softmax(ids[0]).unwrap()),
            }
        }
        "sum" | "mean" => {
            let shape = rand_shape(rng, 3);
            let axis = if rng.random_bool(0.5) {
                None
            } else {
                Some(rng.random_range(0..shape.len()))
            };
            let avg = op == "mean";
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -2.0, 2.0)],
                build: Box::new(move |t, ids| {
                    if avg {
                        t.mean(ids[0], axis).unwrap()
                    } else {
                        t.sum(ids[0], axis).unwrap()
                    }
                }),
            }
        }
        "broadcast" => {
            // Target with extra leading axes and unit axes expanded.
            let target = rand_shape(rng, 3);
            let keep = rng.random_range(0..=target.len() - 1);
            let src: Vec<usize> = target[target.len() - keep..]
                .iter()
                .map(|&d| if rng.random_bool(0.5) { d } else { 1 })
                .collect();
            let src = if src.is_empty() { vec![] } else { src };
            GradCase {
                inputs: vec![rand_tensor(rng, src, -2.0, 2.0)],
                build: Box::new(move |t, ids| t.broadcast(ids[0], &target).unwrap()),
            }
        }
        "reshape" => {
            let shape = rand_shape(rng, 3);
            let numel: usize = shape.iter().product();
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -2.0, 2.0)],
                build: Box::new(move |t, ids| t.reshape(ids[0], vec![numel]).unwrap()),
            }
        }
        "slice" => {
            let shape = rand_shape(rng, 3);
            let axis = rng.random_range(0..shape.len());
            let len = rng.random_range(1..=shape[axis]);
            let start = rng.random_range(0..=shape[axis] - len);
            GradCase {
                inputs: vec![rand_tensor(rng, shape, -2.0, 2.0)],
                build: Box::new(move |t, ids| t.slice(ids[0], axis, start, len).unwrap()),
            }
        }
        "concat" => {
            let mut shape = rand_shape(rng, 3);
            let axis = rng.random_range(0..shape.len());
            let mut inputs = Vec::new();
            for _ in 0..rng.random_range(2..4) {
                shape[axis] = rng.random_range(1..4);
                inputs.push(rand_tensor(rng, shape.clone(), -2.0, 2.0));
            }
            GradCase {
                inputs,
                build: Box::new(move |t, ids| t.concat(ids, axis).unwrap()),
            }
        }
        "bce" => {
            let (b, c) = (rng.random_range(1..4), rng.random_range(1..5));
            let targets: Vec<f64> = (0..b * c)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            GradCase {
                inputs: vec![rand_tensor(rng, vec![b, c], -3.0, 3.0)],
                build: Box::new(move |t, ids| {
                    let y = t.constant_from(targets.clone(), vec![b, c]).unwrap();
                    losses::bce_multilabel(t, ids[0], y).unwrap()
                }),
            }
        }
        "focal" => {
            let (b, c) = (rng.random_range(1..4), rng.random_range(1..5));
            let gamma = rng.random_range(0.5..3.0);
            let targets: Vec<f64> = (0..b * c)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            GradCase {
                inputs: vec![rand_tensor(rng, vec![b, c], -3.0, 3.0)],
                build: Box::new(move |t, ids| {
                    let y = t.constant_from(targets.clone(), vec![b, c]).unwrap();
                    losses::focal_multilabel(t, ids[0], y, gamma).unwrap()
                }),
            }
        }
        "ce_pixelwise" => {
            let (b, p, c) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(2..5),
            );
            let targets: Vec<usize> = (0..b * p).map(|_| rng.random_range(0..c)).collect();
            GradCase {
                inputs: vec![rand_tensor(rng, vec![b, p, c], -3.0, 3.0)],
                build: Box::new(move |t, ids| {
                    losses::ce_pixelwise(t, ids[0], &targets).unwrap()
                }),
            }
        }
        "mse" => {
            let (b, d) = (rng.random_range(1..4), rng.random_range(1..5));
            let target: Vec<f64> = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            GradCase {
                inputs: vec![rand_tensor(rng, vec![b, d], -2.0, 2.0)],
                build: Box::new(move |t, ids| {
                    let f = t.constant_from(target.clone(), vec![b, d]).unwrap();
                    losses::mse_features(t, ids[0], f).unwrap()
                }),
            }
        }
        "kl" => {
            let (b, j) = (rng.random_range(1..4), rng.random_range(1..5));
            GradCase {
                inputs: vec![
                    rand_tensor(rng, vec![b, j], -2.0, 2.0),
                    rand_tensor(rng, vec![b, j], -1.5, 1.5),
                ],
                build: Box::new(|t, ids| losses::kl_gaussian(t, ids[0], ids[1]).unwrap()),
            }
        }
        "svae_composite" => svae_composite_case(rng),
        other => panic!("unknown gradcheck op {other}"),
    }
}

/// Full SVAE loss through the branch parameters: posterior heads,
/// reparameterized sample, decoder, auxiliary head, all three loss
/// terms. The features, epsilon draw, and targets stay fixed.
fn svae_composite_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (b, d, j, c) = (
        rng.random_range(1..3),
        rng.random_range(2..4),
        rng.random_range(1..3),
        rng.random_range(1..3),
    );
    let features: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let eps: Vec<f64> = (0..b * j).map(|_| rng.random_range(-1.5..1.5)).collect();
    let targets: Vec<f64> = (0..b * c)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let inputs = vec![
        rand_tensor(rng, vec![d, j], -0.8, 0.8), // mu weight
        rand_tensor(rng, vec![j], -0.5, 0.5),    // mu bias
        rand_tensor(rng, vec![d, j], -0.8, 0.8), // logvar weight
        rand_tensor(rng, vec![j], -0.5, 0.5),    // logvar bias
        rand_tensor(rng, vec![j, d], -0.8, 0.8), // decoder weight
        rand_tensor(rng, vec![d], -0.5, 0.5),    // decoder bias
        rand_tensor(rng, vec![j, c], -0.8, 0.8), // aux head weight
        rand_tensor(rng, vec![c], -0.5, 0.5),    // aux head bias
    ];
    GradCase {
        inputs,
        build: Box::new(move |t, ids| {
            let f = t.constant_from(features.clone(), vec![b, d]).unwrap();
            let affine = |t: &mut Tape, x: NodeId, w: NodeId, bias: NodeId| {
                let xw = t.matmul(x, w).unwrap();
                let shape = t.shape(xw).to_vec();
                let wide = t.broadcast(bias, &shape).unwrap();
                t.add(xw, wide).unwrap()
            };
            let mu = affine(t, f, ids[0], ids[1]);
            let logvar = affine(t, f, ids[2], ids[3]);
            let half = t.scalar_const(0.5);
            let shape = t.shape(logvar).to_vec();
            let half_wide = t.broadcast(half, &shape).unwrap();
            let half_lv = t.mul(logvar, half_wide).unwrap();
            let sigma = t.exp(half_lv).unwrap();
            let e = t.constant_from(eps.clone(), vec![b, j]).unwrap();
            let noise = t.mul(sigma, e).unwrap();
            let z = t.add(mu, noise).unwrap();
            let recon = affine(t, z, ids[4], ids[5]);
            let logits = affine(t, z, ids[6], ids[7]);

            let mse = losses::mse_features(t, recon, f).unwrap();
            let y = t.constant_from(targets.clone(), vec![b, c]).unwrap();
            let task = losses::bce_multilabel(t, logits, y).unwrap();
            let kl = losses::kl_gaussian(t, mu, logvar).unwrap();
            losses::svae_loss(
                t,
                mse,
                task,
                kl,
                &losses::SvaeLossWeights::default(),
                losses::KlSign::Standard,
            )
            .unwrap()
        }),
    }
}

pub const ALL_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "neg",
    "relu",
    "sigmoid",
    "softmax",
    "sum",
    "mean",
    "broadcast",
    "reshape",
    "slice",
    "concat",
    "bce",
    "focal",
    "ce_pixelwise",
    "mse",
    "kl",
    "svae_composite",
];

/// Randomized gradient check: `cases` random shapes/values per op,
/// each compared against the finite-difference oracle. Returns the
/// worst relative error per op.
pub fn run_full_gradcheck(cases: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for &op in ALL_OPS {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let case = make_case(op, &mut rng);
            let out_len = {
                // Build once to learn the output length for the probe
                // direction.
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
                let out = (case.build)(&mut tape, &ids);
                tape.numel(out)
            };
            let direction: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            worst = worst.max(run_case(&case, direction));
        }
        results.push((op.to_string(), worst));
    }
    results
}
