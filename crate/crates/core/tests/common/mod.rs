#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinedial::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with an absolute floor, so vanishing gradients are
/// compared on an absolute 1e-3 scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences. `f` receives the input leaves and must return a scalar.
/// Returns the maximum relative error over every input entry.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
        let out = f(&mut t, &vars);
        t.scalar(out)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| x.clone().with_requires_grad(true)).collect();
    let vars: Vec<Var> = leaves.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Reduces an arbitrary-shaped output to a scalar through a fixed random
/// weighting, so that gradients are not trivially symmetric.
pub fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = t.shape(x).to_vec();
    let mut r = rng(seed ^ 0xabcdef);
    let w = random_tensor(&mut r, &shape);
    let wv = t.constant(&w);
    let p = t.mul(x, wv).unwrap();
    t.sum_all(p)
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var], u64) -> Var>;

/// One differentiable operation under test: name, input shapes and the
/// scalar function built from it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var], u64) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// Every differentiable tape operation, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v, s| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("matmul_bt", &[&[3, 4], &[5, 4]], |t, v, s| {
            let y = t.matmul_bt(v[0], v[1]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("transpose", &[&[3, 4]], |t, v, s| {
            let y = t.transpose(v[0]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("add", &[&[2, 3], &[2, 3]], |t, v, s| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("add_row", &[&[4, 3], &[3]], |t, v, s| {
            let y = t.add_row(v[0], v[1]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("mul", &[&[2, 3], &[2, 3]], |t, v, s| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("scale", &[&[5]], |t, v, s| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, s)
        }),
        case("relu", &[&[6]], |t, v, s| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, s)
        }),
        case("tanh", &[&[6]], |t, v, s| {
            let y = t.tanh(v[0]);
            weighted_sum(t, y, s)
        }),
        case("sigmoid", &[&[6]], |t, v, s| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, s)
        }),
        case("softmax last axis", &[&[3, 5]], |t, v, s| {
            let y = t.softmax(v[0], 1).unwrap();
            weighted_sum(t, y, s)
        }),
        case("softmax first axis", &[&[3, 5]], |t, v, s| {
            let y = t.softmax(v[0], 0).unwrap();
            weighted_sum(t, y, s)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v, s| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y, s)
        }),
        case("embedding", &[&[5, 3]], |t, v, s| {
            let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v, s| {
            let y = t.concat_rows(&[v[0], v[1], v[0]]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("concat_cols", &[&[2, 3], &[2, 1]], |t, v, s| {
            let y = t.concat_cols(&[v[1], v[0]]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("slices", &[&[4, 5]], |t, v, s| {
            let a = t.slice_rows(v[0], 1, 2).unwrap();
            let b = t.slice_cols(a, 2, 3).unwrap();
            weighted_sum(t, b, s)
        }),
        case("reshape+swap01", &[&[2, 3, 4]], |t, v, s| {
            let a = t.swap01(v[0]).unwrap();
            let b = t.reshape(a, vec![3, 8]).unwrap();
            weighted_sum(t, b, s)
        }),
        case("mean_rows", &[&[4, 3]], |t, v, s| {
            let y = t.mean_rows(v[0]).unwrap();
            weighted_sum(t, y, s)
        }),
        case("mean_all", &[&[4, 3]], |t, v, _| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.mean_all(sq)
        }),
        case("cross_entropy", &[&[4, 6]], |t, v, _| t.cross_entropy(v[0], &[1, 5, 0, 3], Some(0)).unwrap()),
        case("bce_with_logits", &[&[1]], |t, v, s| {
            let target = if s % 2 == 0 { 1.0 } else { 0.0 };
            let z = t.scale(v[0], 3.0);
            t.bce_with_logits(z, target).unwrap()
        }),
        case("conv2d", &[&[1, 4, 5], &[3, 1, 3, 3], &[3]], |t, v, s| {
            let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
            weighted_sum(t, y, s)
        }),
        case("conv2d+maxpool", &[&[2, 4, 6], &[2, 2, 3, 3], &[2]], |t, v, s| {
            let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
            let p = t.max_pool2d(y, 2).unwrap();
            weighted_sum(t, p, s)
        }),
        case("attention", &[&[3, 4], &[5, 4], &[5, 4], &[4], &[4]], |t, v, s| {
            let logits = t.matmul_bt(v[0], v[1]).unwrap();
            let scaled = t.scale(logits, 0.5);
            let a = t.softmax(scaled, 1).unwrap();
            let h = t.matmul(a, v[2]).unwrap();
            let y = t.layer_norm(h, v[3], v[4], 1e-5).unwrap();
            weighted_sum(t, y, s)
        }),
    ]
}

/// Worst finite-difference error of `case` over seeds `0..seeds`.
pub fn worst_op_error(case: &OpCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let mut r = rng(seed);
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
            grad_check(&inputs, |t, v| (case.f)(t, v, seed))
        })
        .fold(0.0, f64::max)
}
