//! Central finite-difference gradient checks for every differentiable
//! tape operation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmc_core::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 20;

pub struct OpResult {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.cases >= CASES && self.worst < TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    t
}

/// Builds the op on fresh leaves and reduces its output to a scalar with a
/// fixed random projection.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn projected(
    build: &Build<'_>,
    inputs: &[Tensor],
    projection: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &leaves);
    let loss = if tape.value(out).is_scalar() {
        out
    } else {
        let shape = tape.value(out).shape().to_vec();
        let p = projection
            .get_or_insert_with(|| random_tensor(rng, &shape, 1.0))
            .clone();
        let pv = tape.constant(p);
        let prod = tape.mul(out, pv).expect("projection shape");
        tape.sum(prod)
    };
    (tape, loss, leaves)
}

/// Relative error between analytic and numeric gradients of one case,
/// measured as a vector norm over every input coordinate.
pub fn check_case(build: &Build<'_>, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut projection = None;
    let (mut tape, loss, leaves) = projected(build, inputs, &mut projection, rng);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| tape.grad(l).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor], projection: &mut Option<Tensor>, rng: &mut ChaCha8Rng| {
        let (tape, loss, _) = projected(build, inputs, projection, rng);
        tape.value(loss).item()
    };
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work, &mut projection, rng);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work, &mut projection, rng);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i][j];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    if scale < 1e-10 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

fn run(
    op: &'static str,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>),
) -> OpResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (inputs, build) = make(&mut rng);
        worst = worst.max(check_case(build.as_ref(), &inputs, &mut rng));
    }
    OpResult {
        op,
        cases: CASES,
        worst,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

pub fn check_matmul() -> OpResult {
    run("matmul", 1, |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        let inputs = vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[k, n], 1.0)];
        (
            inputs,
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
        )
    })
}

pub fn check_add() -> OpResult {
    run("add", 2, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 1.0), random_tensor(rng, &[m, n], 1.0)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap()))
    })
}

pub fn check_mul() -> OpResult {
    run("mul", 3, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 1.0), random_tensor(rng, &[m, n], 1.0)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap()))
    })
}

pub fn check_scale() -> OpResult {
    run("scale", 4, |rng| {
        let (m, n) = dims(rng);
        let c = rng.gen_range(-3.0..3.0);
        let inputs = vec![random_tensor(rng, &[m, n], 1.0)];
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| t.scale(v[0], c)))
    })
}

pub fn check_add_row() -> OpResult {
    run("add_row", 5, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 1.0), random_tensor(rng, &[n], 1.0)];
        (
            inputs,
            Box::new(|t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]).unwrap()),
        )
    })
}

pub fn check_sum() -> OpResult {
    run("sum", 6, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 1.0)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0])))
    })
}

pub fn check_gelu() -> OpResult {
    run("gelu", 7, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 3.0)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.gelu(v[0])))
    })
}

pub fn check_layer_norm() -> OpResult {
    run("layer_norm", 8, |rng| {
        let m = rng.gen_range(1..4);
        let n = rng.gen_range(2..7);
        let inputs = vec![
            random_tensor(rng, &[m, n], 2.0),
            random_tensor(rng, &[n], 1.5),
            random_tensor(rng, &[n], 1.0),
        ];
        (
            inputs,
            Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        )
    })
}

pub fn check_softmax_rows() -> OpResult {
    run("softmax_rows", 9, |rng| {
        let (m, n) = dims(rng);
        let inputs = vec![random_tensor(rng, &[m, n], 3.0)];
        (
            inputs,
            Box::new(|t: &mut Tape, v: &[Var]| t.softmax_rows(v[0]).unwrap()),
        )
    })
}

/// Attention with shared or per-sample head masks and random padding.
pub fn check_attention() -> OpResult {
    run("attention", 10, |rng| {
        let batch = rng.gen_range(1..3);
        let seq = rng.gen_range(1..5);
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..4);
        let per_sample = rng.gen_bool(0.5);
        let mut key_mask = Vec::new();
        for _ in 0..batch {
            let valid = rng.gen_range(1..=seq);
            key_mask.extend((0..seq).map(|j| j < valid));
        }
        let xi_shape = if per_sample { vec![batch, heads] } else { vec![heads] };
        let inputs = vec![
            random_tensor(rng, &[batch * seq, d], 1.5),
            random_tensor(rng, &[batch * seq, d], 1.5),
            random_tensor(rng, &[batch * seq, d], 1.5),
            random_tensor(rng, &xi_shape, 1.0),
        ];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                t.attention(v[0], v[1], v[2], v[3], &key_mask, batch, heads).unwrap()
            }),
        )
    })
}

pub fn check_embedding() -> OpResult {
    run("embedding", 11, |rng| {
        let vocab = rng.gen_range(2..6);
        let d = rng.gen_range(1..5);
        let ids: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..vocab)).collect();
        let inputs = vec![random_tensor(rng, &[vocab, d], 1.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| t.embedding(v[0], &ids).unwrap()),
        )
    })
}

pub fn check_select_rows() -> OpResult {
    run("select_rows", 12, |rng| {
        let (m, n) = dims(rng);
        let rows: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..m)).collect();
        let inputs = vec![random_tensor(rng, &[m, n], 1.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| t.select_rows(v[0], &rows).unwrap()),
        )
    })
}

pub fn check_mask_mul() -> OpResult {
    run("mask_mul", 13, |rng| {
        let (m, n) = dims(rng);
        let mask: Vec<f64> = (0..m * n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let inputs = vec![random_tensor(rng, &[m, n], 1.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| t.mask_mul(v[0], &mask).unwrap()),
        )
    })
}

pub fn check_cross_entropy() -> OpResult {
    run("cross_entropy", 14, |rng| {
        let b = rng.gen_range(1..5);
        let k = rng.gen_range(2..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let weights: Option<Vec<f64>> = rng
            .gen_bool(0.5)
            .then(|| (0..b).map(|_| rng.gen_range(0.0..2.0)).collect());
        let inputs = vec![random_tensor(rng, &[b, k], 3.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels, weights.as_deref()).unwrap()),
        )
    })
}

fn random_distribution(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[b, k]);
    for r in 0..b {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (j, v) in raw.iter().enumerate() {
            t.data_mut()[r * k + j] = v / s;
        }
    }
    t
}

pub fn check_kl_divergence() -> OpResult {
    run("kl_divergence", 15, |rng| {
        let b = rng.gen_range(1..5);
        let k = rng.gen_range(2..5);
        let target = random_distribution(rng, b, k);
        let weights: Option<Vec<f64>> = rng
            .gen_bool(0.5)
            .then(|| (0..b).map(|_| rng.gen_range(0.0..2.0)).collect());
        let inputs = vec![random_tensor(rng, &[b, k], 3.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| t.kl_divergence(&target, v[0], weights.as_deref()).unwrap()),
        )
    })
}

pub fn gradient_suite() -> Vec<OpResult> {
    vec![
        check_matmul(),
        check_add(),
        check_mul(),
        check_scale(),
        check_add_row(),
        check_sum(),
        check_gelu(),
        check_layer_norm(),
        check_softmax_rows(),
        check_attention(),
        check_embedding(),
        check_select_rows(),
        check_mask_mul(),
        check_cross_entropy(),
        check_kl_divergence(),
    ]
}
