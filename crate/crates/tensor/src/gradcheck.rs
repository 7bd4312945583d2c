//! Central finite-difference checks of analytic gradients in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::conv::Conv2dOptions;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so entries that are zero up to
/// round-off are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomized instance: inputs (with a flag marking which are
/// differentiated) and the function under test.
pub struct Trial {
    pub inputs: Vec<(Tensor<f64>, bool)>,
    pub build: Build,
}

impl Trial {
    pub fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { inputs: inputs.into_iter().map(|t| (t, true)).collect(), build: Box::new(build) }
    }

    pub fn with_constant(mut self, t: Tensor<f64>) -> Self {
        self.inputs.push((t, false));
        self
    }
}

pub struct GradCase {
    pub name: &'static str,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Trial>,
}

impl GradCase {
    pub fn new(name: &'static str, make: impl Fn(&mut ChaCha8Rng) -> Trial + 'static) -> Self {
        Self { name, make: Box::new(make) }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// `loss = Σ out ⊙ R` for a fixed random `R`, so every output entry carries a
/// distinct weight.
fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn eval(trial: &Trial, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(f64, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (trial.build)(&mut tape, &vars)?;
    let dims = tape.dims(out).to_vec();
    let loss = match weights {
        Some(w) => scalarize(&mut tape, out, w)?,
        None => tape.sum(out)?,
    };
    Ok((tape.data(loss)[0], dims))
}

/// Largest relative error between analytic and numeric gradients over all
/// differentiated inputs of one trial.
pub fn check_trial(trial: &Trial, rng: &mut ChaCha8Rng) -> Result<f64> {
    let base: Vec<Tensor<f64>> = trial.inputs.iter().map(|(t, _)| t.clone()).collect();
    let (_, out_dims) = eval(trial, &base, None)?;
    let weights = Tensor::uniform(out_dims, -1.0, 1.0, rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = trial
        .inputs
        .iter()
        .map(|(t, diff)| if *diff { tape.variable(t.clone()) } else { tape.input(t.clone()) })
        .collect();
    let out = (trial.build)(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, (t, diff)) in trial.inputs.iter().enumerate() {
        if !*diff {
            continue;
        }
        let analytic = grads.get(vars[i]).unwrap_or_else(|| Tensor::zeros(t.dims().to_vec()));
        let mut probe = base.clone();
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let (up, _) = eval(trial, &probe, Some(&weights))?;
            probe[i].data_mut()[j] = orig - STEP;
            let (down, _) = eval(trial, &probe, Some(&weights))?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

pub fn run_case(case: &GradCase, trials: usize, seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let trial = (case.make)(&mut rng);
        worst = worst.max(check_trial(&trial, &mut rng)?);
    }
    Ok(CaseReport { name: case.name, trials, max_rel_err: worst, passed: worst < TOLERANCE })
}

/// Normal entries pushed at least `gap` away from zero (keeps ReLU kinks
/// outside the finite-difference stencil).
pub fn away_from_zero(dims: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t: Tensor<f64> = Tensor::randn(dims.to_vec(), 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * (1.0 + rng.random::<f64>());
        }
    }
    t
}

/// Distinct values spaced ≥ 0.01 apart in random order (no ties for max ops).
pub fn distinct(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 - n as f64 * 0.01 + rng.random_range(0.0..0.005)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(dims.to_vec(), vals).expect("dims match")
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(dims.to_vec(), 1.0, rng)
}

/// Same-rank shape plus a broadcast partner (random axes collapsed to 1).
fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let rank = rng.random_range(1..=4);
    let full: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
    let part = full.iter().map(|&d| if rng.random_bool(0.4) { 1 } else { d }).collect();
    (full, part)
}

fn unary_case(name: &'static str, positive: bool, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> GradCase {
    GradCase::new(name, move |rng| {
        let dims: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=5)).collect();
        let x = if positive { Tensor::uniform(dims, 0.5, 2.0, rng) } else { away_from_zero(&dims, 1e-3, rng) };
        Trial::new(vec![x], move |t, v| f(t, v[0]))
    })
}

fn binary_case(name: &'static str, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>, positive_rhs: bool) -> GradCase {
    GradCase::new(name, move |rng| {
        let (mut a, mut b) = broadcast_pair(rng);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut a, &mut b);
        }
        let rhs = if positive_rhs { Tensor::uniform(b, 0.5, 2.0, rng) } else { randn(&b, rng) };
        Trial::new(vec![randn(&a, rng), rhs], move |t, v| f(t, v[0], v[1]))
    })
}

fn nchw(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> Vec<usize> {
    vec![rng.random_range(1..=2), rng.random_range(1..=max_c), rng.random_range(2..=max_hw), rng.random_range(2..=max_hw)]
}

/// Every differentiable primitive of the tape.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut cases = vec![
        GradCase::new("conv2d", |rng| {
            loop {
                let k = rng.random_range(1..=3);
                let opts = Conv2dOptions::new(rng.random_range(1..=2), rng.random_range(0..=2), rng.random_range(1..=2));
                let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
                let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
                if crate::ops::conv::conv_out_extent(h, k, opts).is_none() || crate::ops::conv::conv_out_extent(w, k, opts).is_none() {
                    continue;
                }
                let with_bias = rng.random_bool(0.7);
                let mut inputs = vec![randn(&[b, cin, h, w], rng), randn(&[cout, cin, k, k], rng)];
                if with_bias {
                    inputs.push(randn(&[cout], rng));
                }
                return Trial::new(inputs, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), opts));
            }
        }),
        GradCase::new("bilinear_resize", |rng| {
            let dims = nchw(rng, 3, 5);
            let (oh, ow) = (rng.random_range(1..=8), rng.random_range(1..=8));
            Trial::new(vec![randn(&dims, rng)], move |t, v| t.bilinear_resize(v[0], oh, ow))
        }),
        GradCase::new("max_pool2d", |rng| {
            let dims = nchw(rng, 2, 6);
            let (k, s) = (rng.random_range(2..=3), rng.random_range(1..=2));
            let p = rng.random_range(0..k.min(2));
            let dims = vec![dims[0], dims[1], dims[2].max(k), dims[3].max(k)];
            Trial::new(vec![distinct(&dims, rng)], move |t, v| t.max_pool2d(v[0], k, s, p))
        }),
        GradCase::new("linear", |rng| {
            let (rows, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
            Trial::new(vec![randn(&[2, rows, din], rng), randn(&[dout, din], rng), randn(&[dout], rng)], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            })
        }),
        GradCase::new("bmm", |rng| {
            let (b, m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let tb = rng.random_bool(0.5);
            let rhs = if tb { [b, n, k] } else { [b, k, n] };
            Trial::new(vec![randn(&[b, m, k], rng), randn(&rhs, rng)], move |t, v| t.bmm(v[0], v[1], tb))
        }),
        unary_case("relu", false, |t, x| t.relu(x)),
        unary_case("gelu", false, |t, x| t.gelu(x)),
        unary_case("sigmoid", false, |t, x| t.sigmoid(x)),
        unary_case("tanh", false, |t, x| t.tanh(x)),
        unary_case("exp", false, |t, x| t.exp(x)),
        unary_case("log", true, |t, x| t.log(x)),
        unary_case("scale", false, |t, x| t.scale(x, -1.7)),
        unary_case("add_scalar", false, |t, x| t.add_scalar(x, 0.3)),
        binary_case("add", |t, a, b| t.add(a, b), false),
        binary_case("sub", |t, a, b| t.sub(a, b), false),
        binary_case("mul", |t, a, b| t.mul(a, b), false),
        binary_case("div", |t, a, b| t.div(a, b), true),
        GradCase::new("sum", |rng| Trial::new(vec![randn(&[3, 4], rng)], |t, v| t.sum(v[0]))),
        GradCase::new("mean", |rng| Trial::new(vec![randn(&[2, 5], rng)], |t, v| t.mean(v[0]))),
        GradCase::new("global_avg_pool", |rng| Trial::new(vec![randn(&[2, 3, 3, 4], rng)], |t, v| t.global_avg_pool(v[0]))),
    ];
    for (name, which) in [("sum_axis", 0u8), ("mean_axis", 1), ("max_axis", 2), ("softmax", 3), ("log_softmax", 4)] {
        cases.push(GradCase::new(name, move |rng| {
            let dims: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=4)).collect();
            let axis = rng.random_range(0..dims.len());
            let x = if which == 2 { distinct(&dims, rng) } else { randn(&dims, rng) };
            Trial::new(vec![x], move |t, v| match which {
                0 => t.sum_axis(v[0], axis),
                1 => t.mean_axis(v[0], axis),
                2 => t.max_axis(v[0], axis),
                3 => t.softmax(v[0], axis),
                _ => t.log_softmax(v[0], axis),
            })
        }));
    }
    cases.extend([
        GradCase::new("reshape", |rng| {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            Trial::new(vec![randn(&[a, b, 2], rng)], move |t, v| t.reshape(v[0], &[b, 2 * a]))
        }),
        GradCase::new("permute", |rng| {
            let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=3)).collect();
            let mut perm = vec![0, 1, 2, 3];
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            Trial::new(vec![randn(&dims, rng)], move |t, v| t.permute(v[0], &perm))
        }),
        GradCase::new("concat", |rng| {
            let axis = rng.random_range(0..3);
            let mut d1 = vec![2, 3, 2];
            let mut d2 = d1.clone();
            d1[axis] = rng.random_range(1..=3);
            d2[axis] = rng.random_range(1..=3);
            Trial::new(vec![randn(&d1, rng), randn(&d2, rng)], move |t, v| t.concat(&[v[0], v[1]], axis))
        }),
        GradCase::new("slice", |rng| {
            let axis = rng.random_range(0..3);
            let dims = vec![3, 4, 3];
            let start = rng.random_range(0..dims[axis]);
            let len = rng.random_range(1..=dims[axis] - start);
            Trial::new(vec![randn(&dims, rng)], move |t, v| t.slice(v[0], axis, start, len))
        }),
        GradCase::new("batch_norm_train", |rng| {
            let dims = vec![rng.random_range(2..=3), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=3)];
            let c = dims[1];
            Trial::new(vec![randn(&dims, rng), Tensor::uniform(vec![c], 0.5, 1.5, rng), randn(&[c], rng)], |t, v| {
                Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
            })
        }),
        GradCase::new("batch_norm_eval", |rng| {
            let dims = nchw(rng, 3, 3);
            let c = dims[1];
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            Trial::new(vec![randn(&dims, rng), randn(&[c], rng), randn(&[c], rng)], move |t, v| {
                t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            })
        }),
        GradCase::new("layer_norm", |rng| {
            let d = rng.random_range(2..=6);
            Trial::new(vec![randn(&[2, 3, d], rng), Tensor::uniform(vec![d], 0.5, 1.5, rng), randn(&[d], rng)], |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        GradCase::new("multi_head_self_attention", |rng| {
            let heads = rng.random_range(1..=2);
            let d = heads * rng.random_range(1..=3);
            let n = rng.random_range(1..=4);
            let mut inputs = vec![randn(&[rng.random_range(1..=2), n, d], rng)];
            for _ in 0..4 {
                inputs.push(Tensor::randn(vec![d, d], 0.5, rng));
                inputs.push(Tensor::randn(vec![d], 0.5, rng));
            }
            Trial::new(inputs, move |t, v| {
                let p = crate::attention::AttentionVars { q: (v[1], v[2]), k: (v[3], v[4]), v: (v[5], v[6]), out: (v[7], v[8]) };
                Ok(t.multi_head_self_attention(v[0], &p, heads)?.output)
            })
        }),
    ]);
    cases
}
