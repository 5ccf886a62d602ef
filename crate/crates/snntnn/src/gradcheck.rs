//! Central finite-difference verification of every backward rule, in 64-bit.
//!
//! Each check builds a scalar loss from small random tensors, compares the
//! analytic gradient of every parameter element against
//! (f(x+eps) - f(x-eps)) / (2 eps), and reports the worst relative error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::stream_rng;
use crate::snn::{Strategy, SwitcherConfig, SwitcherNetwork};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 20;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Max relative error between analytic and central-difference gradients over
/// every element of every parameter.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        let grads = if grad {
            tape.backward(loss)?;
            vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };
    let (_, analytic) = eval(params, true)?;
    let mut worst = 0f64;
    let mut perturbed: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let a = analytic
            .get(pi)
            .cloned()
            .flatten()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        for e in 0..param.numel() {
            let orig = param.data()[e];
            perturbed[pi].data_mut()[e] = orig + eps;
            let (fp, _) = eval(&perturbed, false)?;
            perturbed[pi].data_mut()[e] = orig - eps;
            let (fm, _) = eval(&perturbed, false)?;
            perturbed[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = a[e].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a[e] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values bounded away from zero (safe for the ReLU kink under eps).
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        let s = if *v >= 0.0 { 1.0 } else { -1.0 };
        *v = s * (v.abs() + 0.05);
    }
    t
}

/// Distinct well-separated values (safe for max-pool argmax under eps).
fn distinct_values(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..numel).map(|i| i as f64 * 0.01).collect();
    for i in (1..numel).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

/// Scalar probe loss sum(out (.) probe); a plain sum would miss sign errors
/// that cancel across elements.
fn probed_loss(
    tape: &mut Tape<f64>,
    out: Var,
    rng_seed: u64,
) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let probe = randn(&mut stream_rng(rng_seed, 7), shape);
    let p = tape.constant(probe);
    let prod = tape.elementwise_mul(out, p)?;
    tape.sum(prod)
}

fn check<F>(name: &str, seed: u64, mut instance: F) -> CheckResult
where
    F: FnMut(&mut ChaCha8Rng, u64) -> Result<f64>,
{
    let mut worst = 0f64;
    for i in 0..INSTANCES {
        let mut rng = stream_rng(seed, i as u64);
        match instance(&mut rng, seed.wrapping_add(i as u64)) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                return CheckResult {
                    name: format!("{} (error: {})", name, e),
                    max_rel_err: f64::INFINITY,
                    pass: false,
                }
            }
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: worst, pass: worst <= TOLERANCE }
}

pub fn run_full_suite(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    results.push(check("matmul", seed ^ 0x01, |rng, ps| {
        let a = randn(rng, vec![3, 4]);
        let b = randn(rng, vec![4, 2]);
        finite_diff_check(&[a, b], |tape, vars| {
            let out = tape.matmul(vars[0], vars[1])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("conv2d", seed ^ 0x02, |rng, ps| {
        let input = randn(rng, vec![2, 4, 4]);
        let kernel = randn(rng, vec![3, 2, 3, 3]);
        let bias = randn(rng, vec![3]);
        finite_diff_check(&[input, kernel, bias], |tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), (1, 1))?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("conv2d_nopad", seed ^ 0x03, |rng, ps| {
        let input = randn(rng, vec![1, 3, 4]);
        let kernel = randn(rng, vec![2, 1, 1, 4]);
        finite_diff_check(&[input, kernel], |tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], None, (0, 0))?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("maxpool2d", seed ^ 0x04, |rng, ps| {
        let input = distinct_values(rng, vec![2, 3, 4]);
        finite_diff_check(&[input], |tape, vars| {
            let out = tape.maxpool2d(vars[0], (1, 2))?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("upsample_nearest", seed ^ 0x05, |rng, ps| {
        let input = randn(rng, vec![2, 2, 3]);
        finite_diff_check(&[input], |tape, vars| {
            let out = tape.upsample_nearest(vars[0], 1, 2)?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("pad_crop", seed ^ 0x06, |rng, ps| {
        let input = randn(rng, vec![2, 3, 3]);
        finite_diff_check(&[input], |tape, vars| {
            let padded = tape.pad2d(vars[0], (4, 6))?;
            let out = tape.crop2d(padded, (3, 5))?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("relu", seed ^ 0x07, |rng, ps| {
        let input = randn_off_zero(rng, vec![4, 4]);
        finite_diff_check(&[input], |tape, vars| {
            let out = tape.relu(vars[0])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("elementwise_mul", seed ^ 0x08, |rng, ps| {
        let a = randn(rng, vec![3, 4]);
        let b = randn(rng, vec![3, 4]);
        finite_diff_check(&[a, b], |tape, vars| {
            let out = tape.elementwise_mul(vars[0], vars[1])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("elementwise_mul_broadcast", seed ^ 0x09, |rng, ps| {
        let a = randn(rng, vec![3, 4]);
        let v = randn(rng, vec![4]);
        finite_diff_check(&[a, v], |tape, vars| {
            let out = tape.elementwise_mul(vars[0], vars[1])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("add_col_broadcast", seed ^ 0x0a, |rng, ps| {
        let a = randn(rng, vec![3, 4]);
        let v = randn(rng, vec![4]);
        finite_diff_check(&[a, v], |tape, vars| {
            let out = tape.add_col_broadcast(vars[0], vars[1])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("concat_channels", seed ^ 0x0b, |rng, ps| {
        let a = randn(rng, vec![1, 2, 3]);
        let b = randn(rng, vec![2, 2, 3]);
        finite_diff_check(&[a, b], |tape, vars| {
            let out = tape.concat_channels(vars[0], vars[1])?;
            probed_loss(tape, out, ps)
        }, EPS)
    }));

    results.push(check("softmax_cross_entropy", seed ^ 0x0c, |rng, _| {
        let logits = randn(rng, vec![4, 3]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        finite_diff_check(&[logits], |tape, vars| {
            tape.softmax_cross_entropy(vars[0], &labels)
        }, EPS)
    }));

    results.push(check("shared_input_accumulation", seed ^ 0x0d, |rng, ps| {
        let a = randn(rng, vec![3, 3]);
        let b = randn(rng, vec![3, 3]);
        finite_diff_check(&[a, b], |tape, vars| {
            // a feeds two consumers; gradients must accumulate.
            let m = tape.matmul(vars[0], vars[1])?;
            let p = tape.elementwise_mul(vars[0], m)?;
            probed_loss(tape, p, ps)
        }, EPS)
    }));

    for strategy in [Strategy::Connection, Strategy::Neuron] {
        let name = format!("switcher_forward_{}", strategy);
        results.push(check(&name, seed ^ 0x10, move |rng, ps| {
            let cfg = SwitcherConfig {
                blocks: 2,
                channels: vec![2, 3],
                strategy,
                gate_bias_init: 1.0,
            };
            let sw = SwitcherNetwork::<f64>::init(&cfg, 4, 4, rng.gen())?;
            let w = randn(rng, vec![4, 4]);
            let mut params: Vec<Tensor<f64>> =
                sw.named_params().into_iter().map(|(_, t)| t.clone()).collect();
            params.push(w);
            let n_params = params.len() - 1;
            finite_diff_check(&params, |tape, vars| {
                let sv = sw.vars_from_slice(&vars[..n_params]);
                let z = sw.forward(tape, &sv, vars[n_params])?;
                probed_loss(tape, z, ps)
            }, EPS)
        }));
    }

    results
}
