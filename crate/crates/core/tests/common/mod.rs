#![allow(dead_code)]

use patchmixer::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct coefficient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(g.value(y).shape(), &mut r);
    let w = g.constant(w);
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

/// Compares autodiff gradients of `f` against central finite differences.
/// Returns the worst `|ad - fd| / max(1, |fd|)` over all input elements.
pub fn max_gradient_error<B>(inputs: &[Tensor<f64>], build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = analytic[i].data()[j];
            let err = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// erf via composite Simpson quadrature of `2/sqrt(pi) * exp(-t^2)`.
pub fn erf_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut acc = f(0.0) + f(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}
