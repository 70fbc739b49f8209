//! Central finite-difference checking of analytic gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Tensor, Var};
use crate::error::{param_err, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// Flat `(input, element)` of the worst mismatch.
    pub worst: (usize, usize),
}

/// Fixed random weights contracting an output of the given shape to a scalar.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn eval_projected<F>(mode: Mode, inputs: &[Tensor<f64>], f: &F, seed: u64) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let proj = g.constant(projection(g.shape(out), seed));
    let prod = g.mul(out, proj)?;
    let loss = g.sum_all(prod);
    Ok((g, loss, vars))
}

/// Compare `d(sum(f(inputs) * R))/d(inputs)` from [`Graph::backward`] against central
/// differences with step `eps`, for every element of every input. `R` is a fixed random
/// projection drawn from `seed`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return param_err("finite-difference step must be positive");
    }
    let (mut g, loss, vars) = eval_projected(Mode::Training, inputs, &f, seed)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (gp, lp, _) = eval_projected(Mode::Inference, &work, &f, seed)?;
            let plus = gp.value(lp).item();
            work[i].data_mut()[j] = orig - eps;
            let (gm, lm, _) = eval_projected(Mode::Inference, &work, &f, seed)?;
            let minus = gm.value(lm).item();
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[i][j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
