use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval(
    loss_fn: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    params: &[Tensor<f64>],
) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients with central differences on up to
/// `coords_per_param` sampled coordinates of every parameter. Returns the
/// max of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_grad_check<F>(
    loss_fn: F,
    params: &mut [Tensor<f64>],
    epsilon: f64,
    coords_per_param: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let first = tape.scalar(loss);
    let second = eval(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(n)).collect()
        };
        for j in coords {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + epsilon;
            let plus = eval(&loss_fn, params)?;
            params[pi].data_mut()[j] = orig - epsilon;
            let minus = eval(&loss_fn, params)?;
            params[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
