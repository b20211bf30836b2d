//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{arg_err, Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_probes: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return arg_err("grad_check needs a scalar-valued function");
    }
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// `(f(x + eps) − f(x − eps)) / (2 eps)` per coordinate and returns the largest
/// relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_probes {
        Some(m) if m < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| coords[k]).collect()
        }
        _ => coords,
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, probes: chosen.len() };
    let mut probe = inputs.to_vec();
    for &(i, j) in &chosen {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + opts.eps;
        let plus = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig - opts.eps;
        let minus = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "numeric gradient at input {i}, coordinate {j} is {numeric}"
            )));
        }
        let err = relative_error(analytic[i].data()[j], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
