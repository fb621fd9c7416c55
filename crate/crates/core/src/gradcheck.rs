//! Central finite-difference checks of tape gradients at 64-bit.
//!
//! The error measure is normwise: `max|analytic − numeric| / max(max|numeric|,
//! max|analytic|, 1e-12)`. Entry-wise ratios are meaningless for gradients
//! that are tiny compared with the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{BackwardFault, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    fn from_pairs(name: &str, pairs: &[(f64, f64)]) -> Self {
        let max_abs_err = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = pairs
            .iter()
            .map(|(a, n)| a.abs().max(n.abs()))
            .fold(1e-12, f64::max);
        Self {
            name: name.to_string(),
            checked: pairs.len(),
            max_abs_err,
            max_rel_err: max_abs_err / scale,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on probed entries per tensor; entries are spread evenly.
    pub max_entries: usize,
    pub fault: Option<BackwardFault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_entries: usize::MAX,
            fault: None,
        }
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

fn new_tape(fault: Option<BackwardFault>) -> Tape<f64> {
    fault.map_or_else(Tape::new, Tape::with_fault)
}

/// Checks the gradient of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: CheckOptions,
    f: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = new_tape(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in probe_indices(input.numel(), opts.max_entries) {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            pairs.push((analytic[which][i], (plus - minus) / (2.0 * opts.step)));
        }
    }
    Ok(CheckOutcome::from_pairs(name, &pairs))
}

/// Checks the gradient of `f` with respect to parameters `ids` of `ps`.
pub fn check_params<F>(
    name: &str,
    ps: &ParamStore<f64>,
    ids: &[ParamId],
    opts: CheckOptions,
    f: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = new_tape(opts.fault);
    let loss = f(&mut tape, ps)?;
    tape.backward(loss)?;
    let analytic = ps.grads_from(&tape);

    let mut work = ps.clone();
    let mut pairs = Vec::new();
    for &id in ids {
        for i in probe_indices(ps.get(id).numel(), opts.max_entries) {
            let orig = ps.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = scalar(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = scalar(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            pairs.push((analytic[id.index()][i], (plus - minus) / (2.0 * opts.step)));
        }
    }
    Ok(CheckOutcome::from_pairs(name, &pairs))
}

fn scalar<F>(f: &F, ps: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut t = Tape::new();
    let l = f(&mut t, ps)?;
    Ok(t.value(l).data()[0])
}

/// Reduces a tensor output to a scalar through a fixed random weighting, so
/// every output entry influences the checked gradient.
pub fn project_to_scalar(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(weights);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}
