//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let y = v.item().to_f64_lossy();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check", index: 0 });
    }
    Ok(y)
}

/// Worst relative error between tape gradients and central differences of
/// `f` at `x`, over every coordinate of `x`.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(|t: &mut Tape<T>, v: &[Var]| f(t, v[0]), std::slice::from_ref(x), step, None)?;
    Ok(report.worst())
}

/// Per-input outcome of [`grad_check_many`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    /// Number of coordinates compared per input.
    pub checked: Vec<usize>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_index(&self) -> Option<usize> {
        self.per_input
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Checks gradients for several inputs at once. With `sample = Some((k,
/// seed))` only `k` randomly chosen coordinates per input are perturbed;
/// otherwise all of them.
pub fn grad_check_many<T: Scalar, F>(
    f: F,
    inputs: &[Tensor<T>],
    step: f64,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.shape()))
        .collect();
    drop(tape);

    let mut rng = sample_per_input.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (sample_per_input, rng.as_mut()) {
            (Some((k, _)), Some(r)) if k < x.numel() => sample(r, x.numel(), k).into_vec(),
            _ => (0..x.numel()).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = x.data()[c];
            let h = T::from_f64_lossy(step);
            work[i].data_mut()[c] = orig + h;
            let fp = eval_scalar(&f, &work)?;
            work[i].data_mut()[c] = orig - h;
            let fm = eval_scalar(&f, &work)?;
            work[i].data_mut()[c] = orig;
            // Use the actually representable step.
            let span = ((orig + h) - (orig - h)).to_f64_lossy();
            let numeric = (fp - fm) / span;
            worst = worst.max(relative_error(analytic[i].data()[c].to_f64_lossy(), numeric));
        }
        per_input.push(worst);
        checked.push(coords.len());
    }
    Ok(GradCheckReport { per_input, checked })
}
