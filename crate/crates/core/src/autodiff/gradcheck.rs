//! Central finite-difference check of tape gradients.
//!
//! The function under test maps input tensors to an arbitrary output; the
//! checker contracts that output with a fixed random weighting so a single
//! scalar exercises the full vector-Jacobian product.
//!
//! Finite differences cannot resolve derivatives much below their own
//! rounding error `ε·S/h`, where `S = Σ|w_i·y_i|` is the magnitude of the
//! terms in the contracted objective. Each probe's relative error is
//! therefore taken against `max(|analytic|, |numeric|, floor)` with
//! `floor = max(REL_FLOOR, ε·S / (h·RESOLUTION), SCALE_FLOOR·G)` where `G`
//! is the largest analytic derivative in the check. The last term covers
//! ill-conditioned forward passes (normalizing nearly flat groups) whose
//! rounding exceeds `ε·S`. A probe whose true derivative sits below the
//! floor is judged on an absolute scale.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Smallest denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Fraction of the largest derivative below which probes are judged on an
/// absolute scale.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Relative error at which the rounding of a single difference quotient
/// is placed when deriving the floor.
pub const RESOLUTION: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: Vec<Probe>,
    /// Denominator floor used for every probe.
    pub floor: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Returns the tape, the input leaves, the contracted objective and the
/// sum of absolute contracted terms.
fn objective<F>(f: &F, inputs: &[Tensor], weights: &mut Option<Tensor>, seed: u64) -> Result<(Tape, Vec<Var>, Var, f64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng)
    });
    let magnitude = tape.value(out).data().iter().zip(w.data()).map(|(y, w)| (y * w).abs()).sum();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let total = tape.sum(prod);
    Ok((tape, vars, total, magnitude))
}

/// Compares analytic gradients with the fourth-order central difference
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` on up to
/// `probes_per_input` randomly chosen elements of each input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64, probes_per_input: usize, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (tape, vars, total, magnitude) = objective(&f, inputs, &mut weights, seed)?;
    let grads = tape.backward(total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let largest = vars
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let floor = REL_FLOOR.max(f64::EPSILON * magnitude / (h * RESOLUTION)).max(SCALE_FLOOR * largest);
    let mut report = GradReport {
        probes: Vec::new(),
        floor,
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let count = probes_per_input.min(input.len());
        for element in sample(&mut rng, input.len(), count).into_iter() {
            let eval = |delta: f64, weights: &mut Option<Tensor>| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[element] += delta;
                let (tape, _, total, _) = objective(&f, &shifted, weights, seed)?;
                Ok(tape.value(total).data()[0])
            };
            let near = eval(h, &mut weights)? - eval(-h, &mut weights)?;
            let far = eval(2.0 * h, &mut weights)? - eval(-2.0 * h, &mut weights)?;
            let numeric = (8.0 * near - far) / (12.0 * h);
            let a = analytic.data()[element];
            report.probes.push(Probe {
                input: i,
                element,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            });
        }
    }
    Ok(report)
}
