//! Central finite-difference gradient checking.
//!
//! The numeric side never touches backward rules: each probe re-evaluates the
//! forward function on an untracked tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used by every gradient check in this crate.
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// probed coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// A seeded uniform sample of this many coordinates across all inputs.
    Sample { count: usize, seed: u64 },
}

/// Compares reverse-mode gradients of `f` with central differences.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match probe {
        Probe::All => (0..total).collect(),
        Probe::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, total, count.min(total)).into_vec();
            v.sort_unstable();
            v
        }
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut work = inputs.to_vec();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    for &flat in &coords {
        let (which, elem) = locate(inputs, flat);
        let orig = work[which].data()[elem];
        work[which].data_mut()[elem] = orig + step;
        let plus = eval(&work)?;
        work[which].data_mut()[elem] = orig - step;
        let minus = eval(&work)?;
        work[which].data_mut()[elem] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[which].data()[elem];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        max_abs = max_abs.max((a - numeric).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheckReport {
        rel_error,
        max_abs_error: max_abs,
        analytic_norm: a2.sqrt(),
        probes: coords.len(),
    })
}

fn locate(inputs: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("coordinate out of range")
}
