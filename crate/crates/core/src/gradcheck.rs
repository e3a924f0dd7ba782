//! Central finite-difference checks of tape gradients, in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Absolute differences below this count as agreement.
    pub abs_floor: f64,
    /// Maximum number of scalar entries probed across all inputs.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, tol: 1e-4, abs_floor: 1e-6, max_entries: 64, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    /// Probed entries whose numeric derivative exceeds the absolute floor.
    pub nonzero: usize,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with an absolute floor: differences below `abs_floor` are
/// reported as zero.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares `d f / d inputs` from the tape against central differences.
/// `f` must build a scalar from the given leaves.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x)).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    // Flat index over all input entries, subsampled deterministically.
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picks: Vec<usize> = if total <= opts.max_entries {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = sample(&mut rng, total, opts.max_entries).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_diff: 0.0,
        nonzero: 0,
        worst: None,
        tol: opts.tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for flat in picks {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let elem = flat - offsets[which];
        let orig = work[which].data()[elem];
        work[which].data_mut()[elem] = orig + opts.step;
        let fp = eval(&work)?;
        work[which].data_mut()[elem] = orig - opts.step;
        let fm = eval(&work)?;
        work[which].data_mut()[elem] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[which][elem];
        let e = rel_err(a, numeric, opts.abs_floor);
        report.checked += 1;
        report.max_abs_diff = report.max_abs_diff.max((a - numeric).abs());
        report.nonzero += usize::from(numeric.abs() > opts.abs_floor);
        if report.worst.is_none() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((which, elem, a, numeric));
        }
    }
    Ok(report)
}
