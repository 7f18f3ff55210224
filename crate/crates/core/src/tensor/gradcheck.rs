//! Central finite-difference gradient checking.
//!
//! The checked function may return a tensor of any shape; it is reduced to a
//! scalar by a fixed pseudo-random projection so that every output entry
//! participates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: Real,
    /// Pass threshold on the max relative error.
    pub tolerance: Real,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: Real,
    /// Inputs are resampled until every ReLU/max kink is at least this far away.
    pub min_kink_margin: Real,
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            #[cfg(not(feature = "f32"))]
            tolerance: 1e-4,
            #[cfg(feature = "f32")]
            tolerance: 1e-2,
            floor: 1e-3,
            min_kink_margin: 1e-3,
            max_resamples: 20,
            seed: 0x9e37_79b9,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(mut self, tolerance: Real) -> Self {
        self.tolerance = tolerance;
        self
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: Real,
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: Real,
    pub kink_margin: Real,
    pub resamples: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> Real {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, Real::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )?;
        for r in &self.inputs {
            write!(
                f,
                "; input {}: {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                r.input, r.max_rel_error, r.worst_index, r.analytic, r.numeric
            )?;
        }
        Ok(())
    }
}

/// Gradient of `f` w.r.t. `inputs[which]` by central differences.
pub fn numerical_grad(
    f: &dyn Fn(&[Tensor]) -> Result<Real, TensorError>,
    inputs: &[Tensor],
    which: usize,
    step: Real,
) -> Result<Tensor, TensorError> {
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn projected<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    if out.shape().iter().product::<usize>() == 1 {
        return Ok(out.sum_all());
    }
    let w = out.tape().constant(projection(&out.shape(), seed));
    Ok(out.mul(w)?.sum_all())
}

/// Checks the tape gradient of `f` against central finite differences.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = projected(f(&tape, &vars)?, opts.seed)?;
    tape.backward(root)?;
    let kink_margin = tape.kink_margin();

    let scalar = |xs: &[Tensor]| -> Result<Real, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(projected(f(&tape, &vars)?, opts.seed)?.value().item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numerical_grad(&scalar, inputs, i, opts.step)?;
        let mut worst = InputReport {
            input: i,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            if err > worst.max_rel_error || j == 0 {
                worst = InputReport {
                    input: i,
                    max_rel_error: err,
                    worst_index: j,
                    analytic: a,
                    numeric: n,
                };
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
        kink_margin,
        resamples: 0,
    })
}

/// Like [`grad_check`], drawing inputs from `sample(attempt)` and resampling
/// while any ReLU/max kink lies closer than `opts.min_kink_margin`.
pub fn grad_check_sampled<F, S>(
    f: F,
    mut sample: S,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
    S: FnMut(u64) -> Vec<Tensor>,
{
    let mut last = None;
    for attempt in 0..=opts.max_resamples {
        let inputs = sample(opts.seed.wrapping_add(attempt as u64));
        let mut report = grad_check(&f, &inputs, opts)?;
        report.resamples = attempt;
        if report.kink_margin >= opts.min_kink_margin {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_grad_of_square() {
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        let f = |xs: &[Tensor]| Ok(xs[0].data().iter().map(|v| v * v).sum::<Real>());
        let g = numerical_grad(&f, &[x], 0, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu where the analytic gradient is fine but the input sits on the kink
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let report = grad_check(|_, v| Ok(v[0].relu()), &[x], &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.kink_margin, 0.0);
    }
}
