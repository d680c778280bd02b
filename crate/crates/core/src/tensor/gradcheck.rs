use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Precision, Result, Tape, Tensor, TensorError, Var};

/// Settings of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Magnitude below which errors are measured absolutely rather than relatively.
    pub floor: f64,
    /// Check at most this many entries per input (chosen by seeded sampling,
    /// always including the largest analytic entry). `None` checks all.
    pub max_entries: Option<usize>,
    /// When set, an entry whose forward and backward one-sided differences
    /// disagree (the probe may straddle a kink) is re-probed with the step
    /// divided by ten while the disagreement does not shrink with the step,
    /// down to this floor.
    pub min_eps: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self::double()
    }
}

impl GradCheckOptions {
    pub fn double() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
            min_eps: None,
            seed: 0,
            precision: Precision::Double,
        }
    }

    pub fn single() -> Self {
        Self {
            eps: 1e-2,
            tol: 1e-2,
            floor: 1e-1,
            max_entries: None,
            min_eps: None,
            seed: 0,
            precision: Precision::Single,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_min_eps(mut self, min_eps: f64) -> Self {
        self.min_eps = Some(min_eps);
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval_scalar<F>(f: &F, values: &[Tensor], precision: Precision) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new(precision);
    let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
    let out = f(&tape, &vars)?.value();
    if out.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "checked program must return a scalar, got {:?}",
            out.shape()
        )));
    }
    Ok(out.data()[0])
}

/// Compares reverse-mode gradients of `f` at `inputs` with central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// mismatch is reported as a contract error.
pub fn grad_check<F>(
    inputs: &[(String, Tensor)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::Contract(format!(
            "finite-difference step must be positive, got {}",
            opts.eps
        )));
    }
    let values: Vec<Tensor> = inputs
        .iter()
        .map(|(_, t)| t.rounded(opts.precision))
        .collect();

    let analytic: Vec<Tensor> = {
        let tape = Tape::new(opts.precision);
        let leaves: Vec<Var<'_>> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves.iter().map(|&l| grads.get(l)).collect()
    };

    let base = eval_scalar(&f, &values, opts.precision)?;
    let again = eval_scalar(&f, &values, opts.precision)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Contract(format!(
            "program under check is not deterministic ({base} vs {again})"
        )));
    }

    let unit = match opts.precision {
        Precision::Single => f64::from(f32::EPSILON),
        Precision::Double => f64::EPSILON,
    };
    // rough rounding error of a central difference at step h
    let noise = |h: f64| 4.0 * unit * base.abs().max(1.0) / h;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (slot, ((name, _), grad)) in inputs.iter().zip(&analytic).enumerate() {
        let total = grad.numel();
        let indices: Vec<usize> = match opts.max_entries {
            Some(cap) if cap < total => {
                let argmax = grad
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let mut idx: Vec<usize> = sample(&mut rng, total, cap.max(1)).into_vec();
                if !idx.contains(&argmax) {
                    idx[0] = argmax;
                }
                idx.sort_unstable();
                idx
            }
            _ => (0..total).collect(),
        };

        let mut report = InputReport {
            name: name.clone(),
            checked: indices.len(),
            total,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let probe = |delta: f64| -> Result<f64> {
                let mut perturbed = values.clone();
                let mut data = perturbed[slot].to_vec();
                data[i] += delta;
                perturbed[slot] = Tensor::from_parts(values[slot].shape().to_vec(), data);
                eval_scalar(&f, &perturbed, opts.precision)
            };
            let close = |a: f64, b: f64| (a - b).abs() <= opts.tol * a.abs().max(b.abs()).max(opts.floor);
            let mut h = opts.eps;
            let (mut up, mut down) = (probe(h)?, probe(-h)?);
            if let Some(min) = opts.min_eps {
                // One-sided slopes disagree by about h·f'' under curvature but
                // by the full slope jump when the probe straddles a kink. Shrink
                // while the gap does not fall with the step, or until rounding
                // noise would outgrow the tolerance.
                while !close((up - base) / h, (base - down) / h)
                    && h / 10.0 >= min * (1.0 - 1e-9)
                    && noise(h / 10.0) < opts.tol * ((up - down) / (2.0 * h)).abs().max(opts.floor)
                {
                    let fine = h / 10.0;
                    let (u, d) = (probe(fine)?, probe(-fine)?);
                    let gap = (up + down - 2.0 * base) / h;
                    let fine_gap = (u + d - 2.0 * base) / fine;
                    if fine_gap.abs() <= 0.2 * gap.abs() && close((u - d) / (2.0 * fine), (up - down) / (2.0 * h)) {
                        // smooth here: the coarser step has less rounding
                        break;
                    }
                    (h, up, down) = (fine, u, d);
                }
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > report.max_rel_err || i == indices[0] {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tol,
        max_rel_err,
        tol: opts.tol,
        inputs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("x".into(), t)]
    }

    #[test]
    fn square_at_three() {
        let report = grad_check(
            &named(Tensor::scalar(3.0)),
            |_, v| Ok(v[0].square().sum()),
            &GradCheckOptions::double(),
        )
        .unwrap();
        let r = &report.inputs[0];
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!((r.numeric - 6.0).abs() < 1e-9);
        assert!(report.passed);
    }

    #[test]
    fn sign_flipped_backward_is_detected() {
        let x = Tensor::from_fn([5], |i| 0.5 + i as f64);
        let report = grad_check(
            &named(x),
            |_, v| Ok(v[0].square().grad_sign_flip().sum()),
            &GradCheckOptions::double(),
        )
        .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 2.0).abs() < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn non_deterministic_program_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let err = grad_check(
            &named(Tensor::scalar(1.0)),
            |_, v| {
                calls.set(calls.get() + 1);
                Ok(v[0].scale(calls.get() as f64).sum())
            },
            &GradCheckOptions::double(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let err = grad_check(
            &named(Tensor::zeros([3])),
            |_, v| Ok(v[0].scale(2.0)),
            &GradCheckOptions::double(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn sampling_includes_largest_entry() {
        let x = Tensor::from_fn([50], |i| if i == 37 { 10.0 } else { 0.01 * i as f64 });
        let opts = GradCheckOptions::double().with_max_entries(3);
        let report = grad_check(&named(x), |_, v| Ok(v[0].square().sum()), &opts).unwrap();
        assert_eq!(report.inputs[0].checked, 3);
        assert!(report.passed);
    }

    #[test]
    fn refinement_steps_inside_a_kink() {
        // relu kink 3e-6 away from the probe point: a 1e-5 step straddles it
        fn f<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            Ok(v[0].add_scalar(-1.0).relu().scale(2.0).sum())
        }
        fn flipped<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            Ok(v[0].add_scalar(-1.0).relu().grad_sign_flip().sum())
        }
        let x = named(Tensor::scalar(1.0 + 3e-6));
        let plain = grad_check(&x, f, &GradCheckOptions::double()).unwrap();
        assert!(!plain.passed);
        let refined = grad_check(&x, f, &GradCheckOptions::double().with_min_eps(1e-7)).unwrap();
        assert!(refined.passed, "{:?}", refined.worst());
        assert!((refined.inputs[0].numeric - 2.0).abs() < 1e-6);

        let r = grad_check(&x, flipped, &GradCheckOptions::double().with_min_eps(1e-7)).unwrap();
        assert!(!r.passed);
    }
}
