//! Central finite-difference gradient checks in double precision.

use crate::Tensor;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `f` with central differences,
/// perturbing every element of every input by `±step`.
///
/// `f` receives fresh leaf tensors that require gradients.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], step: f64, floor: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad_()).collect();
    let out = f(&leaves);
    assert_eq!(out.numel(), 1, "gradient check needs a scalar output");
    let grads = out.backward();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let zero = vec![0.0; leaf.numel()];
        let analytic = grads.get(leaf).unwrap_or(&zero).to_vec();
        for j in 0..leaf.numel() {
            let eval = |delta: f64| {
                let args: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == i {
                            let mut d = t.to_vec();
                            d[j] += delta;
                            Tensor::from_vec(d, t.shape())
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                f(&args).item()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[j];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.checked += 1;
        }
    }
    report
}
