//! Central finite-difference gradient checking in double precision.

use ndarray::ArrayD;

use crate::graph::{Graph, Var};

/// Denominator floor for relative errors, so entries that are zero on both
/// sides compare absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of scalar input entries compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps`, over every entry of every input.
///
/// `f` must be a pure function of the input values.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    eps: f64,
    mut f: impl FnMut(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    let analytic: Vec<ArrayD<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&mut g, &vars);
        let mut grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| match grads.take(v) {
                Some(g) => g.as_standard_layout().into_owned(),
                None => ArrayD::zeros(x.raw_dim()),
            })
            .collect()
    };

    let mut eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).iter().copied().next().expect("scalar output")
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut values: Vec<ArrayD<f64>> = inputs.iter().map(|x| x.as_standard_layout().into_owned()).collect();
    for (which, grad) in analytic.iter().enumerate() {
        for flat in 0..values[which].len() {
            let original = values[which].as_slice().expect("standard layout")[flat];
            values[which].as_slice_mut().unwrap()[flat] = original + eps;
            let plus = eval(&values);
            values[which].as_slice_mut().unwrap()[flat] = original - eps;
            let minus = eval(&values);
            values[which].as_slice_mut().unwrap()[flat] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice().expect("standard layout")[flat];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
