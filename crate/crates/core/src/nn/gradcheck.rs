//! Central finite-difference gradient checking.

use super::params::Parameterized;
use super::tensor::Tensor2;

/// Finite-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient is
/// essentially zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst relative error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` for every entry
/// of every parameter of `model`. The model is restored before returning.
pub fn check_model<M, F>(model: &mut M, analytic: &M, mut loss: F) -> GradCheck
where
    M: Parameterized,
    F: FnMut(&M) -> f64,
{
    let shapes: Vec<(String, usize)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic
        .params()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    assert_eq!(shapes.len(), grads.len(), "model/gradient layout differ");

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, (name, len)) in shapes.iter().enumerate() {
        for e in 0..*len {
            let orig = nudge(model, pi, e, None);
            nudge(model, pi, e, Some(orig + FD_STEP));
            let plus = loss(model);
            nudge(model, pi, e, Some(orig - FD_STEP));
            let minus = loss(model);
            nudge(model, pi, e, Some(orig));

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grads[pi][e];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), e));
            }
            report.checked += 1;
        }
    }
    report
}

/// Reads entry `e` of parameter `pi`, optionally overwriting it.
fn nudge<M: Parameterized>(model: &mut M, pi: usize, e: usize, value: Option<f64>) -> f64 {
    let mut params = model.params_mut();
    let slot = &mut params[pi].1.data_mut()[e];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Slice form of [`check_model`] for free-standing operations.
pub fn check_gradients<F>(params: &mut [Tensor2], analytic: &[Tensor2], mut loss: F) -> GradCheck
where
    F: FnMut(&[Tensor2]) -> f64,
{
    let mut owned: Vec<Tensor2> = params.to_vec();
    let analytic: Vec<Tensor2> = analytic.to_vec();
    let report = check_model(&mut owned, &analytic, |m| loss(m));
    params.clone_from_slice(&owned);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor2::from_vec(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let x = [1.5, -0.5, 0.25];
        let grad = Tensor2::row_vector(&x);
        let report = check_gradients(&mut [w], &[grad], |p| {
            p[0].data().iter().zip(&x).map(|(a, b)| a * b).sum()
        });
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let w = Tensor2::from_vec(1, 2, vec![0.7, -0.4]).unwrap();
        // d/dw Σ w² = 2w; corrupt one entry
        let bad = Tensor2::row_vector(&[1.4, -0.4]);
        let report = check_gradients(&mut [w], &[bad], |p| p[0].sum_squares());
        assert!(report.max_rel_error > 1e-2);
        assert_eq!(report.worst, Some(("p0".to_string(), 1)));
    }
}
