//! Central finite differences, the independent oracle for analytic gradients.

use ndarray::ArrayD;

/// Numeric gradient of `f` w.r.t. every element of every input, by central
/// differences: `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn numeric_grads(
    f: impl Fn(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    eps: f64,
) -> Vec<ArrayD<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrayD::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
            let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
            *plus[i].as_slice_mut().unwrap().get_mut(idx).unwrap() += eps;
            *minus[i].as_slice_mut().unwrap().get_mut(idx).unwrap() -= eps;
            let d = (f(&plus) - f(&minus)) / (2.0 * eps);
            *g.as_slice_mut().unwrap().get_mut(idx).unwrap() = d;
        }
        grads.push(g);
    }
    grads
}

/// Worst element-wise relative error between analytic and numeric gradients.
/// The denominator is floored so that near-zero pairs compare absolutely.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-5);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
