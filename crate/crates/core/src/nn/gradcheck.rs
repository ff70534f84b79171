use super::{forward, NetworkSpec, NnError, ParamVector, Tensor};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function of a flat vector.
pub fn finite_diff_grad(point: &[f64], mut f: impl FnMut(&[f64]) -> f64, step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Finite-difference gradient of `loss(forward(spec, params, input))` with
/// respect to the parameters, in double precision.
pub fn network_finite_diff_grad(
    spec: &NetworkSpec,
    params: &ParamVector<f64>,
    input: &Tensor<f64>,
    loss: impl Fn(&Tensor<f64>) -> f64,
    step: f64,
) -> Result<Vec<f64>, NnError> {
    // surface shape errors once instead of inside the closure
    forward(spec, params, input)?;
    Ok(finite_diff_grad(
        params,
        |p| {
            let out = forward(spec, &ParamVector(p.to_vec()), input).expect("validated above");
            loss(&out)
        },
        step,
    ))
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|y| y * y).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Entry-wise relative error `|a - b| / max(|a|, |b|, floor)`, maximised.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(&[1.0, 0.0, 0.0], |p| p.iter().map(|v| v * v).sum(), DEFAULT_FD_STEP);
        assert!((g[0] - 2.0).abs() <= 1e-8);
        assert!(g[1].abs() <= 1e-8 && g[2].abs() <= 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let e = relative_error(&[1.0, 0.0], &[1.0, 1e-3]);
        assert!((e - 1e-3 / (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(&[0.3, -2.0], |_| 0.0, DEFAULT_FD_STEP);
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
