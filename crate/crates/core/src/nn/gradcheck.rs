//! Central-difference gradient oracle.

use rand::seq::index::sample;

use super::Module;
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let mut x = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x)?;
        x.data_mut()[i] = orig - h;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (h + h);
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    relative_error_slices(a.data(), b.data())
}

pub fn relative_error_slices<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `(parameter name, relative error over its checked coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    /// Relative error over every checked coordinate of every parameter.
    pub fn overall(&self) -> f64 {
        relative_error_slices(&self.analytic, &self.numeric)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares the gradients already accumulated in `module` against central
/// differences of `loss`, on at most `max_per_param` sampled coordinates of
/// each parameter.
pub fn check_module<T: Scalar, M: Module<T>>(
    module: &mut M,
    mut loss: impl FnMut(&mut M) -> Result<T>,
    h: T,
    max_per_param: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut targets: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    module.visit_params("", &mut |name, p| {
        let picks: Vec<usize> = if p.len() <= max_per_param {
            (0..p.len()).collect()
        } else {
            let mut v = sample(rng, p.len(), max_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let grads = picks.iter().map(|&i| p.grad.data()[i]).collect();
        targets.push((name.to_string(), picks, grads));
    });

    let mut report = GradCheckReport::default();
    for (name, picks, grads) in targets {
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let mut eval_at = |delta: T, m: &mut M| -> Result<T> {
                m.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let v = loss(m);
                m.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] -= delta;
                    }
                });
                v
            };
            let up = eval_at(h, module)?;
            let down = eval_at(-h, module)?;
            numeric.push((up - down) / (h + h));
        }
        report.per_param.push((name, relative_error_slices(&grads, &numeric)));
        report.analytic.extend(grads.iter().map(|v| v.as_f64()));
        report.numeric.extend(numeric.iter().map(|v| v.as_f64()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three_is_six() {
        let x = Tensor::full(&[1], 3.0f64);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_edge_cases() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(relative_error(&z, &z), 0.0);
        let a = Tensor::full(&[3], 1.0);
        assert_eq!(relative_error(&a, &z), 1.0);
    }
}
