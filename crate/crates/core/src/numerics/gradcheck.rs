//! Central-difference gradient checking.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// differences at `point`. Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>>,
{
    grad_check_multi(|g, xs| f(g, xs[0]), std::slice::from_ref(point), step, None)
}

/// Multi-input form of [`grad_check`]. With `max_coords` set, only an evenly
/// spaced subset of at most that many coordinates per input is perturbed.
pub fn grad_check_multi<T, F>(
    f: F,
    points: &[Tensor<T>],
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let vars = inputs.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
        Ok(f(&g, &vars)?.item()?.to_f64_lossy())
    };

    let analytic: Vec<Vec<T>> = {
        let g = Graph::new();
        let vars = points
            .iter()
            .map(|p| g.leaf(&p.clone().requires_grad(true)))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&g, &vars)?;
        if out.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
        }
        let grads = g.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(&v, p)| grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.len()]))
            .collect()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = points.to_vec();
    for (which, point) in points.iter().enumerate() {
        let n = point.len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let x0 = point.data()[i].to_f64_lossy();
            work[which].data_mut()[i] = T::from_f64_lossy(x0 + step);
            let plus = eval(&work)?;
            work[which].data_mut()[i] = T::from_f64_lossy(x0 - step);
            let minus = eval(&work)?;
            work[which].data_mut()[i] = point.data()[i];
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which][i].to_f64_lossy();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::<f64>::new(vec![3, 3], vec![2., 1., 0., 1., 3., 1., 0., 1., 4.]).unwrap();
        let x = Tensor::<f64>::new(vec![3, 1], vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check_multi(
            |_, v| {
                // xᵀ A x via (A x) ⊙ x
                let ax = v[1].matmul(v[0])?;
                ax.mul(v[0])?.sum()
            },
            &[x, a],
            1e-4,
            None,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
