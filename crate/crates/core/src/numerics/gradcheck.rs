//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error across every checked coordinate.
    pub max_relative_error: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval<F>(params: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(params, &mut g)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients with `(f(θ+h) − f(θ−h)) / 2h` for every
/// coordinate of every parameter. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `loss_fn` builds a scalar loss on the supplied graph from the supplied
/// parameters. Parameter gradients are left holding the analytic values.
pub fn grad_check<F>(params: &mut ParamStore<f64>, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(params, &mut g)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, params);
    drop(g);

    let again = eval(params, &mut loss_fn)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }

    let mut report = GradCheckReport { max_relative_error: 0.0, per_param: Vec::new(), worst: None, coordinates: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).value.len();
        let mut worst_here = 0.0f64;
        for i in 0..n {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(params, &mut loss_fn);
            params.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(params, &mut loss_fn);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = params.get(id).grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            worst_here = worst_here.max(rel);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
            report.coordinates += 1;
        }
        report.per_param.push((params.get(id).name.clone(), worst_here));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_loss_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, 1e-5, |p, g| {
            let t = g.param(p, id)?;
            g.sum(t)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-10, "{report:?}");
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_loss() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, 1e-5, |p, g| {
            let t = g.param(p, id)?;
            let sq = g.mul(t, t)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
        assert!(report.max_relative_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut calls = 0.0;
        let err = grad_check(&mut store, 1e-5, |p, g| {
            calls += 1.0;
            let t = g.param(p, id)?;
            g.scale(t, calls)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
