//! Central-difference verification of autodiff gradients (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Five-point stencil `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12ε`, whose
    /// truncation error is O(ε⁴) instead of O(ε²).
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            floor: 1e-2,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

/// Mixed relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let out = f(&mut g, store)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad check objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the autodiff gradient of the scalar `f` with respect to every
/// trainable coordinate of `store` against `(f(θ+ε) − f(θ−ε)) / 2ε`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::Numeric("grad check objective is not finite".into()));
    }
    let grads = g.backward(out)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, t) in grads.param_grads() {
        analytic[id.index()] = Some(t.into_data());
    }
    drop(g);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates: 0,
        passed: true,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).tensor.len();
        for i in 0..n {
            let orig = store.get(id).tensor.data()[i];
            let mut at = |k: f64| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[i] = orig + k * opts.eps;
                let v = eval(&f, store);
                store.get_mut(id).tensor.data_mut()[i] = orig;
                v
            };
            let numeric = if opts.five_point {
                (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * opts.eps)
            } else {
                (at(1.0)? - at(-1.0)?) / (2.0 * opts.eps)
            };
            let auto = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let abs = (auto - numeric).abs();
            let rel = rel_err(auto, numeric, opts.floor);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.mul(xv, xv).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[6.0]);

        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                g.mul(xv, xv)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_abs_err < 1e-8);
    }

    #[test]
    fn five_point_is_exact_on_a_quartic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::scalar(1.5)).unwrap();
        let quartic = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.param(s, x);
            let x2 = g.mul(xv, xv)?;
            g.mul(x2, x2)
        };
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..GradCheckOptions::default()
        };
        let three = grad_check(&mut store, quartic, opts).unwrap();
        let five = grad_check(&mut store, quartic, GradCheckOptions { five_point: true, ..opts }).unwrap();
        assert!(three.max_abs_err > 1e-4);
        assert!(five.max_abs_err < 1e-9, "{five:?}");
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let report = grad_check(
            &mut store,
            move |g, s| {
                let _ = g.param(s, x);
                Ok(g.constant(Tensor::scalar(4.0)))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_abs_err, 0.0);
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::scalar(0.0)).unwrap();
        let err = grad_check(
            &mut store,
            move |g, s| {
                let xv = g.param(s, x);
                g.recip(xv)
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
