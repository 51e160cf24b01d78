//! Central finite-difference checks of reverse-mode gradients.

use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{MrtError, Result};
use crate::nn::{Ctx, ParamStore};

/// Outcome of a gradient check.
///
/// The error of one coordinate is `|analytic - numeric| / max(1, |numeric|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Where the maximum occurred: parameter (or `"input"`) and flat offset.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn record(&mut self, name: &str, offset: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.coords_checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), offset));
        }
    }

    fn empty(tol: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
            tol,
        }
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(MrtError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks `f: Tensor -> scalar` at `point`.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let analytic = g.backward(y)?.get_or_zeros(x, point.shape());

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };

    let mut report = GradCheck::empty(tol);
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        report.record("input", i, analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Checks the gradient of `loss` with respect to every scalar in `store`.
///
/// `loss` builds the scalar on a fresh [`Ctx`]; it must be deterministic
/// (no dropout) for the comparison to mean anything.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut cx = Ctx::new(store, true);
    let y = loss(&mut cx)?;
    scalar_of(&cx.g, y)?;
    let grads = cx.g.backward(y)?;
    let analytic = cx.param_grads(&grads, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut cx = Ctx::new(s, false);
        let y = loss(&mut cx)?;
        scalar_of(&cx.g, y)
    };

    let mut probe = store.clone();
    let mut report = GradCheck::empty(tol);
    for (pid, name) in store.ids().zip(store.names()) {
        for i in 0..store.get(pid).len() {
            let orig = probe.get(pid).data()[i];
            probe.get_mut(pid).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(pid).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(pid).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(name, i, analytic[pid.index()].data()[i], numeric);
        }
    }
    Ok(report)
}
