//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward implementation it audits.

use crate::arch::Model;
use crate::tensor::{Graph, ParamStore, Var};
use crate::Result;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Anything that owns the `f64` parameters a loss closure reads.
pub trait HasParams {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
}

impl HasParams for ParamStore<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self
    }
}

impl HasParams for Model<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.params_mut()
    }
}

/// Compares the tape gradient of `loss` with central differences for every
/// element of every parameter in `store`.
pub fn check_params<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    check(store, h, loss)
}

/// [`check_params`] over a whole model.
pub fn check_model<F>(model: &mut Model<f64>, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&Model<f64>, &mut Graph<f64>) -> Result<Var>,
{
    check(model, h, loss)
}

fn check<S: HasParams, F>(state: &mut S, h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&S, &mut Graph<f64>) -> Result<Var>,
{
    state.store_mut().zero_grad();
    let mut g = Graph::new();
    let l = loss(state, &mut g)?;
    g.backward(l)?;
    g.export_param_grads(state.store_mut());

    let mut eval = |s: &S| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = state.store().ids().collect();
    for id in ids {
        let numel = state.store().get(id).value.numel();
        let name = state.store().get(id).name.clone();
        let mut check = ParamCheck { name, numel, max_rel_err: 0.0, max_abs_err: 0.0 };
        for j in 0..numel {
            let orig = state.store().get(id).value.data()[j];
            state.store_mut().get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(state)?;
            state.store_mut().get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(state)?;
            state.store_mut().get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = state.store().get(id).grad[j];
            check.max_rel_err = check.max_rel_err.max(rel_err(analytic, numeric));
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
