//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare the reverse-mode gradient of the scalar returned by `build` with
/// central differences `(L(θ+h) − L(θ−h)) / 2h`, element by element, for every
/// entry of `params`.
///
/// `build` receives a fresh graph with each parameter bound as a trainable
/// leaf and must return the loss node.
pub fn check_gradients<T, F>(params: &ParamStore<T>, build: F, step: T, tol: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &BTreeMap<String, Var>) -> Result<Var>,
{
    if params.is_empty() {
        return Ok(GradReport::default());
    }
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new();
        let vars = store.bind_trainable(&mut g);
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars = params.bind_trainable(&mut g);
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let two_h = (step + step).to_f64_exact();
    let mut report = GradReport::default();
    let mut work = params.clone();
    for (name, value) in params.iter() {
        let analytic = grads.get(name).expect("every bound parameter has a gradient");
        let mut worst = 0.0f64;
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&work)?.to_f64_exact();
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&work)?.to_f64_exact();
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / two_h;
            worst = worst.max(relative_error(analytic.data()[i].to_f64_exact(), numeric));
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
            passed: worst <= tol,
        });
    }
    Ok(report)
}
