//! Central finite-difference gradient checks.
//!
//! Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-2)`;
//! the floor keeps round-off on near-zero gradients from reading as failures.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Standard-normal tensor.
pub fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Checks gradients of a scalar function of input leaves. Returns the max relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars).expect("forward");
        g.scalar(root)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars).expect("forward");
    let grads = g.backward(root).expect("backward");

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&probe);
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&probe);
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Result of a parameter gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Checks gradients of `loss(store)` with respect to every entry of the selected
/// parameters (all parameters when `only` is `None`).
pub fn check_params<F>(store: &ParamStore, only: Option<&[ParamId]>, loss: F) -> ParamCheck
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss(store, &mut g).expect("forward");
    let grads = g.backward(root).expect("backward").into_params();

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let r = loss(s, &mut g).expect("forward");
        g.scalar(r)
    };

    let mut out = ParamCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in ids {
        let n = store.get(id).len();
        for i in 0..n {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&probe);
            probe.get_mut(id).data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&probe);
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let e = rel_err(analytic, numeric);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = store.name(id).to_string();
            }
            out.checked += 1;
        }
    }
    out
}
