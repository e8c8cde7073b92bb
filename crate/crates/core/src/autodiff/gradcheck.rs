//! Central finite-difference gradient checks.
//!
//! Each coordinate is perturbed by `±h` and the analytic gradient compared
//! with `(f(x+h) - f(x-h)) / 2h`. Coordinates where the function is visibly
//! non-smooth (a ReLU or max-pool switch falls inside `[x-h, x+h]`) are
//! detected by comparing the two one-sided differences; they are counted and
//! excluded from the error statistic only when the analytic value matches the
//! one-sided derivative on the smooth side.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub nonsmooth: usize,
    pub max_rel_err: f64,
    /// Parameter (or input) name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.nonsmooth * 100 <= self.checked
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.nonsmooth += other.nonsmooth;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, REL_FLOOR)
}

fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

struct Probe {
    f0: f64,
    h: f64,
}

impl Probe {
    fn compare(&self, name: &str, i: usize, analytic: f64, fp: f64, fm: f64) -> GradCheckReport {
        let central = (fp - fm) / (2.0 * self.h);
        // Round-off in the difference quotient grows like |f| / h; gradients
        // below that level are compared absolutely.
        let floor = REL_FLOOR.max(1e-10 * self.f0.abs() / self.h);
        let mut err = rel_err_floor(analytic, central, floor);
        let mut nonsmooth = 0;
        if err > 1e-6 {
            let fwd = (fp - self.f0) / self.h;
            let bwd = (self.f0 - fm) / self.h;
            let kink = rel_err(fwd, bwd) > 1e-2;
            if kink && (rel_err(analytic, fwd) < 1e-3 || rel_err(analytic, bwd) < 1e-3) {
                nonsmooth = 1;
                err = 0.0;
            }
        }
        GradCheckReport {
            checked: 1,
            nonsmooth,
            max_rel_err: err,
            worst: Some((name.to_string(), i)),
        }
    }
}

fn eval_params<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    Ok(tape.value(loss).data()[0])
}

/// Checks gradients of every trainable parameter (or those in `only`).
/// `stride > 1` checks every `stride`-th coordinate of each tensor.
pub fn check_params<F>(
    store: &ParamStore,
    only: Option<&[&str]>,
    h: f64,
    stride: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let f0 = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let probe = Probe { f0, h };
    let names: Vec<String> = store
        .iter()
        .filter(|(n, p)| p.trainable && only.is_none_or(|o| o.contains(&n.as_str())))
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for name in names {
        let len = store.value(&name)?.len();
        let analytic: Vec<f64> = match grads.param(&name) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; len],
        };
        for i in (0..len).step_by(stride.max(1)) {
            let orig = store.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + h;
            let fp = eval_params(&work, &build)?;
            work.value_mut(&name)?.data_mut()[i] = orig - h;
            let fm = eval_params(&work, &build)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            report.merge(probe.compare(&name, i, analytic[i], fp, fm));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let f0 = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let probe = Probe { f0, h };
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; inputs[k].len()],
        };
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.merge(probe.compare(&alloc::format!("input{k}"), i, analytic[i], fp, fm));
        }
    }
    Ok(report)
}
