//! Central-difference verification of the reverse-mode engine. Always runs
//! at 64-bit; finite differences are the oracle here, never the engine.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Max over all input elements of `|analytic − central| / max(1, |central|)`
/// for the scalar program `f` evaluated on `inputs`.
///
/// `f` must map the leaf vars (one per input, in order) to a scalar loss.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients from one recorded pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.check_finite()?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let x = t.data()[ei];
            probe[ti] = t.with_element(ei, x + eps);
            let lp = eval(&probe)?;
            probe[ti] = t.with_element(ei, x - eps);
            let lm = eval(&probe)?;
            probe[ti] = t.clone();
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// One named entry of the gradient-fidelity suite.
pub struct GradCheckCase {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

impl GradCheckCase {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<f64> + 'static) -> Self {
        GradCheckCase { name: name.into(), run: Box::new(run) }
    }
}

pub struct GradCheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Run every case, collecting per-module worst errors against the pinned
/// tolerance.
pub fn run_suite(cases: &[GradCheckCase]) -> Result<Vec<GradCheckOutcome>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let err = (case.run)()?;
        out.push(GradCheckOutcome {
            name: case.name.clone(),
            max_rel_err: err,
            passed: err < GRAD_TOLERANCE,
        });
    }
    Ok(out)
}
