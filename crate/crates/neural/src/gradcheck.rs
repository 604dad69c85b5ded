//! Central finite-difference gradient checks.

use rand::Rng;

use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub trials: usize,
    pub worst: String,
}

/// Relative error with a floor on the denominator, so coordinates whose
/// true derivative is zero are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients against central differences at `trials` random
/// coordinates drawn from the parameters and the extra `inputs`.
///
/// `f` must build a deterministic scalar loss; it is re-run for every probe.
pub fn check<R, F>(
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    mut f: F,
    step: f64,
    floor: f64,
    trials: usize,
    rng: &mut R,
) -> GradReport
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, &ParamVars, &[Var]) -> Var,
{
    let run = |store: &ParamStore, inputs: &[Tensor], f: &mut F, grads: bool| {
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &pv, &xs);
        let value = tape.value(loss).item();
        let g = grads.then(|| {
            let g = tape.backward(loss);
            let mut out: Vec<Tensor> = store
                .params()
                .iter()
                .zip(pv.vars())
                .map(|(p, v)| g.get_or_zeros(*v, &p.tensor))
                .collect();
            out.extend(inputs.iter().zip(&xs).map(|(t, v)| g.get_or_zeros(*v, t)));
            out
        });
        (value, g)
    };
    let (_, analytic) = run(store, inputs, &mut f, true);
    let analytic = analytic.unwrap();
    let sizes: Vec<usize> = analytic.iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradReport {
        max_rel_err: 0.0,
        trials,
        worst: String::new(),
    };
    if total == 0 {
        return report;
    }
    let np = store.len();
    for _ in 0..trials {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let nudge = |store: &mut ParamStore, inputs: &mut [Tensor], delta: f64| {
            if which < np {
                store.params_mut()[which].tensor.data_mut()[flat] += delta;
            } else {
                inputs[which - np].data_mut()[flat] += delta;
            }
        };
        nudge(store, inputs, step);
        let (up, _) = run(store, inputs, &mut f, false);
        nudge(store, inputs, -2.0 * step);
        let (down, _) = run(store, inputs, &mut f, false);
        nudge(store, inputs, step);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[which].data()[flat];
        let e = rel_err(a, numeric, floor);
        if e > report.max_rel_err || report.worst.is_empty() {
            let label = if which < np {
                store.params()[which].name.clone()
            } else {
                format!("input{}", which - np)
            };
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{label}[{flat}] analytic {a:.6e} numeric {numeric:.6e}");
        }
    }
    report
}
