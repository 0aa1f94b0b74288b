//! Central finite-difference checks of tape gradients.

use super::{Bound, ParamStore, Tape, Var};
use crate::error::{invalid, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Largest relative error between the tape gradient of a scalar function of
/// `store` and its central finite-difference estimate, over every parameter
/// entry. Gradients smaller than `1e-6` in magnitude are compared absolutely.
pub fn max_rel_error<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: for<'t, 'p> Fn(&Bound<'t, 'p>) -> Result<Var<'t>>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let p = tape.bind(s, false);
        let y = f(&p)?;
        if y.value().len() != 1 {
            return Err(invalid!("gradient check needs a scalar output"));
        }
        Ok(y.scalar())
    };

    let mut analytic = store.deep_copy();
    {
        let tape = Tape::new();
        let p = tape.bind(store, true);
        let y = f(&p)?;
        let grads = tape.backward(y);
        grads.accumulate_into(p.slot(), &mut analytic)?;
    }

    let mut probe = store.deep_copy();
    let names: Vec<String> = store.names().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let g = analytic.grad(&name)?.to_vec();
        for (i, &an) in g.iter().enumerate() {
            let orig = probe.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
