//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::{ParamStore, Tape, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `loss` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every parameter entry.
/// `floor` keeps near-zero gradients from inflating the relative error.
pub fn check_gradients<F>(store: &ParamStore, h: f64, floor: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(s, &mut tape)?;
        let t = tape.value(v);
        if t.shape() != (1, 1) {
            return Err(Error::dim(format!("loss must be 1x1, got {:?}", t.shape())));
        }
        Ok(t.get(0, 0))
    };
    let mut tape = Tape::new();
    let v = loss(store, &mut tape)?;
    let grads = tape.backward(v)?;

    let mut probe = store.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        let analytic = grads.get_or_zero(store, id);
        for k in 0..analytic.data().len() {
            let x = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = x + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check of {} produced {rel}",
                    store.name(id)
                )));
            }
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(rel);
                if rel >= out.max_rel_err {
                    out.worst = Some((store.name(id).to_string(), k));
                }
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
