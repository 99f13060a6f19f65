//! Central finite-difference validation of the reverse-mode gradients,
//! over the full loss path (encoder, scoring heads, binary cross-entropy).

use crate::data::Turn;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{turn_loss_backward, turn_loss_value};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        // Central differences carry an absolute noise floor around
        // eps*|loss|/h (~1e-11 here), so relative error is meaningless
        // for near-zero gradients; bound the difference absolutely and
        // report it on the same <= 1e-4 scale.
        (analytic - numeric).abs() / 1e-6
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare reverse-mode gradients of the turn loss against central finite
/// differences with step `h`, across every trainable parameter entry.
pub fn gradient_check(model: &mut Model, turn: &Turn, h: f64) -> Result<GradCheckReport> {
    let (_, grads) = turn_loss_backward(model, turn)?;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;

    for id in model.store.trainable_ids() {
        let zero = Tensor::zeros(model.store.get(id).shape().to_vec());
        let numel = zero.numel();
        for i in 0..numel {
            let original = model.store.get(id).data()[i];

            model.store.get_mut(id).data_mut()[i] = original + h;
            let plus = turn_loss_value(model, turn)?;
            model.store.get_mut(id).data_mut()[i] = original - h;
            let minus = turn_loss_value(model, turn)?;
            model.store.get_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = rel_error(analytic, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", model.store.name(id), i);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst_param: worst, entries_checked: checked })
}
