//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the loss as a black box; it shares no code
//! with the tape's backward pass, so agreement is meaningful evidence.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Central differences: df/dp ~= (f(p+h) - f(p-h)) / 2h, elementwise.
pub fn central_diff_grads<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    mut loss: F,
    h: f64,
) -> Result<Vec<(ParamId, Tensor<f64>)>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut fd = Tensor::zeros(store.value(id).shape().to_vec());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            fd.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push((id, fd));
    }
    Ok(out)
}

/// Compare analytic gradients already present in the store against the
/// finite-difference estimates; relative error with an absolute floor.
pub fn compare_grads(
    store: &ParamStore<f64>,
    fd: &[(ParamId, Tensor<f64>)],
    abs_floor: f64,
) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut worst_idx = 0;
    let mut n = 0;
    for (id, fd_grad) in fd {
        let zero = Tensor::zeros(fd_grad.shape().to_vec());
        let analytic = store.grad(*id).unwrap_or(&zero);
        for i in 0..fd_grad.numel() {
            let a = analytic.data()[i];
            let b = fd_grad.data()[i];
            let denom = a.abs().max(b.abs()).max(abs_floor);
            let rel = (a - b).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = store.name(*id).to_string();
                worst_idx = i;
            }
            n += 1;
        }
    }
    GradCheckReport {
        n_checked: n,
        max_rel_err: max_rel,
        worst_param: worst,
        worst_index: worst_idx,
    }
}
