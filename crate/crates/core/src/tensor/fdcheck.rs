//! Central finite-difference gradient verification.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare the tape gradient of `f()` with central finite differences taken
/// coordinate by coordinate in `x`, returning the maximum relative error
/// `|analytic - fd| / max(|analytic|, |fd|, 1)`.
///
/// `f` must be deterministic, return a scalar, and read the current contents
/// of `x` on every call (it is re-evaluated with perturbed coordinates).
/// `x` must be a tape leaf.
pub fn finite_diff_check<F>(f: &mut F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    if !x.requires_grad() || !x.is_leaf() {
        return Err(Error::Usage(
            "finite_diff_check needs a leaf tensor with requires_grad".into(),
        ));
    }
    x.zero_grad();
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "finite_diff_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = x
        .grad()
        .expect("gradient buffer present after zero_grad + backward");

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f()?.item();
        x.data_mut()[i] = orig - eps;
        let minus = f()?.item();
        x.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
