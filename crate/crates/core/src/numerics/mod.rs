//! Dense fp64 tensors, tape-based reverse-mode autodiff and Adam.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_into};

/// Row softmax on plain slices, for callers off the tape.
pub fn softmax(row: &[f64]) -> crate::Result<Vec<f64>> {
    if row.is_empty() {
        return Err(crate::Error::shape("softmax of an empty row"));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::Numeric("softmax input contains NaN/Inf".into()));
    }
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, &mut out);
    Ok(out)
}
