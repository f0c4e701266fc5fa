//! Differentiation tape, optimizer, gradient checking and sequence fitting.

mod adam;
pub(crate) mod fit;
mod gradcheck;
mod tape;

pub use adam::{Adam, FIT_LR, TRAIN_LR};
pub use fit::{evaluate_pose, fit_sequence, initialize_pose, FitConfig, FitResult};
pub use gradcheck::{check_gradient, GradCheckReport, MAX_COORDINATE_PROBES};
pub use tape::{rodrigues, rodrigues_with_jacobian, sigmoid, smooth_l1, CustomOp, Gradients, Tape, Var};

use crate::error::Result;

/// Value and gradient of a scalar program over a flat parameter vector.
pub fn grad<F>(params: &[f64], program: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = tape.param(params.to_vec(), params.len(), 1);
    let out = program(&tape, p)?;
    let g = tape.backward(out)?;
    Ok((out.item(), g.wrt(p)))
}
