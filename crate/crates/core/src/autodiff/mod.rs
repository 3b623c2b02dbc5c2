//! Dense tensors with a reverse-mode tape.

mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
pub mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_gradcheck, gradcheck_inputs, gradcheck_params, relative_error, GradcheckOptions,
    GradcheckReport, ABS_FLOOR,
};
pub use params::{ParamEntry, ParamGroup, ParamStore};
pub use scalar::Scalar;
pub use tape::{softmax_row, ParamId, Tape, Var};
pub use tensor::Tensor;
