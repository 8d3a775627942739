//! Dense arrays, reverse-mode differentiation, seeded randomness, and
//! parameter containers.

mod array;
mod grad;
mod params;
mod rng;
mod tape;

pub use array::Array;
pub use grad::{eval_loss, grad_backprop, grad_fd, max_rel_error, Bindings, REL_ERR_FLOOR};
pub use params::{write_atomic, Gradients, Param, ParamSet, MANIFEST_FILE, PARAMS_FILE};
pub use rng::{gauss_sample, RngStream};
pub use tape::{Tape, TapeGrads, Var};

pub(crate) use tape::sigmoid;
