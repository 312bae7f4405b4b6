//! Dense numeric kernels with forward and backward rules, the tape that
//! records them, and a finite-difference gradient checker. Everything above
//! this module is composed from these pieces.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_model, GradCheckReport};
pub use kernels::{ActKind, BnLayout, BnStats, Mode, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use tape::{Tape, ValId};
pub use tensor::{Scalar, Tensor};
