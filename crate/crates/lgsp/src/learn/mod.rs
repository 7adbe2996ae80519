//! Gradient machinery: the reverse-mode tape, SGD with momentum, the cosine
//! learning-rate schedule, and the finite-difference gradient checker.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use gradcheck::{check_param, GradCheckEntry, GradCheckReport, DEFAULT_STEP};
pub use optim::{cosine_lr, CosineSchedule, SgdMomentum};
pub use tape::{conv2d_forward, Gradients, Tape, Var};
