//! Early-anticipation training on per-frame feature sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`diff`]: dense `f64` matrices and a reverse-mode tape.
//! - [`data`]: clip annotations, feature sequences, a synthetic generator,
//!   and the on-disk formats.
//! - [`model`]: soft attention over local features, QRNN/LSTM recurrence,
//!   and a sigmoid risk head.
//! - [`loss`]: EL, LEA and AdaLEA penalty schedules and clip losses.
//! - [`eval`]: threshold sweeps, average precision and average
//!   time-to-collision.
//! - [`train`]: the training loop with validated-ATTC feedback,
//!   optimizers, checkpoints and run comparison.

pub mod data;
pub mod diff;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;
