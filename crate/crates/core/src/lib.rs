//! Kinematic-prior selective state space scanning for video token streams.
//!
//! The crate hosts a small dense-tensor engine with a reverse-mode tape, the
//! motion-prior encoder ([`kpe`]), the selective temporal scanner ([`ks4`]),
//! the insertion block that ties them to a ViT token stream ([`pks4`]), a
//! minimal ViT host ([`vit`]), analytic cost accounting ([`cost`]), a
//! synthetic video generator ([`synth`]) and the training loop ([`train`]).

pub mod autodiff;
pub mod checks;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod kpe;
pub mod ks4;
pub mod nn;
pub mod params;
pub mod pks4;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{PadMode, Tape, Var};
pub use error::{KinoError, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Precision, Scalar, Tensor};
