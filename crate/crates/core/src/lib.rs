//! Sliding-window detection with a grid loss.
//!
//! The last convolution map of a small network is cut into `n x n` blocks.
//! During training every block is a hinge-loss classifier of its own,
//! alongside the usual classifier over the whole map. At inference the
//! block weights are concatenated back into that single classifier, so
//! scanning costs nothing extra.
//!
//! Around that layer sit the parts a face detector needs: aggregate channel
//! features and their pyramid ([`features`]), the network and dense scanning
//! ([`detector`]), SGD training with hard-negative mining ([`trainer`]), an
//! ellipse regressor ([`regressor`]), evaluation protocols ([`eval`]) and a
//! procedural toy-face corpus ([`data`]).

pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod grid_loss;
pub mod regressor;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
