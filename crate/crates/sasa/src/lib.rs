//! Sparse associative structure alignment (SASA) for unsupervised
//! time-series domain adaptation.
//!
//! The model summarizes every suffix segment of each variable with a
//! variable-specific LSTM, selects segment lengths with sparse
//! intra-variable attention, reconstructs a sparse inter-variable
//! associative structure with time lags, and aligns both attention
//! distributions across domains with linear-kernel MMD penalties.
//!
//! Everything runs on a small reverse-mode tape ([`tape`]) built for
//! exactly the operator set this model needs, in double precision, with
//! finite-difference checking utilities in [`gradcheck`].

pub mod adam;
pub mod alignment;
pub mod baseline;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod segment;
pub mod series;
pub mod sparsemax;
pub mod structure;
pub mod synth;
pub mod tape;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
