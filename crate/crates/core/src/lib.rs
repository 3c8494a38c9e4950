//! Virtual native-speaker shadowing of nonnative speech.
//!
//! A learner utterance is mapped, in feature space, onto what a native
//! shadower would produce when repeating it, breakdowns included. The crate
//! holds the corpus plumbing, feature extraction, the alignment kernels
//! (DTW, monotonic alignment search, forward-sum), the non-autoregressive
//! conversion model with its training regimes, a synthesis chain, the
//! evaluation metrics and the command pipeline that ties them together.

pub mod alignkit;
pub mod data;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod s2s;
pub mod synth;
