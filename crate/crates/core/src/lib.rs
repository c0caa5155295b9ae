//! Cross-modal voice-face association learning on synthetic data.
//!
//! The pipeline: generate a synthetic cross-modal dataset with planted hard
//! and personalized identities ([`synth`]), train two feed-forward encoders
//! plus a shared identity classifier ([`encoder`]) under a two-level
//! alignment objective ([`loss`]) with adaptive identity re-weighting
//! ([`reweight`]) through a three-stage schedule ([`train`]), then score the
//! result on matching / verification / retrieval protocols ([`eval`]).
//! [`checks`] bundles the gradient, bound and bracketing verification suites
//! behind the CLI.
//!
//! Everything is deterministic given a root seed; see [`rng`] for the
//! counter-based generator contract. Evaluation and the check suites are
//! data-parallel over queries and instances (rayon, behind the default
//! `parallel` feature) with fixed-order reduction, so parallel and
//! sequential runs produce identical output.

pub mod checks;
pub mod dataio;
pub mod encoder;
pub mod eval;
pub mod loss;
pub mod mat;
pub mod par;
pub mod reweight;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;
