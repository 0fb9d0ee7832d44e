//! Two-level Bayesian clustering of multi-subject count matrices.
//!
//! Given gene-by-cell count matrices from several subjects, this crate fits a
//! nonparametric mixture model that simultaneously
//!
//! * groups **subjects** into subgroups that share cellular composition and
//!   subject-level expression shifts, and
//! * groups **cells** into types that are matched across all subjects.
//!
//! Counts are modelled by a zero-inflated Poisson-log-normal (ZIPLN)
//! distribution: a Poisson rate with log-normal heterogeneity, per-cell
//! library-size scaling, and a count-dependent probit dropout that can zero
//! out observations. The two clustering levels come from a truncated
//! nested-hierarchical Dirichlet-process prior: a stick-breaking weight
//! vector shared across subgroups picks the cell-type atoms, each subgroup
//! gets its own Dirichlet-tilted cell-type proportions, and subjects pick a
//! subgroup through a second stick-breaking process. Inference is a blocked
//! Gibbs sampler with Metropolis steps for the non-conjugate blocks.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`] — loading, validation, QC filtering, and library-size scaling
//!   of count matrices (CSV and Matrix Market).
//! * [`model`] — the distributions everything else is built from:
//!   stick-breaking, Poisson-log-normal, probit dropout, ZIPLN.
//! * [`prior`] — closed-form moments of the two-level prior, a Monte-Carlo
//!   sampler to verify them, and the truncation error bound.
//! * [`gibbs`] — the blocked Gibbs sampler, its checkpoint format, and a
//!   Geweke joint-distribution test harness.
//! * [`posthoc`] — label-switching correction, point estimates, posterior
//!   similarity matrices, and the adjusted Rand index.
//! * [`simulate`] — synthetic data generation from the model and a
//!   fit-and-score benchmark loop with a k-means baseline.
//!
//! Every random draw in the sampler is keyed by `(seed, iteration, block,
//! unit)` through [`rng::stream`], so a fixed seed reproduces results
//! bit-for-bit regardless of thread count.
//!
//! The accompanying `book/` directory walks through the model and the CLI;
//! its code snippets compile and run as part of `cargo test`.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod posthoc;
pub mod prior;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
