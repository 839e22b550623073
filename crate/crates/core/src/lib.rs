//! Ranking answer generators from scores assigned by imperfect judges.
//!
//! Each judge is a confusion matrix whose columns are vertices of a simplex;
//! a candidate's observed score distribution is a point inside that simplex
//! and the candidate's true score distribution is its barycentric
//! coordinates. The crate covers the geometry, a Bayesian model with a
//! monotone judge prior and random effects, a NUTS sampler, baselines,
//! evaluation tooling, data I/O and a judge-querying runner.

pub mod baselines;
pub mod diagnostics;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod judge;
pub mod likelihood;
pub mod model;
pub mod plot;
pub mod prior;
pub mod sampler;
pub mod state;
pub mod synthetic;
pub mod transform;
