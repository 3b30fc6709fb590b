//! Analysis toolkit for teacher-to-classroom reallocation studies.
//!
//! The crate covers the full pipeline used to evaluate counterfactual
//! teacher assignments on experimental data with imperfect compliance:
//!
//! * [`matchcore`] — discrete-type matching primitives: own/peer type
//!   densities, feasibility of counterfactual assignment rules, and
//!   nonparametric average reallocation effects on toy populations.
//! * [`synth`] — synthetic randomized experiments (districts, schools,
//!   randomization blocks, classrooms) with configurable non-compliance
//!   and a known production function, so estimates can be checked
//!   against ground truth.
//! * [`design`] — discretization of student/teacher attributes,
//!   leave-own-out peer fractions, and construction of the partially
//!   linear IV design matrices with block fixed effects.
//! * [`estimator`] — OLS and two-stage least squares with cluster-robust
//!   covariance, joint Wald tests, and weak-instrument F statistics.
//! * [`diagnostics`] — randomization balance and non-compliance
//!   specification tests.
//! * [`realloc`] — counterfactual predictions, the transportation LP for
//!   optimal/worst teacher assignments, reallocation-effect metrics,
//!   assortativeness summaries, and closed-form value-added benchmarks.
//! * [`inference`] — Bayesian-bootstrap posteriors for any statistic in
//!   the pipeline, with deterministic parallel replication streams.

pub mod design;
pub mod diagnostics;
pub mod estimator;
pub mod inference;
pub mod matchcore;
pub mod realloc;
pub mod synth;
