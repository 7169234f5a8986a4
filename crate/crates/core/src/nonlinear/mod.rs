//! EBCIs built from nonlinear candidate sets: soft thresholding, Poisson rates
//! and selection-conditional linear intervals.

pub mod poisson;
pub mod selection;
pub mod soft_threshold;

pub use poisson::{garwood_ci, poisson_candidate_set, poisson_ebci, PoissonConfig};
pub use selection::{selection_cva, selection_moment, selection_noncoverage, SelectionWindow};
pub use soft_threshold::{hpd_interval, soft_threshold_ebci, soft_threshold_estimate, SoftThresholdConfig};
