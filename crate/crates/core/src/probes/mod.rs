//! Diagnostics over trained or freshly initialized models.

pub mod convergence;
pub mod early_exit;
pub mod flops;
pub mod gnn;
pub mod svd;
pub mod sweep;
pub mod trace;
