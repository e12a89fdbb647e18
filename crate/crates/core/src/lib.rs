//! Hierarchical penalized ANOVA for sparse, unbalanced multi-way tables.

pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod preprocess;
pub mod solver;
pub mod table;
pub mod variance;

pub use error::{HanovaError, Result};
pub use model::HanovaModel;
pub use solver::{fit_hanova, fit_order, FitOptions, HanovaFit, OrderFit, Penalty};
pub use table::{Cell, CellIndex, FactorSpec, SparseTable, Subset};
