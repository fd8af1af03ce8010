//! Problem definition: setting, coefficients, grids, catalog and the
//! text problem format.

mod catalog;
mod coefficients;
mod grid;
mod problem_file;
mod setting;
mod validate;

pub use catalog::{catalog, catalog_entry, catalog_names, classical_linear_y0, raised_terminal, AnalyticReference, PairSpec, ProblemCatalogEntry};
pub use coefficients::{CoefficientExprError, CoefficientSet, CoefficientText, Driver, Lipschitz, Terminal, VectorField};
pub use grid::{default_nodes, Axis, DiscretizationGrid, Quadrature};
pub use problem_file::{problem_grid, GridSpec, ProblemFile};
pub use setting::GSetting;
pub use validate::{validate_problem, AuditConfig, AuditGroup, Check, ValidationReport, Witness};
