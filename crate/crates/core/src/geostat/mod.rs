//! Variogram analysis and kriging-based imputation over network distances.

pub mod fit;
pub mod impute;
pub mod kriging;
pub mod variogram;

pub use fit::{fit_all, fit_kind, fit_variogram, FitOptions};
pub use impute::{
    autofit_model, autofit_pooled, bin_variogram, impute_network, network_mean_from_field, AutoFit, FieldMean,
    ImputeParams, ImputedField, ImputedLink, ModelSource, Provenance, DEFAULT_COVERAGE_THRESHOLD,
};
pub use kriging::{krige, solve_kriging, KrigingParams, KrigingSolution};
pub use variogram::{
    default_bin_edges, empirical_variogram, gamma, EmpiricalVariogram, VariogramBin, VariogramKind, VariogramModelSpec,
};
