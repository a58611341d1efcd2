//! Simulation designs, population strength diagnostics and Monte Carlo
//! studies.

pub mod baselines;
pub mod design;
pub mod strength;
pub mod study;

pub use baselines::{ols, tsls, Estimate};
pub use design::{
    Ak91Instance, Ak91StyleDesign, Calibration, Design, FirstStage, GroupDesign, GroupInstance, TrueMoments,
    AK91_SCALES,
};
pub use strength::{local_power, phi_at, strength, StrengthReport};
pub use study::{
    build_cache, power_curve, run_study, run_study_with, DesignSpec, Method, MethodSummary, PowerRow, PowerTable,
    Rate, SimulationReport, SimulationSpec,
};
