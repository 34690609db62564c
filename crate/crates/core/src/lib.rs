//! Numerical laboratory for distribution-dependent stochastic porous-media
//! equations on the 1-D torus.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`]: the diagonal operator `L`, its semigroup, Bessel
//!   potentials and the norms of the triple `L² ⊂ F₁,₂* ⊂ (L²)*`.
//! * [`measure`]: empirical laws, Wasserstein-2 in the dual norm and the
//!   discounted flow metric.
//! * [`model`] and [`probe`]: drift `Ψ`, noise `B`, their constants and
//!   sampling-based falsifiers for the structural hypotheses.
//! * [`integrator`]: frozen-law and interacting particle time stepping with
//!   an Itô energy ledger.
//! * [`picard`]: fixed-point iteration on measure flows over contraction
//!   windows.
//! * [`approx`]: viscosity and `ε` sweeps and a priori moment envelopes.

pub mod approx;
pub mod error;
pub mod integrator;
pub mod measure;
pub mod model;
pub mod picard;
pub mod probe;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use integrator::{
    integrate_frozen, integrate_interacting, ito_ledger, EnergyReport, LawSource, StepScheme,
    TimeGrid, TrajectoryEnsemble,
};
pub use measure::{flow_distance, w2, EmpiricalMeasure, MeasureFlow, OtMethod, TransportPlan};
pub use model::{Coupling, DriftSpec, ModelConstants, ModelSpec, Nonlinearity, NoiseSpec};
pub use rng::NoisePlan;
pub use spectral::{Field, NormSpace, QuadraturePolicy, SobolevScale, SpectralOperator};
