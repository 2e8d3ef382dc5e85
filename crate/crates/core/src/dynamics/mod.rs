//! Coefficient fields, the interacting particle scheme, the nonlinear
//! semigroup `P*_{s,t}` and decoupled paths against a frozen law flow.

pub mod coefficients;
pub mod decoupled;
pub mod particles;

pub use coefficients::{
    lipschitz_spot_check, Affine, CoefficientField, Constant, GradientDrift, LipschitzCheck, MeanField,
    Modulated,
};
pub use decoupled::{simulate_decoupled, DecoupledSampler, ParticlePath, PathRecord, Trajectory};
pub use particles::{
    semigroup_apply, simulate_mckean_vlasov, InitialLaw, ParticleFlow, TimeGrid, BLOW_UP_THRESHOLD,
};
