//! Core library: symbolic expressions, diffusion operators in coordinates,
//! the carre-du-champ calculus (Γ, Γ₂, Hessian), pointwise N-Ricci bounds,
//! operator transformations (time change, drift, metric, conformal, Doob),
//! and 1-D spectral checks.

pub mod curvature;
pub mod diffusion;
pub mod expr;
pub mod spectral;
pub mod transform;
