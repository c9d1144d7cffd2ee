//! Neural emulators for dissipative chaotic ODEs with a guaranteed bounded
//! rollout.
//!
//! An MLP vector field f̂ is trained jointly with a quadratic Lyapunov
//! function V and a level c. A closed-form projection layer turns f̂ into
//! f* satisfying ∂V/∂x·f* + V − c ≤ 0 everywhere, so every trajectory of
//! ẋ = f*(x) converges to the ellipsoid M(c) = {V ≤ c}, which doubles as an
//! outer estimate of the attractor.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod integrator;
pub mod lyapunov;
pub mod model;
pub mod net;
pub mod projection;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
pub use integrator::{rollout, rk4_step, Trajectory, VectorField};
pub use lyapunov::QuadraticLyapunov;
pub use model::Emulator;
pub use net::MlpParams;
pub use systems::SystemSpec;
