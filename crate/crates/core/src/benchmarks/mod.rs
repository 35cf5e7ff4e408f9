//! The two shipped test problems and the ODE integrator behind the epidemic one.

pub mod linear;
pub mod ode;
pub mod seir;
