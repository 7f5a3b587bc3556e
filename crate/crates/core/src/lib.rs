//! Hard-ball billiard laboratory on the flat unit torus.
//!
//! The crate simulates `N` identical elastically colliding balls on the
//! ν-dimensional torus with event-driven dynamics, and provides the numerical
//! machinery built on top of such orbit segments:
//!
//! * [`torus`] / [`linalg`] — minimal-image geometry and tolerance-aware
//!   dense kernel computations,
//! * [`dynamics`] — time-of-impact search, elastic reflections, singularity
//!   classification, backward flow and phantom (pass-through) flow,
//! * [`symbolic`] — collision sequences, collision graphs, essential edges,
//! * [`neutral`] — the neutrality/advance linear system of a segment, its
//!   kernel (the neutral space), sufficiency tests, eliminated relations and
//!   a finite-difference oracle,
//! * [`probe`] — locating tangency (K) and degeneracy (J) crossings along
//!   phase-space curves, dimension statistics and the non-coincidence
//!   experiment,
//! * [`geom`] — tangent-line families against a circle/sphere and the
//!   span-rank tests for the reflected direction pairs.

pub mod dynamics;
pub mod geom;
pub mod linalg;
pub mod neutral;
pub mod probe;
pub mod sampling;
pub mod symbolic;
pub mod torus;

pub use dynamics::{
    CollisionEvent, DynamicsError, EventClass, PhasePoint, Stop, SystemParams, TrajectorySegment,
};
pub use linalg::{KernelResult, LinalgError, Tolerances};
pub use torus::TorusPoint;
