//! Toric Kähler data in polytope coordinates: Delzant polytopes, symplectic
//! potentials, the moment-map transition map between two polytopes, and the
//! J-flow evolved through the smooth part of the symplectic potential.

pub mod calabi;
pub mod expr;
pub mod flow;
pub mod polytope;
pub mod potential;
pub mod quadrature;
pub mod rational;
pub mod transition;
