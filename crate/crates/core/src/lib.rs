//! Desk-scale numerical laboratory for stretched lattice polymers in a
//! random environment: quenched/annealed partition functions, a
//! multidimensional renewal engine with local limit theorems, the
//! Ornstein-Zernike irreducible-decomposition pipeline, weak- and
//! strong-disorder experiments, and a convex-geometry toolkit.

pub mod numeric;
pub mod lattice;
pub mod environment;
pub mod partition;
pub mod renewal;
pub mod geometry;
pub mod decomposition;
pub mod disorder;
pub mod config;
