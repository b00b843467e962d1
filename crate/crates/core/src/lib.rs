//! Interactive as-rigid-as-possible editing of Gaussian splat clouds through a
//! sparse control graph.

pub mod arap;
pub mod error;
pub mod graph;
pub mod parallel;
pub mod ply;
pub mod render;
pub mod session;
pub mod skinning;
pub mod splat;

pub use arap::{DeformationState, HandleSet, Initialization, RotationMode, SolverConfig};
pub use error::{Error, Result, Warning};
pub use graph::{ControlGraph, GraphConfig};
pub use render::{Camera, SplatImage};
pub use skinning::BindingTable;
pub use splat::{GaussianCloud, GaussianPrimitive};
