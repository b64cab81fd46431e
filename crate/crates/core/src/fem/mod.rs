//! Finite element building blocks shared by the PDE problem instances.

pub mod assembly;
pub mod mesh;
pub mod quadrature;
pub mod sparse;

pub use assembly::P1Space;
pub use mesh::SimplexMesh;
pub use quadrature::SimplexRule;
pub use sparse::{EnvelopeLdl, Pattern, SparseMatrix};
