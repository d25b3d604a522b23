pub mod eigen;
pub mod mesh;
pub mod system;

pub use eigen::{eigenpairs, EigenMethod, EigenOptions, Eigenpairs};
pub use mesh::{RectDomain, StructuredMesh};
pub use system::{CoefficientField, DiscreteSystem, ZeroCoefficients};
