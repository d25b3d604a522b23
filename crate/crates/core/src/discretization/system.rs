//! P1 Galerkin assembly of `A = -nu Laplace + 1` (Neumann), the reaction and
//! convection terms, and the nodal-quadrature nonlinearity `-|y| y`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use nalgebra_sparse::CsrMatrix;

use super::mesh::StructuredMesh;
use crate::error::{Error, Result};
use crate::sparse::{self, ElementPattern};

/// Space-time coefficients `a(x, t)` (reaction) and `b(x, t)` (convection).
pub trait CoefficientField: Send + Sync + fmt::Debug {
    fn reaction(&self, x: &[f64], t: f64) -> f64;

    /// Writes `b(x, t)` into `out` (length = spatial dimension).
    fn convection(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// `true` if neither coefficient depends on time.
    fn is_autonomous(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCoefficients;

impl CoefficientField for ZeroCoefficients {
    fn reaction(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }

    fn convection(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|b| *b = 0.0);
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
struct ElementGeometry {
    measure: f64,
    centroid: Vec<f64>,
    /// Gradients of the local hat functions, `(d + 1) x d` row-major.
    gradients: Vec<f64>,
}

#[derive(Clone)]
enum VariableTerms {
    Assembled {
        pattern: ElementPattern,
        geometry: Vec<ElementGeometry>,
        coeffs: Arc<dyn CoefficientField>,
    },
    Fixed {
        reaction: CsrMatrix<f64>,
        convection: CsrMatrix<f64>,
    },
}

/// Assembled finite-element operators. Immutable after construction.
#[derive(Clone)]
pub struct DiscreteSystem {
    nu: f64,
    mass: CsrMatrix<f64>,
    laplace: CsrMatrix<f64>,
    stiffness: CsrMatrix<f64>,
    variable: VariableTerms,
    mesh: Option<StructuredMesh>,
}

impl fmt::Debug for DiscreteSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteSystem")
            .field("nu", &self.nu)
            .field("nodes", &self.node_count())
            .field("nnz", &self.mass.nnz())
            .finish()
    }
}

fn local_mass(dim: usize, measure: f64, i: usize, j: usize) -> f64 {
    let scale = measure / ((dim + 1) * (dim + 2)) as f64;
    if i == j {
        2.0 * scale
    } else {
        scale
    }
}

fn element_geometry(mesh: &StructuredMesh, e: usize) -> ElementGeometry {
    let nodes = mesh.element(e);
    let measure = mesh.element_measure(e);
    let gradients = match mesh.dim() {
        1 => vec![-1.0 / measure, 1.0 / measure],
        _ => {
            let p: Vec<&[f64]> = nodes.iter().map(|&n| mesh.vertex(n)).collect();
            let two_a = 2.0 * measure;
            vec![
                (p[1][1] - p[2][1]) / two_a,
                (p[2][0] - p[1][0]) / two_a,
                (p[2][1] - p[0][1]) / two_a,
                (p[0][0] - p[2][0]) / two_a,
                (p[0][1] - p[1][1]) / two_a,
                (p[1][0] - p[0][0]) / two_a,
            ]
        }
    };
    ElementGeometry {
        measure,
        centroid: mesh.element_centroid(e),
        gradients,
    }
}

impl DiscreteSystem {
    /// Assembles mass and stiffness matrices; reaction and convection are
    /// assembled on demand at a given time with centroid quadrature.
    pub fn assemble(mesh: &StructuredMesh, coeffs: Arc<dyn CoefficientField>, nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidInput(format!("diffusion nu must be positive, got {nu}")));
        }
        let dim = mesh.dim();
        let local = dim + 1;
        let all: Vec<usize> = (0..mesh.element_count())
            .flat_map(|e| mesh.element(e).to_vec())
            .collect();
        let pattern = ElementPattern::new(mesh.vertex_count(), local, &all);
        let geometry: Vec<ElementGeometry> = (0..mesh.element_count())
            .map(|e| element_geometry(mesh, e))
            .collect();

        let mass = pattern.assemble(|e, out| {
            let g = &geometry[e];
            for i in 0..local {
                for j in 0..local {
                    out[i * local + j] = local_mass(dim, g.measure, i, j);
                }
            }
            Ok(())
        })?;
        let laplace = pattern.assemble(|e, out| {
            let g = &geometry[e];
            for i in 0..local {
                for j in 0..local {
                    let gi = &g.gradients[i * dim..(i + 1) * dim];
                    let gj = &g.gradients[j * dim..(j + 1) * dim];
                    out[i * local + j] =
                        g.measure * gi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Ok(())
        })?;
        let stiffness = sparse::combine(&[(nu, &laplace), (1.0, &mass)]);

        Ok(Self {
            nu,
            mass,
            laplace,
            stiffness,
            variable: VariableTerms::Assembled {
                pattern,
                geometry,
                coeffs,
            },
            mesh: Some(mesh.clone()),
        })
    }

    /// Builds a system from explicit matrices sharing one sparsity pattern.
    /// `reaction` and `convection` are taken as time independent.
    pub fn from_matrices(
        mass: CsrMatrix<f64>,
        laplace: CsrMatrix<f64>,
        nu: f64,
        reaction: CsrMatrix<f64>,
        convection: CsrMatrix<f64>,
    ) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidInput(format!("diffusion nu must be positive, got {nu}")));
        }
        for (name, m) in [("laplace", &laplace), ("reaction", &reaction), ("convection", &convection)] {
            if m.pattern() != mass.pattern() {
                return Err(Error::InvalidInput(format!(
                    "{name} matrix must share the mass matrix sparsity pattern"
                )));
            }
        }
        let stiffness = sparse::combine(&[(nu, &laplace), (1.0, &mass)]);
        Ok(Self {
            nu,
            mass,
            laplace,
            stiffness,
            variable: VariableTerms::Fixed {
                reaction,
                convection,
            },
            mesh: None,
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn node_count(&self) -> usize {
        self.mass.nrows()
    }

    pub fn mesh(&self) -> Option<&StructuredMesh> {
        self.mesh.as_ref()
    }

    /// `M_h`, the Gram matrix of the H = L^2 inner product.
    pub fn mass(&self) -> &CsrMatrix<f64> {
        &self.mass
    }

    /// `K_h`, the Gram matrix of the gradient inner product.
    pub fn laplace(&self) -> &CsrMatrix<f64> {
        &self.laplace
    }

    /// `A_h = nu K_h + M_h`, the Gram matrix of the V inner product.
    pub fn stiffness(&self) -> &CsrMatrix<f64> {
        &self.stiffness
    }

    pub fn is_autonomous(&self) -> bool {
        match &self.variable {
            VariableTerms::Assembled { coeffs, .. } => coeffs.is_autonomous(),
            VariableTerms::Fixed { .. } => true,
        }
    }

    /// `R_h(t)_{ij} = (a(., t) phi_j, phi_i)_H`.
    pub fn reaction_matrix(&self, t: f64) -> Result<CsrMatrix<f64>> {
        match &self.variable {
            VariableTerms::Fixed { reaction, .. } => Ok(reaction.clone()),
            VariableTerms::Assembled {
                pattern,
                geometry,
                coeffs,
            } => {
                let local = geometry.first().map_or(0, |g| g.centroid.len() + 1);
                let dim = local - 1;
                pattern.assemble(|e, out| {
                    let g = &geometry[e];
                    let a = coeffs.reaction(&g.centroid, t);
                    if !a.is_finite() {
                        return Err(Error::NonFiniteCoefficient { element: e, time: t });
                    }
                    for i in 0..local {
                        for j in 0..local {
                            out[i * local + j] = a * local_mass(dim, g.measure, i, j);
                        }
                    }
                    Ok(())
                })
            }
        }
    }

    /// `B_h(t)_{ij} = (b(., t) . grad phi_j, phi_i)_H`.
    pub fn convection_matrix(&self, t: f64) -> Result<CsrMatrix<f64>> {
        match &self.variable {
            VariableTerms::Fixed { convection, .. } => Ok(convection.clone()),
            VariableTerms::Assembled {
                pattern,
                geometry,
                coeffs,
            } => {
                let local = geometry.first().map_or(0, |g| g.centroid.len() + 1);
                let dim = local - 1;
                let mut b = vec![0.0; dim];
                pattern.assemble(|e, out| {
                    let g = &geometry[e];
                    coeffs.convection(&g.centroid, t, &mut b);
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteCoefficient { element: e, time: t });
                    }
                    let weight = g.measure / local as f64;
                    for j in 0..local {
                        let gj = &g.gradients[j * dim..(j + 1) * dim];
                        let flux: f64 = b.iter().zip(gj).map(|(x, y)| x * y).sum();
                        for i in 0..local {
                            out[i * local + j] = weight * flux;
                        }
                    }
                    Ok(())
                })
            }
        }
    }

    pub fn h_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        sparse::bilinear(&self.mass, x, y)
    }

    pub fn h_norm(&self, y: &DVector<f64>) -> f64 {
        self.h_inner(y, y).max(0.0).sqrt()
    }

    pub fn v_norm_sq(&self, y: &DVector<f64>) -> f64 {
        sparse::bilinear(&self.stiffness, y, y)
    }

    /// Load vector of `-|y| y` with nodal interpolation of the integrand.
    pub fn nonlinearity(&self, y: &DVector<f64>) -> DVector<f64> {
        let w = y.map(|v| -v.abs() * v);
        sparse::matvec(&self.mass, &w)
    }

    /// Jacobian `-M_h diag(2|y|)` of [`Self::nonlinearity`].
    pub fn nonlinearity_jacobian(&self, y: &DVector<f64>) -> CsrMatrix<f64> {
        let mut jac = self.mass.clone();
        for mut row in jac.row_iter_mut() {
            let (cols, vals) = row.cols_and_values_mut();
            for (j, v) in cols.iter().zip(vals.iter_mut()) {
                *v *= -2.0 * y[*j].abs();
            }
        }
        jac
    }

    /// `(dN(y))^T w = -2|y| * (M_h w)` (componentwise product).
    pub fn nonlinearity_jacobian_transpose_apply(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mw = sparse::matvec(&self.mass, w);
        mw.zip_map(y, |m, yi| -2.0 * yi.abs() * m)
    }

    /// Nodal interpolant of `f` (requires an assembled system).
    pub fn interpolate<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<DVector<f64>> {
        let mesh = self
            .mesh
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("system has no mesh to interpolate on".into()))?;
        Ok(DVector::from_iterator(
            mesh.vertex_count(),
            (0..mesh.vertex_count()).map(|i| f(mesh.vertex(i))),
        ))
    }
}
