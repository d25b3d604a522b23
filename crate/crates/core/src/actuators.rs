//! Indicator actuators, auxiliary spaces, orthogonal and oblique projections,
//! and the Poincare-like constant of the actuator span.
//!
//! Elements of `H` are represented as a P1 nodal part plus a combination of
//! actuator indicators ([`HElement`]). On an actuator-aligned mesh the
//! indicators are exact unions of triangles, so every inner product below is
//! evaluated exactly.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::discretization::eigen::{self, EigenOptions};
use crate::discretization::mesh::RectDomain;
use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS_2D: [f64; 2] = [1.0 / 3.0, 1.0 / 4.0];
pub const DEFAULT_FRACTION_1D: f64 = 1.0 / 3.0;
pub const DIRECT_SUM_THRESHOLD: f64 = 1e8;

/// `M^d` congruent rectangles, one centred in each cell of a uniform `M x .. x M`
/// partition of the domain. Actuator `j` sits in cell `(ix, iy)` with
/// `j = ix + iy M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorLayout {
    domain: RectDomain,
    m: usize,
    fractions: Vec<f64>,
}

impl ActuatorLayout {
    pub fn new(domain: &RectDomain, m: usize) -> Result<Self> {
        let fractions = match domain.dim() {
            1 => vec![DEFAULT_FRACTION_1D],
            _ => DEFAULT_FRACTIONS_2D.to_vec(),
        };
        Self::with_fractions(domain, m, &fractions)
    }

    pub fn with_fractions(domain: &RectDomain, m: usize, fractions: &[f64]) -> Result<Self> {
        if fractions.len() != domain.dim() {
            return Err(Error::InvalidInput(
                "one actuator fraction per axis is required".into(),
            ));
        }
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidInput(
                "actuator fractions must lie in (0, 1)".into(),
            ));
        }
        Ok(Self {
            domain: domain.clone(),
            m,
            fractions: fractions.to_vec(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Number of actuators, `M^d`.
    pub fn count(&self) -> usize {
        self.m.pow(self.dim() as u32)
    }

    fn interval(&self, axis: usize, cell: usize) -> (f64, f64) {
        let width = self.domain.lengths()[axis] / self.m as f64;
        let centre = (cell as f64 + 0.5) * width;
        let half = 0.5 * self.fractions[axis] * width;
        (centre - half, centre + half)
    }

    /// Per-axis `(lo, hi)` bounds of actuator `j`.
    pub fn rectangle(&self, j: usize) -> Vec<(f64, f64)> {
        let mut rest = j;
        (0..self.dim())
            .map(|axis| {
                let cell = rest % self.m;
                rest /= self.m;
                self.interval(axis, cell)
            })
            .collect()
    }

    pub fn measure(&self, j: usize) -> f64 {
        self.rectangle(j).iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.count()).map(|j| self.measure(j)).sum()
    }

    /// All distinct actuator edge coordinates along `axis`, ascending.
    pub fn edge_coordinates(&self, axis: usize) -> Vec<f64> {
        (0..self.m)
            .flat_map(|c| {
                let (lo, hi) = self.interval(axis, c);
                [lo, hi]
            })
            .collect()
    }

    pub fn contains(&self, j: usize, x: &[f64]) -> bool {
        self.rectangle(j)
            .iter()
            .zip(x)
            .all(|((lo, hi), xi)| *xi > *lo && *xi < *hi)
    }
}

/// An element of `H`: `sum_i nodal_i phi_i + sum_j act_j Phi_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HElement {
    pub nodal: DVector<f64>,
    pub act: DVector<f64>,
}

impl HElement {
    pub fn from_nodal(nodal: DVector<f64>, actuators: usize) -> Self {
        Self {
            nodal,
            act: DVector::zeros(actuators),
        }
    }

    pub fn from_actuators(act: DVector<f64>, nodes: usize) -> Self {
        Self {
            nodal: DVector::zeros(nodes),
            act,
        }
    }

    pub fn axpy(&mut self, a: f64, other: &HElement) {
        self.nodal.axpy(a, &other.nodal, 1.0);
        self.act.axpy(a, &other.act, 1.0);
    }

    pub fn sub(&self, other: &HElement) -> HElement {
        HElement {
            nodal: &self.nodal - &other.nodal,
            act: &self.act - &other.act,
        }
    }
}

/// The actuator family as load vectors `B[:, j] = (phi_i, Phi_j)_H` and the exact
/// Gram matrix `G = ((Phi_i, Phi_j)_H)`.
#[derive(Debug, Clone)]
pub struct ActuatorBasis {
    loads: DMatrix<f64>,
    gram: DMatrix<f64>,
    gram_factor: Cholesky<f64, Dyn>,
    layout: Option<ActuatorLayout>,
}

impl ActuatorBasis {
    /// Builds the indicator loads on the mesh of `sys`. The mesh must contain
    /// every actuator edge as a grid line.
    pub fn build(layout: &ActuatorLayout, sys: &DiscreteSystem) -> Result<Self> {
        let mesh = sys
            .mesh()
            .ok_or_else(|| Error::InvalidInput("system has no mesh".into()))?;
        if mesh.domain() != layout.domain() {
            return Err(Error::InvalidInput(
                "actuator layout and mesh use different domains".into(),
            ));
        }
        for axis in 0..layout.dim() {
            for x in layout.edge_coordinates(axis) {
                if !mesh.has_line(axis, x) {
                    return Err(Error::MeshNotAligned { axis, coordinate: x });
                }
            }
        }
        let m = layout.count();
        let n = sys.node_count();
        let mut loads = DMatrix::zeros(n, m);
        let share = 1.0 / mesh.nodes_per_element() as f64;
        for e in 0..mesh.element_count() {
            let c = mesh.element_centroid(e);
            if let Some(j) = (0..m).find(|&j| layout.contains(j, &c)) {
                let w = mesh.element_measure(e) * share;
                for &node in mesh.element(e) {
                    loads[(node, j)] += w;
                }
            }
        }
        let rects: Vec<_> = (0..m).map(|j| layout.rectangle(j)).collect();
        let gram = DMatrix::from_fn(m, m, |i, j| {
            rects[i]
                .iter()
                .zip(&rects[j])
                .map(|(a, b)| (a.1.min(b.1) - a.0.max(b.0)).max(0.0))
                .product()
        });
        let mut basis = Self::from_loads(loads, gram)?;
        basis.layout = Some(layout.clone());
        Ok(basis)
    }

    /// Basis from explicit load vectors and Gram matrix.
    pub fn from_loads(loads: DMatrix<f64>, gram: DMatrix<f64>) -> Result<Self> {
        if gram.nrows() != loads.ncols() || gram.ncols() != loads.ncols() {
            return Err(Error::InvalidInput("Gram matrix shape differs from actuator count".into()));
        }
        let gram_factor = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::LinearSolve("actuator Gram matrix is not positive definite".into()))?;
        Ok(Self {
            loads,
            gram,
            gram_factor,
            layout: None,
        })
    }

    pub fn count(&self) -> usize {
        self.loads.ncols()
    }

    pub fn node_count(&self) -> usize {
        self.loads.nrows()
    }

    pub fn layout(&self) -> Option<&ActuatorLayout> {
        self.layout.as_ref()
    }

    pub fn loads(&self) -> &DMatrix<f64> {
        &self.loads
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_factor(&self) -> &Cholesky<f64, Dyn> {
        &self.gram_factor
    }

    /// Weak load `(phi_i, sum_j u_j Phi_j)_H` of an actuator combination.
    pub fn load(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.loads * u
    }

    pub fn solve_gram(&self, r: &DVector<f64>) -> DVector<f64> {
        self.gram_factor.solve(r)
    }

    /// `((Phi_j, y)_H)_j`.
    pub fn actuator_moments(&self, y: &HElement) -> DVector<f64> {
        self.loads.tr_mul(&y.nodal) + &self.gram * &y.act
    }

    /// Coordinates of the orthogonal projection of a nodal vector onto the span.
    pub fn coordinates(&self, y: &DVector<f64>) -> DVector<f64> {
        self.solve_gram(&self.loads.tr_mul(y))
    }

    /// Coordinates of the orthogonal projection of an `H` element onto the span.
    pub fn project_orthogonal(&self, y: &HElement) -> DVector<f64> {
        self.solve_gram(&self.actuator_moments(y))
    }

    pub fn h_inner(&self, sys: &DiscreteSystem, a: &HElement, b: &HElement) -> f64 {
        sys.h_inner(&a.nodal, &b.nodal)
            + a.nodal.dot(&(&self.loads * &b.act))
            + b.nodal.dot(&(&self.loads * &a.act))
            + a.act.dot(&(&self.gram * &b.act))
    }

    pub fn h_norm(&self, sys: &DiscreteSystem, a: &HElement) -> f64 {
        self.h_inner(sys, a, a).max(0.0).sqrt()
    }

    /// `|sum_j c_j Phi_j|_H^2`.
    pub fn coefficient_norm_sq(&self, c: &DVector<f64>) -> f64 {
        c.dot(&(&self.gram * c))
    }

    pub fn write_gram<W: Write>(&self, out: W) -> Result<()> {
        write_dense_triplets(&self.gram, out)
    }
}

fn write_dense_triplets<W: Write>(a: &DMatrix<f64>, mut out: W) -> Result<()> {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[(i, j)] != 0.0 {
                writeln!(out, "{i} {j} {:.16e}", a[(i, j)])?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum AuxiliaryKind {
    /// Discrete eigenfunctions (nodal columns) with their eigenvalues.
    Eigenfunctions {
        vectors: DMatrix<f64>,
        eigenvalues: DVector<f64>,
    },
    /// The actuator span itself; all oblique projections become orthogonal.
    Actuators,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionTarget {
    /// Onto the actuator span along the complement of the auxiliary span.
    Actuators,
    /// Onto the auxiliary span along the complement of the actuator span.
    Auxiliary,
}

/// Auxiliary space paired with an actuator basis through the cross-Gram
/// `Lambda_ij = (Phi_i, aux_j)_H`.
#[derive(Debug, Clone)]
pub struct AuxiliaryBasis {
    kind: AuxiliaryKind,
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    cross_lu: LU<f64, Dyn, Dyn>,
    cross_t_lu: LU<f64, Dyn, Dyn>,
    condition: f64,
}

impl AuxiliaryBasis {
    /// The first `basis.count()` discrete eigenfunctions of `(A_h, M_h)`.
    pub fn eigenfunctions(basis: &ActuatorBasis, sys: &DiscreteSystem) -> Result<Self> {
        let pairs = eigen::smallest(
            sys.stiffness(),
            sys.mass(),
            basis.count(),
            None,
            &EigenOptions::default(),
        )?;
        Self::from_eigenpairs(basis, sys, pairs.vectors, pairs.values)
    }

    pub fn from_eigenpairs(
        basis: &ActuatorBasis,
        sys: &DiscreteSystem,
        vectors: DMatrix<f64>,
        eigenvalues: DVector<f64>,
    ) -> Result<Self> {
        if vectors.ncols() != basis.count() || eigenvalues.len() != basis.count() {
            return Err(Error::InvalidInput(
                "auxiliary dimension must equal the actuator count".into(),
            ));
        }
        let mv = mass_times(sys, &vectors);
        let gram = vectors.tr_mul(&mv);
        let cross = basis.loads().tr_mul(&vectors);
        Self::finish(
            AuxiliaryKind::Eigenfunctions {
                vectors,
                eigenvalues,
            },
            gram,
            cross,
        )
    }

    /// Self-auxiliary pairing.
    pub fn actuators(basis: &ActuatorBasis) -> Result<Self> {
        Self::finish(AuxiliaryKind::Actuators, basis.gram().clone(), basis.gram().clone())
    }

    fn finish(kind: AuxiliaryKind, gram: DMatrix<f64>, cross: DMatrix<f64>) -> Result<Self> {
        let sv = cross.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= DIRECT_SUM_THRESHOLD) {
            return Err(Error::DirectSumViolation {
                condition,
                threshold: DIRECT_SUM_THRESHOLD,
            });
        }
        let cross_lu = cross.clone().lu();
        let cross_t_lu = cross.transpose().lu();
        Ok(Self {
            kind,
            gram,
            cross,
            cross_lu,
            cross_t_lu,
            condition,
        })
    }

    pub fn kind(&self) -> &AuxiliaryKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.cross.ncols()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn cross_gram(&self) -> &DMatrix<f64> {
        &self.cross
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `((aux_j, y)_H)_j`.
    pub fn auxiliary_moments(&self, basis: &ActuatorBasis, sys: &DiscreteSystem, y: &HElement) -> DVector<f64> {
        match &self.kind {
            AuxiliaryKind::Eigenfunctions { vectors, .. } => {
                let my = crate::sparse::matvec(sys.mass(), &y.nodal);
                vectors.tr_mul(&my) + vectors.tr_mul(&basis.load(&y.act))
            }
            AuxiliaryKind::Actuators => basis.actuator_moments(y),
        }
    }

    /// Solves `Lambda^T c = r`.
    pub fn solve_cross_transpose(&self, r: &DVector<f64>) -> DVector<f64> {
        self.cross_t_lu
            .solve(r)
            .expect("cross-Gram checked invertible")
    }

    /// Solves `Lambda d = r`.
    pub fn solve_cross(&self, r: &DVector<f64>) -> DVector<f64> {
        self.cross_lu.solve(r).expect("cross-Gram checked invertible")
    }

    /// Actuator coefficients of the projection onto the actuator span along the
    /// orthogonal complement of the auxiliary span.
    pub fn onto_actuators_coefficients(&self, basis: &ActuatorBasis, sys: &DiscreteSystem, y: &HElement) -> DVector<f64> {
        self.solve_cross_transpose(&self.auxiliary_moments(basis, sys, y))
    }

    /// Auxiliary coefficients of the projection onto the auxiliary span along
    /// the orthogonal complement of the actuator span.
    pub fn onto_auxiliary_coefficients(&self, basis: &ActuatorBasis, y: &HElement) -> DVector<f64> {
        self.solve_cross(&basis.actuator_moments(y))
    }

    /// The element `sum_j d_j aux_j`.
    pub fn auxiliary_element(&self, basis: &ActuatorBasis, d: &DVector<f64>) -> HElement {
        match &self.kind {
            AuxiliaryKind::Eigenfunctions { vectors, .. } => {
                HElement::from_nodal(vectors * d, basis.count())
            }
            AuxiliaryKind::Actuators => HElement::from_actuators(d.clone(), basis.node_count()),
        }
    }

    pub fn project(
        &self,
        basis: &ActuatorBasis,
        sys: &DiscreteSystem,
        y: &HElement,
        target: ProjectionTarget,
    ) -> HElement {
        match target {
            ProjectionTarget::Actuators => HElement::from_actuators(
                self.onto_actuators_coefficients(basis, sys, y),
                basis.node_count(),
            ),
            ProjectionTarget::Auxiliary => {
                self.auxiliary_element(basis, &self.onto_auxiliary_coefficients(basis, y))
            }
        }
    }

    /// Operator norm in `H` of the projection onto the auxiliary span along the
    /// orthogonal complement of the actuator span.
    pub fn projector_norm(&self, basis: &ActuatorBasis) -> f64 {
        let lg = basis.gram_factor().l();
        let lw = match self.gram.clone().cholesky() {
            Some(c) => c.l(),
            None => return f64::INFINITY,
        };
        let inner = self.cross_lu.solve(&lg).expect("cross-Gram checked invertible");
        let op = lw.transpose() * inner;
        op.singular_values().max()
    }

    /// Largest Rayleigh quotient `|v|_V^2 / |v|_H^2` over the auxiliary span.
    pub fn spectral_bound(&self, sys: &DiscreteSystem) -> Result<f64> {
        match &self.kind {
            AuxiliaryKind::Eigenfunctions { vectors, .. } => {
                let av = stiffness_times(sys, vectors);
                let a = vectors.tr_mul(&av);
                let pairs = eigen::dense_generalized(&((&a + a.transpose()) * 0.5), &self.gram)?;
                Ok(pairs.values.max())
            }
            AuxiliaryKind::Actuators => Err(Error::Undefined(
                "indicator functions are not in V; the spectral bound is infinite".into(),
            )),
        }
    }

    pub fn write_cross_gram<W: Write>(&self, out: W) -> Result<()> {
        write_dense_triplets(&self.cross, out)
    }
}

fn mass_times(sys: &DiscreteSystem, x: &DMatrix<f64>) -> DMatrix<f64> {
    sys.mass() * x
}

fn stiffness_times(sys: &DiscreteSystem, x: &DMatrix<f64>) -> DMatrix<f64> {
    sys.stiffness() * x
}

/// Smallest eigenvalue of `(A_h, M_h)` on `{y : C^T y = 0}`.
pub fn constrained_minimum(sys: &DiscreteSystem, constraints: &DMatrix<f64>) -> Result<f64> {
    let c = (constraints.ncols() > 0).then_some(constraints);
    let pairs = eigen::smallest(sys.stiffness(), sys.mass(), 1, c, &EigenOptions::default())?;
    Ok(pairs.values[0])
}

/// Poincare-like constant: the smallest Rayleigh quotient `|y|_V^2 / |y|_H^2` over
/// the `H`-orthogonal complement of the actuator span.
pub fn poincare_constant(basis: &ActuatorBasis, sys: &DiscreteSystem) -> Result<f64> {
    constrained_minimum(sys, basis.loads())
}

/// Constraint matrix `M_h V` whose null space is the `H`-orthogonal complement
/// of the nodal columns of `v`.
pub fn orthogonality_constraints(sys: &DiscreteSystem, v: &DMatrix<f64>) -> DMatrix<f64> {
    mass_times(sys, v)
}
