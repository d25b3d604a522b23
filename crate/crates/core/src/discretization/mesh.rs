//! Structured simplicial meshes of rectangles and intervals.
//!
//! A mesh is the tensor product of one set of grid lines per axis. In two
//! dimensions every rectangular cell is split along its lower-left to
//! upper-right diagonal. Extra grid lines can be requested so that actuator
//! rectangles are unions of whole triangles.

use std::io::Write;

use crate::actuators::ActuatorLayout;
use crate::error::{Error, Result};

/// Coincidence tolerance for grid-line coordinates.
pub(crate) const COORD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RectDomain {
    lengths: Vec<f64>,
}

impl RectDomain {
    pub fn new(lengths: &[f64]) -> Result<Self> {
        if lengths.is_empty() || lengths.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "domain dimension must be 1 or 2, got {}",
                lengths.len()
            )));
        }
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidInput(
                "domain side lengths must be positive".into(),
            ));
        }
        Ok(Self {
            lengths: lengths.to_vec(),
        })
    }

    pub fn unit_square() -> Self {
        Self {
            lengths: vec![1.0, 1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn measure(&self) -> f64 {
        self.lengths.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct StructuredMesh {
    domain: RectDomain,
    axes: Vec<Vec<f64>>,
    coords: Vec<f64>,
    elements: Vec<usize>,
    refined: bool,
}

impl StructuredMesh {
    /// Builds the mesh with `cells[i]` uniform cells along axis `i`, then adds
    /// (or snaps nearby lines onto) every actuator edge of the given layouts.
    pub fn build(domain: &RectDomain, cells: &[usize], refine: &[ActuatorLayout]) -> Result<Self> {
        let dim = domain.dim();
        if cells.len() != dim {
            return Err(Error::InvalidInput(format!(
                "expected {dim} cell counts, got {}",
                cells.len()
            )));
        }
        if let Some(n) = cells.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidInput(format!(
                "cells per axis must be at least 2, got {n}"
            )));
        }
        for layout in refine {
            if layout.dim() != dim {
                return Err(Error::InvalidInput(
                    "actuator layout dimension differs from the domain".into(),
                ));
            }
        }

        let mut axes = Vec::with_capacity(dim);
        for axis in 0..dim {
            let length = domain.lengths()[axis];
            let mut required: Vec<f64> = refine
                .iter()
                .flat_map(|l| l.edge_coordinates(axis))
                .collect();
            required.sort_by(f64::total_cmp);
            required.dedup_by(|a, b| (*a - *b).abs() <= COORD_TOL);
            axes.push(grid_lines(length, cells[axis], &required));
        }

        let (coords, elements) = match dim {
            1 => {
                let xs = &axes[0];
                let elements = (0..xs.len() - 1).flat_map(|i| [i, i + 1]).collect();
                (xs.clone(), elements)
            }
            _ => {
                let (xs, ys) = (&axes[0], &axes[1]);
                let nx = xs.len();
                let mut coords = Vec::with_capacity(2 * nx * ys.len());
                for &y in ys {
                    for &x in xs {
                        coords.push(x);
                        coords.push(y);
                    }
                }
                let mut elements = Vec::with_capacity(6 * (nx - 1) * (ys.len() - 1));
                for j in 0..ys.len() - 1 {
                    for i in 0..nx - 1 {
                        let v00 = j * nx + i;
                        let v10 = v00 + 1;
                        let v01 = v00 + nx;
                        let v11 = v01 + 1;
                        elements.extend_from_slice(&[v00, v10, v11, v00, v11, v01]);
                    }
                }
                (coords, elements)
            }
        };

        Ok(Self {
            domain: domain.clone(),
            axes,
            coords,
            elements,
            refined: !refine.is_empty(),
        })
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn axis_lines(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    pub fn is_refined(&self) -> bool {
        self.refined
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len() / self.dim()
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn nodes_per_element(&self) -> usize {
        self.dim() + 1
    }

    pub fn element_count(&self) -> usize {
        self.elements.len() / self.nodes_per_element()
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.nodes_per_element();
        &self.elements[e * k..(e + 1) * k]
    }

    /// Signed measure (area in 2D, length in 1D) of element `e`.
    pub fn element_measure(&self, e: usize) -> f64 {
        let nodes = self.element(e);
        match self.dim() {
            1 => self.vertex(nodes[1])[0] - self.vertex(nodes[0])[0],
            _ => {
                let (a, b, c) = (self.vertex(nodes[0]), self.vertex(nodes[1]), self.vertex(nodes[2]));
                0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
            }
        }
    }

    pub fn element_centroid(&self, e: usize) -> Vec<f64> {
        let nodes = self.element(e);
        let d = self.dim();
        let mut c = vec![0.0; d];
        for &n in nodes {
            for (ci, xi) in c.iter_mut().zip(self.vertex(n)) {
                *ci += xi;
            }
        }
        c.iter_mut().for_each(|ci| *ci /= nodes.len() as f64);
        c
    }

    /// Whether `coordinate` is one of the grid lines along `axis`.
    pub fn has_line(&self, axis: usize, coordinate: f64) -> bool {
        self.axes[axis]
            .iter()
            .any(|&x| (x - coordinate).abs() <= COORD_TOL)
    }

    /// Writes one vertex per line: index followed by its coordinates.
    pub fn write_vertices<W: Write>(&self, mut out: W) -> Result<()> {
        for i in 0..self.vertex_count() {
            write!(out, "{i}")?;
            for x in self.vertex(i) {
                write!(out, " {x:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Writes one element per line: index followed by its vertex indices.
    pub fn write_elements<W: Write>(&self, mut out: W) -> Result<()> {
        for e in 0..self.element_count() {
            write!(out, "{e}")?;
            for n in self.element(e) {
                write!(out, " {n}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Uniform lines on `[0, length]` merged with `required` coordinates. A uniform
/// interior line closer than a third of the cell width to a required coordinate
/// is moved onto it instead of leaving a sliver cell.
fn grid_lines(length: f64, cells: usize, required: &[f64]) -> Vec<f64> {
    let h = length / cells as f64;
    let mut lines: Vec<(f64, bool)> = (0..=cells)
        .map(|i| (i as f64 * h, i == 0 || i == cells))
        .collect();
    lines[cells].0 = length;
    for &r in required {
        if r <= COORD_TOL || r >= length - COORD_TOL {
            continue;
        }
        let (idx, dist) = lines
            .iter()
            .enumerate()
            .map(|(i, (x, _))| (i, (x - r).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid has lines");
        if dist <= COORD_TOL {
            lines[idx] = (r, true);
        } else if !lines[idx].1 && dist < h / 3.0 {
            lines[idx] = (r, true);
        } else {
            lines.push((r, true));
        }
        lines.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    lines.into_iter().map(|(x, _)| x).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_counts() {
        let mesh = StructuredMesh::build(&RectDomain::unit_square(), &[2, 2], &[]).unwrap();
        assert_eq!(mesh.vertex_count(), 9);
        assert_eq!(mesh.element_count(), 8);
    }

    #[test]
    fn areas_partition_the_square() {
        for n in [2, 3, 7, 16] {
            let mesh = StructuredMesh::build(&RectDomain::unit_square(), &[n, n], &[]).unwrap();
            let total: f64 = (0..mesh.element_count()).map(|e| mesh.element_measure(e)).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((0..mesh.element_count()).all(|e| mesh.element_measure(e) > 0.0));
        }
    }

    #[test]
    fn every_vertex_is_used() {
        let layout = ActuatorLayout::new(&RectDomain::unit_square(), 3).unwrap();
        let mesh = StructuredMesh::build(&RectDomain::unit_square(), &[5, 4], &[layout]).unwrap();
        let mut used = vec![false; mesh.vertex_count()];
        for e in 0..mesh.element_count() {
            for &n in mesh.element(e) {
                used[n] = true;
            }
        }
        assert!(used.into_iter().all(|u| u));
    }

    #[test]
    fn refinement_contains_actuator_corners() {
        let domain = RectDomain::unit_square();
        let layout = ActuatorLayout::new(&domain, 3).unwrap();
        let mesh = StructuredMesh::build(&domain, &[8, 8], &[layout.clone()]).unwrap();
        // Corners from the layout geometry: cell centre +- half the fractional widths.
        for iy in 0..3 {
            for ix in 0..3 {
                let cx = (ix as f64 + 0.5) / 3.0;
                let cy = (iy as f64 + 0.5) / 3.0;
                let (hx, hy) = (1.0 / 18.0, 1.0 / 24.0);
                for x in [cx - hx, cx + hx] {
                    for y in [cy - hy, cy + hy] {
                        let found = (0..mesh.vertex_count()).any(|i| {
                            let v = mesh.vertex(i);
                            (v[0] - x).abs() < 1e-12 && (v[1] - y).abs() < 1e-12
                        });
                        assert!(found, "corner ({x}, {y}) missing");
                    }
                }
            }
        }
        let total: f64 = (0..mesh.element_count()).map(|e| mesh.element_measure(e)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_cell_counts() {
        let d = RectDomain::unit_square();
        assert!(StructuredMesh::build(&d, &[0, 4], &[]).is_err());
        assert!(StructuredMesh::build(&d, &[1, 4], &[]).is_err());
        assert!(StructuredMesh::build(&d, &[4], &[]).is_err());
        assert!(RectDomain::new(&[1.0, -1.0]).is_err());
        assert!(RectDomain::new(&[]).is_err());
    }

    #[test]
    fn interval_mesh() {
        let d = RectDomain::new(&[2.0]).unwrap();
        let mesh = StructuredMesh::build(&d, &[4], &[]).unwrap();
        assert_eq!(mesh.vertex_count(), 5);
        assert_eq!(mesh.element_count(), 4);
        let total: f64 = (0..4).map(|e| mesh.element_measure(e)).sum();
        assert!((total - 2.0).abs() < 1e-12);
    }
}
