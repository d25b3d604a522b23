use nalgebra::{DMatrix, DVector};
use parafeed::actuators::{
    constrained_minimum, orthogonality_constraints, poincare_constant, ActuatorBasis, ActuatorLayout, AuxiliaryBasis,
    HElement, ProjectionTarget,
};
use parafeed::discretization::{eigenpairs, DiscreteSystem, RectDomain, StructuredMesh};
use parafeed::experiments::{build_scenario, CoefficientPreset, Scenario};
use parafeed::feedback::FeedbackLaw;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn scenario(cells: usize, m: usize) -> Scenario {
    build_scenario(cells, m, CoefficientPreset::Autonomous, 0.1).unwrap()
}

fn random_element(rng: &mut ChaCha8Rng, basis: &ActuatorBasis) -> HElement {
    HElement {
        nodal: DVector::from_fn(basis.node_count(), |_, _| rng.gen_range(-1.0..1.0)),
        act: DVector::from_fn(basis.count(), |_, _| rng.gen_range(-1.0..1.0)),
    }
}

fn h_distance(basis: &ActuatorBasis, sys: &DiscreteSystem, a: &HElement, b: &HElement) -> f64 {
    basis.h_norm(sys, &a.sub(b))
}

/// Full Gram matrix of the space spanned by the hat functions and the indicators.
fn full_gram(basis: &ActuatorBasis, sys: &DiscreteSystem) -> DMatrix<f64> {
    let n = basis.node_count();
    let m = basis.count();
    let mut h = DMatrix::zeros(n + m, n + m);
    let dense_mass = DMatrix::from(sys.mass());
    h.view_mut((0, 0), (n, n)).copy_from(&dense_mass);
    h.view_mut((0, n), (n, m)).copy_from(basis.loads());
    h.view_mut((n, 0), (m, n)).copy_from(&basis.loads().transpose());
    h.view_mut((n, n), (m, m)).copy_from(basis.gram());
    h
}

fn stacked(e: &HElement) -> DVector<f64> {
    DVector::from_iterator(e.nodal.len() + e.act.len(), e.nodal.iter().chain(e.act.iter()).copied())
}

#[test]
fn actuator_area_is_independent_of_m() {
    let domain = RectDomain::unit_square();
    let one = ActuatorLayout::new(&domain, 1).unwrap();
    assert!((one.total_measure() - 1.0 / 12.0).abs() < 1e-12);
    for m in 2..5 {
        let layout = ActuatorLayout::new(&domain, m).unwrap();
        assert!((layout.total_measure() - 1.0 / 12.0).abs() < 1e-12);
        let sc = scenario(4, m);
        let area: f64 = (0..sc.basis.count()).map(|j| sc.basis.gram()[(j, j)]).sum();
        assert!((area - 1.0 / 12.0).abs() < 1e-12);
    }
}

#[test]
fn gram_is_diagonal_on_aligned_mesh() {
    let sc = scenario(6, 3);
    let g = sc.basis.gram();
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if i != j {
                assert!(g[(i, j)].abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unaligned_mesh_is_rejected() {
    let domain = RectDomain::unit_square();
    let layout = ActuatorLayout::new(&domain, 3).unwrap();
    let mesh = StructuredMesh::build(&domain, &[8, 8], &[]).unwrap();
    let sys = DiscreteSystem::assemble(&mesh, std::sync::Arc::new(CoefficientPreset::Autonomous), 0.1).unwrap();
    assert!(matches!(
        ActuatorBasis::build(&layout, &sys),
        Err(parafeed::Error::MeshNotAligned { .. })
    ));
}

#[test]
fn orthogonal_projection_examples() {
    let sc = scenario(6, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    for k in 0..basis.count() {
        let mut e = DVector::zeros(basis.count());
        e[k] = 1.0;
        let c = basis.project_orthogonal(&HElement::from_actuators(e.clone(), basis.node_count()));
        assert!((c - e).amax() < TOL);
    }
    // The hat function at the origin does not meet any actuator.
    let mut hat = DVector::zeros(basis.node_count());
    hat[0] = 1.0;
    assert_eq!(basis.coordinates(&hat).amax(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let y = random_element(&mut rng, basis);
        let c = basis.project_orthogonal(&y);
        let py = HElement::from_actuators(c, basis.node_count());
        assert!(basis.h_norm(sys, &py) <= basis.h_norm(sys, &y) + TOL);
        // The residual is orthogonal to every actuator.
        let r = y.sub(&py);
        assert!(basis.actuator_moments(&r).amax() < TOL);
        // Idempotence.
        let again = basis.project_orthogonal(&py);
        assert!((again - &py.act).amax() < TOL);
    }
}

#[test]
fn oblique_projections_are_idempotent_adjoint_and_fix_their_ranges() {
    let sc = scenario(6, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    let aux = AuxiliaryBasis::eigenfunctions(basis, sys).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let y = random_element(&mut rng, basis);
        let z = random_element(&mut rng, basis);
        for target in [ProjectionTarget::Actuators, ProjectionTarget::Auxiliary] {
            let once = aux.project(basis, sys, &y, target);
            let twice = aux.project(basis, sys, &once, target);
            assert!(h_distance(basis, sys, &once, &twice) <= TOL * basis.h_norm(sys, &y));
        }
        let pu = aux.project(basis, sys, &y, ProjectionTarget::Actuators);
        let pa = aux.project(basis, sys, &z, ProjectionTarget::Auxiliary);
        let lhs = basis.h_inner(sys, &pu, &z);
        let rhs = basis.h_inner(sys, &y, &pa);
        assert!((lhs - rhs).abs() <= TOL * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
    let u = HElement::from_actuators(DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]), basis.node_count());
    let pu = aux.project(basis, sys, &u, ProjectionTarget::Actuators);
    assert!(h_distance(basis, sys, &pu, &u) < TOL);
}

#[test]
fn adjointness_as_matrix_transpose() {
    let sc = scenario(4, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    let aux = AuxiliaryBasis::eigenfunctions(basis, sys).unwrap();
    let n = basis.node_count() + basis.count();
    let unit = |i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        HElement {
            nodal: v.rows(0, basis.node_count()).into_owned(),
            act: v.rows(basis.node_count(), basis.count()).into_owned(),
        }
    };
    let matrix = |target| {
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            p.set_column(i, &stacked(&aux.project(basis, sys, &unit(i), target)));
        }
        p
    };
    let pu = matrix(ProjectionTarget::Actuators);
    let pa = matrix(ProjectionTarget::Auxiliary);
    let h = full_gram(basis, sys);
    // (P_U y, z)_H = (y, P_aux z)_H for all y, z  <=>  P_U^T H = H P_aux.
    let diff = pu.transpose() * &h - &h * &pa;
    assert!(diff.amax() < TOL, "{}", diff.amax());
}

#[test]
fn projector_norm_matches_dense_svd() {
    let sc = scenario(4, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    let aux = AuxiliaryBasis::eigenfunctions(basis, sys).unwrap();
    let n = basis.node_count() + basis.count();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        let e = HElement {
            nodal: v.rows(0, basis.node_count()).into_owned(),
            act: v.rows(basis.node_count(), basis.count()).into_owned(),
        };
        p.set_column(i, &stacked(&aux.project(basis, sys, &e, ProjectionTarget::Auxiliary)));
    }
    let l = full_gram(basis, sys).cholesky().unwrap().l();
    // ||P|| in H equals the spectral norm of L^T P L^{-T}.
    let l_inv_t = l.clone().try_inverse().unwrap().transpose();
    let oracle = (l.transpose() * p * l_inv_t).singular_values().max();
    let norm = aux.projector_norm(basis);
    assert!((norm - oracle).abs() < 1e-8, "{norm} vs {oracle}");
    assert!(norm >= 1.0 - TOL);
}

#[test]
fn self_auxiliary_projector_is_orthogonal() {
    let sc = scenario(4, 3);
    let aux = AuxiliaryBasis::actuators(&sc.basis).unwrap();
    assert!((aux.projector_norm(&sc.basis) - 1.0).abs() < 1e-8);
    assert!(aux.spectral_bound(&sc.sys).is_err());
}

#[test]
fn monotonicity_bound_through_the_projector_norm() {
    let sc = scenario(6, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    let aux = AuxiliaryBasis::eigenfunctions(basis, sys).unwrap();
    let norm = aux.projector_norm(basis);
    let lambda = 100.0;
    let law = FeedbackLaw::scaled_projection(lambda).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let c = DVector::from_fn(basis.count(), |_, _| rng.gen_range(-1.0..1.0));
        let p = HElement::from_actuators(c.clone(), basis.node_count());
        let kp = HElement::from_actuators(law.control(&c).unwrap(), basis.node_count());
        let lhs = basis.h_inner(sys, &kp, &p);
        let proj = aux.project(basis, sys, &p, ProjectionTarget::Auxiliary);
        let bound = -lambda / (norm * norm) * basis.h_norm(sys, &proj).powi(2);
        assert!(lhs <= bound + TOL, "{lhs} > {bound}");
    }
}

#[test]
fn ill_conditioned_pairing_is_rejected() {
    let sc = scenario(4, 2);
    let (sys, basis) = (&sc.sys, &sc.basis);
    let pairs = eigenpairs(sys, 4).unwrap();
    let mut vectors = pairs.vectors.clone();
    let first = vectors.column(0).into_owned();
    vectors.set_column(1, &(&first * (1.0 + 1e-14)));
    let err = AuxiliaryBasis::from_eigenpairs(basis, sys, vectors, pairs.values.clone()).unwrap_err();
    assert!(matches!(err, parafeed::Error::DirectSumViolation { .. }));
}

#[test]
fn poincare_constant_grows_with_actuators() {
    let domain = RectDomain::unit_square();
    let mesh = StructuredMesh::build(&domain, &[12, 12], &[]).unwrap();
    let sys = DiscreteSystem::assemble(&mesh, std::sync::Arc::new(CoefficientPreset::Autonomous), 0.1).unwrap();
    let free = constrained_minimum(&sys, &DMatrix::zeros(sys.node_count(), 0)).unwrap();
    assert!((free - 1.0).abs() < 1e-6);
    let xi: Vec<f64> = (1..=3)
        .map(|m| {
            let sc = scenario(12, m);
            poincare_constant(&sc.basis, &sc.sys).unwrap()
        })
        .collect();
    assert!(free <= xi[0] && xi[0] <= xi[1] && xi[1] <= xi[2], "{xi:?}");
}

#[test]
fn constraint_on_eigenfunctions_gives_next_eigenvalue() {
    let domain = RectDomain::unit_square();
    let mesh = StructuredMesh::build(&domain, &[10, 10], &[]).unwrap();
    let sys = DiscreteSystem::assemble(&mesh, std::sync::Arc::new(CoefficientPreset::Autonomous), 0.1).unwrap();
    let pairs = eigenpairs(&sys, 6).unwrap();
    for k in [1, 2, 4] {
        let v = pairs.vectors.columns(0, k).into_owned();
        let xi = constrained_minimum(&sys, &orthogonality_constraints(&sys, &v)).unwrap();
        assert!((xi - pairs.values[k]).abs() < 1e-6, "k = {k}: {xi} vs {}", pairs.values[k]);
    }
    let dup = DMatrix::from_columns(&[pairs.vectors.column(0), pairs.vectors.column(0)]);
    assert!(matches!(
        constrained_minimum(&sys, &orthogonality_constraints(&sys, &dup)),
        Err(parafeed::Error::RankDeficient)
    ));
}
