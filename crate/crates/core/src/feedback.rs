//! Feedback laws acting on the actuator coordinates of the orthogonal
//! projection of the state.
//!
//! Every law maps the raw indicator coordinates `c` of `P_U y` to control
//! coefficients `u`; the control itself is `sum_j u_j Phi_j`.

use nalgebra::{DMatrix, DVector};

use crate::actuators::{ActuatorBasis, AuxiliaryBasis, AuxiliaryKind, HElement};
use crate::error::{Error, Result};
use crate::network::NetworkParams;

#[derive(Debug, Clone)]
pub enum FeedbackLaw {
    /// `u = -lambda c`.
    ScaledProjection { lambda: f64 },
    /// `-lambda P_U^{aux-perp} A^rho P_aux^{U-perp}`, stored as its coordinate gain.
    ObliqueFractional {
        lambda: f64,
        rho: f64,
        aux: Box<AuxiliaryBasis>,
        gain: DMatrix<f64>,
    },
    Neural { params: NetworkParams },
}

impl FeedbackLaw {
    /// `lambda >= 0` is accepted; `lambda = 0` gives the uncontrolled system.
    pub fn scaled_projection(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self::ScaledProjection { lambda })
    }

    pub fn oblique_fractional(basis: &ActuatorBasis, aux: AuxiliaryBasis, lambda: f64, rho: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        if !(rho.is_finite() && rho <= 1.0) {
            return Err(Error::InvalidInput(format!("rho must be at most 1, got {rho}")));
        }
        let m = basis.count();
        if aux.dim() != m {
            return Err(Error::InvalidInput("auxiliary dimension differs from actuator count".into()));
        }
        let powers = match aux.kind() {
            AuxiliaryKind::Eigenfunctions { eigenvalues, .. } => eigenvalues.map(|a| a.powf(rho)),
            AuxiliaryKind::Actuators if rho == 0.0 => DVector::from_element(m, 1.0),
            AuxiliaryKind::Actuators => {
                return Err(Error::InvalidInput(
                    "fractional powers need an eigenfunction auxiliary space".into(),
                ))
            }
        };
        // u = -lambda L^{-T} W diag(alpha^rho) L^{-1} G c
        let mut inner = DMatrix::zeros(m, m);
        for j in 0..m {
            let col = aux.solve_cross(&basis.gram().column(j).into_owned());
            inner.set_column(j, &col.component_mul(&powers));
        }
        let weighted = aux.gram() * inner;
        let mut gain = DMatrix::zeros(m, m);
        for j in 0..m {
            gain.set_column(j, &(aux.solve_cross_transpose(&weighted.column(j).into_owned()) * -lambda));
        }
        Ok(Self::ObliqueFractional {
            lambda,
            rho,
            aux: Box::new(aux),
            gain,
        })
    }

    pub fn neural(params: NetworkParams, basis: &ActuatorBasis) -> Result<Self> {
        if params.input_dim() != basis.count() {
            return Err(Error::Shape {
                layer: 1,
                detail: format!(
                    "network input width {} differs from actuator count {}",
                    params.input_dim(),
                    basis.count()
                ),
            });
        }
        Ok(Self::Neural { params })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ScaledProjection { .. } => "scaled_projection",
            Self::ObliqueFractional { .. } => "oblique_fractional",
            Self::Neural { .. } => "neural",
        }
    }

    /// Control coefficients for projection coordinates `c`.
    pub fn control(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::ScaledProjection { lambda } => Ok(c * -*lambda),
            Self::ObliqueFractional { gain, .. } => Ok(gain * c),
            Self::Neural { params } => params.forward(c),
        }
    }

    /// `du/dc`.
    pub fn control_jacobian(&self, c: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::ScaledProjection { lambda } => Ok(DMatrix::identity(c.len(), c.len()) * -*lambda),
            Self::ObliqueFractional { gain, .. } => Ok(gain.clone()),
            Self::Neural { params } => params.input_jacobian(c),
        }
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        match self {
            Self::Neural { params } => params.param_count(),
            _ => 0,
        }
    }

    /// `(du/dtheta)^T v`; empty for laws without trainable parameters.
    pub fn param_vjp(&self, c: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Neural { params } => params.param_vjp(c, v),
            _ => Ok(DVector::zeros(0)),
        }
    }

    /// Control coefficients and the control as an `H` element.
    pub fn evaluate(&self, basis: &ActuatorBasis, y: &HElement) -> Result<(DVector<f64>, HElement)> {
        let c = basis.project_orthogonal(y);
        let u = self.control(&c)?;
        let element = HElement::from_actuators(u.clone(), basis.node_count());
        Ok((u, element))
    }

    /// Control coefficients for a nodal state.
    pub fn evaluate_nodal(&self, basis: &ActuatorBasis, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.control(&basis.coordinates(y))
    }
}

/// Largest `(K(p), p)_H + target |p|_H^2` over coefficient samples `p`.
pub fn monotonicity_margin(
    law: &FeedbackLaw,
    basis: &ActuatorBasis,
    samples: &[DVector<f64>],
    target: f64,
) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for p in samples {
        let gp = basis.gram() * p;
        let value = law.control(p)?.dot(&gp) + target * p.dot(&gp);
        worst = worst.max(value);
    }
    Ok(worst)
}
