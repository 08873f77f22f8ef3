//! Time integration and spatial operators.
//!
//! Training unrolls fixed-step classical RK4 on the tape, so gradients reach
//! θ and φ through every stage. Data generation uses untaped Dormand–Prince
//! 5(4) with adaptive steps that land exactly on the sample grid.

mod rk45;

pub use rk45::{integrate_rk45, Rk45Options, Trajectory};

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Boundary, Var};
use crate::{Error, Result};

/// Output grid of a fixed-step unroll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationPlan {
    /// Spacing between returned states.
    pub dt: f64,
    /// Number of returned states (the initial state is excluded).
    pub n_steps: usize,
    /// RK4 steps taken per output interval.
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

impl IntegrationPlan {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        IntegrationPlan {
            dt,
            n_steps,
            substeps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_steps == 0 || self.substeps == 0 {
            return Err(Error::config(format!(
                "integration plan needs dt > 0 and at least one step, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One classical Runge–Kutta step, fully taped.
pub fn rk4_step<'t, F>(field: &F, state: Var<'t>, dt: f64) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(dt > 0.0) {
        return Err(Error::config(format!("rk4 step needs dt > 0, got {dt}")));
    }
    let k1 = field(state)?;
    let k2 = field(state.add(k1.scale(0.5 * dt))?)?;
    let k3 = field(state.add(k2.scale(0.5 * dt))?)?;
    let k4 = field(state.add(k3.scale(dt))?)?;
    let incr = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
    Ok(state.add(incr.scale(dt / 6.0))?)
}

/// Unrolls RK4 and stacks the states at `dt, 2dt, …, n·dt` along a new
/// leading axis.
pub fn integrate_fixed<'t, F>(field: &F, x0: Var<'t>, plan: &IntegrationPlan) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    plan.validate()?;
    let h = plan.dt / plan.substeps as f64;
    let mut framed_shape = vec![1];
    framed_shape.extend(x0.shape());
    let mut state = x0;
    let mut outputs = Vec::with_capacity(plan.n_steps);
    let mut step = 0;
    for _ in 0..plan.n_steps {
        for _ in 0..plan.substeps {
            state = rk4_step(field, state, h).map_err(|e| match e {
                Error::Tensor(t) => Error::Integration {
                    step,
                    msg: t.to_string(),
                },
                other => other,
            })?;
            if !state.value().is_finite() {
                return Err(Error::Integration {
                    step,
                    msg: "state became non-finite".into(),
                });
            }
            step += 1;
        }
        outputs.push(state.reshape(&framed_shape)?);
    }
    Ok(Var::concat(&outputs, 0)?)
}

/// Grid spacing on `[-1, 1]` with `d` points per axis.
pub fn grid_spacing(d: usize) -> f64 {
    2.0 / d as f64
}

/// Taped five-point Laplacian of `[batch, ch, d, d]` fields.
pub fn laplacian_5pt<'t>(field: Var<'t>, spacing: f64, boundary: Boundary) -> Result<Var<'t>> {
    Ok(field.laplacian(spacing, boundary)?)
}

/// Untaped Laplacian over `planes` stacked `d×d` grids.
pub fn laplacian_planes(x: &[f64], d: usize, spacing: f64, boundary: Boundary) -> Vec<f64> {
    kernels::laplacian(x, d, d, spacing, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn field<'t, F: Fn(Var<'t>) -> Result<Var<'t>>>(f: F) -> F {
        f
    }

    #[test]
    fn zero_field_keeps_state() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.3, -1.2]));
        let zero = field(|s| Ok(s.scale(0.0)));
        let y = rk4_step(&zero, x, 0.1).unwrap();
        assert_eq!(y.value().data(), &[0.3, -1.2]);
        let traj = integrate_fixed(&zero, x, &IntegrationPlan::new(0.1, 10)).unwrap();
        assert_eq!(traj.shape(), vec![10, 2]);
        for row in traj.value().data().chunks(2) {
            assert_eq!(row, &[0.3, -1.2]);
        }
    }

    #[test]
    fn exponential_step_matches_taylor_polynomial() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0]));
        let y = rk4_step(&field(Ok), x, 0.1).unwrap();
        let h: f64 = 0.1;
        let expect = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((y.value().data()[0] - expect).abs() < 1e-15);
        assert!((expect - 1.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn linear_field_commutes_with_scaling() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![0.0, -1.0, 2.0, -0.3]).unwrap());
        let lin = field(|s| Ok(s.matmul(a)?));
        let v = tape.constant(Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap());
        let y1 = rk4_step(&lin, v, 0.2).unwrap();
        let y2 = rk4_step(&lin, v.scale(3.0), 0.2).unwrap();
        for (p, q) in y1.value().data().iter().zip(y2.value().data()) {
            assert!((3.0 * p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0]));
        let blowup = field(|s| Ok(s.pow(2.0).scale(1e200)));
        let err = integrate_fixed(&blowup, x, &IntegrationPlan::new(1.0, 5)).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0, .. }), "{err}");
    }

    #[test]
    fn invalid_plan_is_rejected() {
        assert!(IntegrationPlan::new(0.0, 3).validate().is_err());
        assert!(IntegrationPlan::new(0.1, 0).validate().is_err());
    }

    #[test]
    fn laplacian_is_exact_on_quadratics() {
        let d = 8;
        let h = grid_spacing(d);
        let xi = |i: usize| -1.0 + (i as f64 + 0.5) * h;
        let data: Vec<f64> = (0..d * d).map(|k| xi(k / d).powi(2)).collect();
        let out = laplacian_planes(&data, d, h, Boundary::Neumann);
        for i in 1..d - 1 {
            for j in 1..d - 1 {
                assert!((out[i * d + j] - 2.0).abs() < 1e-9, "{}", out[i * d + j]);
            }
        }
    }
}
