//! θ-only fits with the neural part replaced by a known closed-form residual.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrueParams};
use crate::ode::{integrate_fixed, IntegrationPlan};
use crate::optim::{cosine_lr, squared_error, AdamState, OptimizerConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "residual", rename_all = "kebab-case")]
pub enum KnownResidual {
    /// `β v³` added to the Duffing acceleration.
    DuffingCubic { beta: f64 },
}

impl KnownResidual {
    /// The residual the data generator used, when there is one.
    pub fn exact(params: &TrueParams) -> Option<Self> {
        match *params {
            TrueParams::Duffing { beta, damping, .. } if damping == 0.0 => {
                Some(KnownResidual::DuffingCubic { beta })
            }
            _ => None,
        }
    }
}

fn residual_field<'t>(res: KnownResidual, theta: Var<'t>) -> impl Fn(Var<'t>) -> Result<Var<'t>> {
    let KnownResidual::DuffingCubic { beta } = res;
    move |s| {
        let v = s.slice(1, 0, 1)?;
        let vd = s.slice(1, 1, 1)?;
        let acc = v.mul(theta)?.neg().add(v.pow(3.0).scale(beta))?;
        Ok(Var::concat(&[vd, acc], 1)?)
    }
}

/// Trains θ alone with Adam on `data`; returns the final θ.
pub fn fit_theta_with_residual(
    data: &Dataset,
    residual: KnownResidual,
    theta0: &[f64],
    plan: &IntegrationPlan,
    opt: &OptimizerConfig,
) -> Result<Vec<f64>> {
    opt.validate()?;
    if theta0.len() != 1 {
        return Err(Error::Layout(format!("expected one θ entry, got {}", theta0.len())));
    }
    let mut theta = theta0.to_vec();
    let mut adam = AdamState::new(1);
    for i in 0..opt.iterations {
        let tape = Tape::new();
        let th = tape.param(Tensor::from_vec(theta.clone()));
        let field = residual_field(residual, th);
        let x = tape.constant(data.x.clone());
        let pred = integrate_fixed(&field, x, plan)?;
        let loss = squared_error(pred, tape.constant(data.y.clone()))?;
        let l = loss.value().item()?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: i,
                detail: format!("θ = {theta:?}"),
            });
        }
        let g = tape.backward(loss)?.wrt(th).into_data();
        adam.update(&mut theta, &g, cosine_lr(i, opt), opt);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clean, TaskSpec};
    use crate::hybrid::TaskKind;

    #[test]
    fn recovers_alpha_on_a_small_clean_set() {
        let mut spec = TaskSpec::preset(TaskKind::Duffing);
        spec.splits.train = 8;
        spec.splits.val = 1;
        spec.splits.test = 1;
        spec.noise_std = 0.0;
        let data = generate_clean(&spec, 3).unwrap();
        let res = KnownResidual::exact(&spec.params).unwrap();
        let plan = IntegrationPlan::new(spec.dt(), spec.m_y);
        let th = fit_theta_with_residual(&data.train, res, &[0.6], &plan, &OptimizerConfig::new(0.05, 300)).unwrap();
        assert!((th[0] - 1.0).abs() < 1e-3, "{th:?}");
    }
}
