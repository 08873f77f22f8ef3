//! Hybrid models: a scientific vector field with unknown constants θ plus a
//! neural correction g_φ, integrated from the observed initial state.

use std::cell::RefCell;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nn::{BnMode, ConvBinding, MlpBinding, NeuralSpec, ParamVector, ThetaInit};
use crate::ode::{grid_spacing, integrate_fixed, IntegrationPlan};
use crate::tensor::{BatchStats, Boundary, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pendulum,
    Duffing,
    #[serde(alias = "reaction-diffusion")]
    ReactDiff,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Pendulum, TaskKind::ReactDiff, TaskKind::Duffing];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pendulum => "pendulum",
            TaskKind::Duffing => "duffing",
            TaskKind::ReactDiff => "reactdiff",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(TaskKind::Pendulum),
            "duffing" => Ok(TaskKind::Duffing),
            "reactdiff" | "reaction-diffusion" => Ok(TaskKind::ReactDiff),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

/// Known-form physics with unknown constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScientificPart {
    pub kind: TaskKind,
    /// Laplacian boundary rule (reaction-diffusion only).
    #[serde(default)]
    pub boundary: Boundary,
}

impl ScientificPart {
    pub fn new(kind: TaskKind) -> Self {
        ScientificPart {
            kind,
            boundary: Boundary::default(),
        }
    }

    pub fn theta_names(&self) -> &'static [&'static str] {
        match self.kind {
            TaskKind::Pendulum => &["omega"],
            TaskKind::Duffing => &["alpha"],
            TaskKind::ReactDiff => &["a", "b"],
        }
    }

    /// Admissible `(low, high)` per θ entry; the bounds are exclusive for
    /// the pendulum frequency and inclusive otherwise.
    pub fn theta_ranges(&self) -> Vec<(f64, f64)> {
        match self.kind {
            TaskKind::Pendulum => vec![(0.0, f64::INFINITY)],
            TaskKind::Duffing => vec![(f64::NEG_INFINITY, f64::INFINITY)],
            TaskKind::ReactDiff => vec![(0.0, f64::INFINITY); 2],
        }
    }

    /// Clamps each entry onto its admissible range. An exclusive bound maps
    /// to the nearest representable value inside it.
    pub fn project_theta(&self, theta: &mut [f64]) {
        for (v, (lo, hi)) in theta.iter_mut().zip(self.theta_ranges()) {
            let (lo, hi) = match self.kind {
                TaskKind::Pendulum => (lo.max(f64::MIN_POSITIVE), hi),
                _ => (lo, hi),
            };
            *v = v.clamp(lo, hi);
        }
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let ranges = self.theta_ranges();
        if theta.len() != ranges.len() {
            return Err(Error::Layout(format!(
                "{} expects {} θ entries, got {}",
                self.kind,
                ranges.len(),
                theta.len()
            )));
        }
        for ((name, &v), (lo, hi)) in self.theta_names().iter().zip(theta).zip(ranges) {
            let ok = match self.kind {
                TaskKind::Pendulum => v > lo && v < hi,
                _ => v >= lo && v <= hi,
            };
            if !ok || !v.is_finite() {
                return Err(Error::config(format!("θ `{name}` = {v} outside its admissible range")));
            }
        }
        Ok(())
    }

    /// Per-sample state shape.
    pub fn state_shape(&self, grid: usize) -> Vec<usize> {
        match self.kind {
            TaskKind::Pendulum | TaskKind::Duffing => vec![2],
            TaskKind::ReactDiff => vec![2, grid, grid],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// `dv/dt = f_θ(v) + g_φ(v)`, integrated from `v(0) = x`.
    #[default]
    AdditiveOde,
    /// `y = g_φ(x, f_θ(x))` with `f_θ(x)` the scientific-only trajectory.
    GeneralComposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub scientific: ScientificPart,
    pub neural: NeuralSpec,
    #[serde(default)]
    pub composition: Composition,
    pub integration: IntegrationPlan,
}

impl HybridModel {
    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        let m = self.integration.n_steps;
        match (self.scientific.kind, &self.neural, self.composition) {
            (TaskKind::Pendulum | TaskKind::Duffing, NeuralSpec::Mlp(s), Composition::AdditiveOde) => {
                if s.input_dim != 2 || s.output_dim != 1 {
                    return Err(Error::config(format!(
                        "additive {} net must map 2 -> 1, got {} -> {}",
                        self.scientific.kind, s.input_dim, s.output_dim
                    )));
                }
            }
            (TaskKind::Pendulum | TaskKind::Duffing, NeuralSpec::Mlp(s), Composition::GeneralComposition) => {
                if s.input_dim != 2 + 2 * m || s.output_dim != 2 * m {
                    return Err(Error::config(format!(
                        "composed net must map {} -> {}, got {} -> {}",
                        2 + 2 * m,
                        2 * m,
                        s.input_dim,
                        s.output_dim
                    )));
                }
            }
            (TaskKind::ReactDiff, NeuralSpec::Conv(s), Composition::AdditiveOde) => {
                s.validate()?;
                if s.in_channels != 2 || s.out_channels != 2 {
                    return Err(Error::config("reaction-diffusion conv net must map 2 -> 2 channels"));
                }
            }
            (kind, _, comp) => {
                return Err(Error::config(format!(
                    "unsupported network / composition {comp:?} for task {kind}"
                )))
            }
        }
        Ok(())
    }

    pub fn init_params(&self, theta_init: &ThetaInit, seed: u64) -> Result<ParamVector> {
        self.validate()?;
        let pv = ParamVector::init(self.scientific.theta_names(), &self.neural, theta_init, seed)?;
        self.scientific.check_theta(pv.theta())?;
        Ok(pv)
    }
}

/// A linear read-out applied to the scientific-only trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Identity,
    /// `A` stored `[state_dim, out_dim]`, applied as `s · A`.
    Linear { a: Tensor },
}

impl Reduction {
    pub fn check(&self, state_dim: usize, out_dim: usize) -> Result<()> {
        match self {
            Reduction::Identity if state_dim != out_dim => Err(Error::Layout(format!(
                "identity reduction maps R^{state_dim} to R^{state_dim}, outputs live in R^{out_dim}"
            ))),
            Reduction::Linear { a } if a.shape() != [state_dim, out_dim] => Err(Error::Layout(format!(
                "reduction map has shape {:?}, expected [{state_dim}, {out_dim}]",
                a.shape()
            ))),
            _ => Ok(()),
        }
    }

    fn apply<'t>(&self, traj: Var<'t>, out_dim: usize) -> Result<Var<'t>> {
        let shape = traj.shape();
        let state_dim: usize = shape[2..].iter().product();
        self.check(state_dim, out_dim)?;
        match self {
            Reduction::Identity => Ok(traj),
            Reduction::Linear { a } => {
                let rows = shape[0] * shape[1];
                let a = traj.tape().constant(a.clone());
                let out = traj.reshape(&[rows, state_dim])?.matmul(a)?;
                Ok(out.reshape(&[shape[0], shape[1], out_dim])?)
            }
        }
    }
}

/// Taped outputs of one forward pass.
pub struct Forward<'t> {
    /// `[m_y, batch, ...state]`.
    pub y: Var<'t>,
    /// Neural outputs at every state the solver visited (when requested).
    pub g_trace: Vec<Var<'t>>,
    /// Batch-norm statistics gathered in training mode.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn: BnMode,
    pub trace_g: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            bn: BnMode::Eval,
            trace_g: false,
        }
    }
}

enum Net<'t> {
    Mlp(MlpBinding<'t>),
    Conv(ConvBinding<'t>),
}

/// Vector fields of a model bound onto a tape.
pub struct BoundFields<'m, 't> {
    model: &'m HybridModel,
    coeffs: Vec<Var<'t>>,
    net: Option<Net<'t>>,
    trace: Option<RefCell<Vec<Var<'t>>>>,
}

impl<'m, 't> BoundFields<'m, 't> {
    /// `phi = None` binds the scientific part only.
    pub fn bind(
        model: &'m HybridModel,
        pv: &ParamVector,
        theta: Var<'t>,
        phi: Option<Var<'t>>,
        opts: ForwardOptions,
    ) -> Result<Self> {
        model.validate()?;
        let layout = pv.layout();
        let coeffs = model
            .scientific
            .theta_names()
            .iter()
            .map(|n| layout.bind(&format!("theta.{n}"), theta))
            .collect::<Result<_>>()?;
        let net = match (phi, &model.neural) {
            (None, _) => None,
            (Some(phi), NeuralSpec::Mlp(s)) => Some(Net::Mlp(MlpBinding::bind(s, layout, phi)?)),
            (Some(phi), NeuralSpec::Conv(s)) => Some(Net::Conv(ConvBinding::bind(s, pv, phi, opts.bn)?)),
        };
        Ok(BoundFields {
            model,
            coeffs,
            net,
            trace: opts.trace_g.then(|| RefCell::new(Vec::new())),
        })
    }

    fn check_state(&self, s: &[usize]) -> Result<()> {
        let ok = match self.model.scientific.kind {
            TaskKind::Pendulum | TaskKind::Duffing => s.len() == 2 && s[1] == 2,
            TaskKind::ReactDiff => s.len() == 4 && s[1] == 2 && s[2] == s[3],
        };
        if ok {
            Ok(())
        } else {
            Err(TensorError::invalid("hybrid_field", format!("unexpected state shape {s:?}")).into())
        }
    }

    /// Raw network output: `[batch, 1]` for the oscillators, the state shape
    /// for reaction-diffusion. `None` when no network is bound.
    pub fn g(&self, state: Var<'t>) -> Result<Option<Var<'t>>> {
        let out = match &self.net {
            None => return Ok(None),
            Some(Net::Mlp(m)) => m.forward(state)?,
            Some(Net::Conv(c)) => c.forward(state)?,
        };
        if let Some(t) = &self.trace {
            t.borrow_mut().push(out);
        }
        Ok(Some(out))
    }

    /// Scientific field with an optional additive correction to the
    /// acceleration (oscillators) or to both channels (reaction-diffusion).
    fn field_with(&self, s: Var<'t>, g: Option<Var<'t>>) -> Result<Var<'t>> {
        self.check_state(&s.shape())?;
        match self.model.scientific.kind {
            TaskKind::Pendulum | TaskKind::Duffing => {
                let v = s.slice(1, 0, 1)?;
                let vd = s.slice(1, 1, 1)?;
                let mut acc = match self.model.scientific.kind {
                    TaskKind::Pendulum => {
                        let k = self.coeffs[0].pow(2.0).scale(4.0 * PI * PI);
                        v.sin().mul(k)?.neg()
                    }
                    _ => v.mul(self.coeffs[0])?.neg(),
                };
                if let Some(g) = g {
                    acc = acc.add(g)?;
                }
                Ok(Var::concat(&[vd, acc], 1)?)
            }
            TaskKind::ReactDiff => {
                let d = s.shape()[2];
                let lap = s.laplacian(grid_spacing(d), self.model.scientific.boundary)?;
                let u = lap.slice(1, 0, 1)?.mul(self.coeffs[0])?;
                let w = lap.slice(1, 1, 1)?.mul(self.coeffs[1])?;
                let f = Var::concat(&[u, w], 1)?;
                match g {
                    Some(g) => Ok(f.add(g)?),
                    None => Ok(f),
                }
            }
        }
    }

    pub fn scientific(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.field_with(s, None)
    }

    /// The neural contribution embedded in the state shape.
    pub fn neural(&self, s: Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(g) = self.g(s)? else {
            return Ok(None);
        };
        Ok(Some(match self.model.scientific.kind {
            TaskKind::ReactDiff => g,
            _ => Var::concat(&[g.scale(0.0), g], 1)?,
        }))
    }

    pub fn combined(&self, s: Var<'t>) -> Result<Var<'t>> {
        let g = self.g(s)?;
        self.field_with(s, g)
    }

    fn take_trace(&self) -> Vec<Var<'t>> {
        self.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }

    fn take_stats(&self) -> Vec<(usize, BatchStats)> {
        match &self.net {
            Some(Net::Conv(c)) => c.take_stats(),
            _ => Vec::new(),
        }
    }
}

/// `h(x) = g(x, f(x))`.
pub fn compose<'t, F, G>(x: Var<'t>, f: F, g: G) -> Result<Var<'t>>
where
    F: FnOnce(Var<'t>) -> Result<Var<'t>>,
    G: FnOnce(Var<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let fx = f(x)?;
    g(x, fx)
}

/// `[m, batch, k]` to `[batch, m·k]`.
fn time_to_batch_major<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let s = y.shape();
    let parts = (0..s[0])
        .map(|t| Ok(y.slice(0, t, 1)?.reshape(&[s[1], s[2]])?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&parts, 1)?)
}

/// `[batch, m·k]` to `[m, batch, k]`.
fn batch_to_time_major<'t>(z: Var<'t>, m: usize, k: usize) -> Result<Var<'t>> {
    let b = z.shape()[0];
    let parts = (0..m)
        .map(|t| Ok(z.slice(1, t * k, k)?.reshape(&[1, b, k])?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&parts, 0)?)
}

/// Taped hybrid forward pass with θ and φ given as separate tape leaves.
pub fn hybrid_forward<'t>(
    model: &HybridModel,
    pv: &ParamVector,
    theta: Var<'t>,
    phi: Var<'t>,
    x: Var<'t>,
    opts: ForwardOptions,
) -> Result<Forward<'t>> {
    let fields = BoundFields::bind(model, pv, theta, Some(phi), opts)?;
    let y = match model.composition {
        Composition::AdditiveOde => integrate_fixed(&|s| fields.combined(s), x, &model.integration)?,
        Composition::GeneralComposition => {
            let plan = model.integration;
            compose(
                x,
                |x| integrate_fixed(&|s| fields.scientific(s), x, &plan),
                |x, f| {
                    let input = Var::concat(&[x, time_to_batch_major(f)?], 1)?;
                    let out = fields.g(input)?.expect("network is bound");
                    batch_to_time_major(out, plan.n_steps, 2)
                },
            )?
        }
    };
    Ok(Forward {
        y,
        g_trace: fields.take_trace(),
        bn_stats: fields.take_stats(),
    })
}

/// Taped scientific-only forward pass followed by the reduction map.
pub fn reduction_forward<'t>(
    model: &HybridModel,
    pv: &ParamVector,
    reduction: &Reduction,
    theta: Var<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let fields = BoundFields::bind(model, pv, theta, None, ForwardOptions::default())?;
    let traj = integrate_fixed(&|s| fields.scientific(s), x, &model.integration)?;
    let out_dim = x.shape()[1..].iter().product();
    reduction.apply(traj, out_dim)
}

/// Prediction `[m_y, batch, ...state]` from initial states `[batch, ...state]`,
/// with batch norm in evaluation mode.
pub fn hybrid_predict(model: &HybridModel, pv: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
    let phi = tape.constant(Tensor::from_vec(pv.phi().to_vec()));
    let xv = tape.constant(x.clone());
    let out = hybrid_forward(model, pv, theta, phi, xv, ForwardOptions::default())?;
    let y = out.y.value();
    Ok((*y).clone())
}

pub fn reduction_predict(
    model: &HybridModel,
    pv: &ParamVector,
    reduction: &Reduction,
    x: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
    let xv = tape.constant(x.clone());
    let y = reduction_forward(model, pv, reduction, theta, xv)?;
    let y = y.value();
    Ok((*y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvNetSpec, MlpSpec};
    use crate::tensor::Padding;

    fn mlp_model(kind: TaskKind, dt: f64, m: usize) -> HybridModel {
        HybridModel {
            scientific: ScientificPart::new(kind),
            neural: NeuralSpec::Mlp(MlpSpec::new(2, vec![16, 16], 1)),
            composition: Composition::AdditiveOde,
            integration: IntegrationPlan::new(dt, m),
        }
    }

    fn rd_model(m: usize) -> HybridModel {
        HybridModel {
            scientific: ScientificPart::new(TaskKind::ReactDiff),
            neural: NeuralSpec::Conv(ConvNetSpec {
                in_channels: 2,
                hidden_channels: vec![4],
                out_channels: 2,
                kernel_size: 3,
                batchnorm: true,
                padding: Padding::Zero,
            }),
            composition: Composition::AdditiveOde,
            integration: IntegrationPlan::new(0.1, m),
        }
    }

    fn params(model: &HybridModel, theta: &[f64]) -> ParamVector {
        model
            .init_params(&ThetaInit::Fixed { values: theta.to_vec() }, 3)
            .unwrap()
    }

    fn eval_field(model: &HybridModel, pv: &ParamVector, state: Tensor, with_net: bool) -> Tensor {
        let tape = Tape::new();
        let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
        let phi = tape.constant(Tensor::from_vec(pv.phi().to_vec()));
        let f = BoundFields::bind(model, pv, theta, with_net.then_some(phi), ForwardOptions::default()).unwrap();
        let out = f.combined(tape.constant(state)).unwrap();
        let v = out.value();
        (*v).clone()
    }

    fn state2(v: f64, vd: f64) -> Tensor {
        Tensor::new(vec![1, 2], vec![v, vd]).unwrap()
    }

    #[test]
    fn pendulum_field_examples() {
        let model = mlp_model(TaskKind::Pendulum, 0.2, 10);
        let pv = params(&model, &[2.0 / 3.0]);
        assert_eq!(eval_field(&model, &pv, state2(0.0, 1.0), false).data(), &[1.0, 0.0]);
        let acc = eval_field(&model, &pv, state2(PI / 2.0, 0.0), false).data()[1];
        let expect = -(4.0 * PI / 3.0).powi(2);
        assert!((acc - expect).abs() < 1e-12);
        assert!((acc + 17.546).abs() < 1e-3);
        let tiny = params(&model, &[1e-12]);
        let f = eval_field(&model, &tiny, state2(0.7, -0.3), false);
        assert_eq!(f.data()[0], -0.3);
        assert!(f.data()[1].abs() < 1e-20);
    }

    #[test]
    fn duffing_field_examples() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 10);
        let pv = params(&model, &[1.0]);
        assert_eq!(eval_field(&model, &pv, state2(1.0, 0.0), false).data(), &[0.0, -1.0]);
        assert_eq!(eval_field(&model, &pv, state2(0.0, 0.4), false).data(), &[0.4, 0.0]);
    }

    #[test]
    fn duffing_with_true_residual_reproduces_data_dynamics() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 10);
        let pv = params(&model, &[1.0]);
        let tape = Tape::new();
        let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
        let f = BoundFields::bind(&model, &pv, theta, None, ForwardOptions::default()).unwrap();
        let s = tape.constant(Tensor::new(vec![3, 2], vec![0.5, 0.1, -0.8, 0.0, 1.2, -0.4]).unwrap());
        let cube = s.slice(1, 0, 1).unwrap().pow(3.0);
        let out = f.field_with(s, Some(cube)).unwrap();
        for (row, (v, vd)) in out.value().data().chunks(2).zip([(0.5, 0.1), (-0.8, 0.0), (1.2, -0.4)]) {
            assert_eq!(row[0], vd);
            let expect: f64 = -v + v * v * v;
            assert!((row[1] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn reactdiff_constant_state_and_frozen_field() {
        let model = rd_model(5);
        let pv = params(&model, &[0.001, 0.005]);
        let flat = Tensor::full(&[2, 2, 6, 6], 0.37);
        assert!(eval_field(&model, &pv, flat, false).data().iter().all(|v| *v == 0.0));
        let zero = params(&model, &[0.0, 0.0]);
        let rough = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        assert!(eval_field(&model, &zero, rough, false).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reactdiff_with_true_reaction_matches_pde_right_hand_side() {
        let (a, b, kappa) = (0.001, 0.005, 0.005);
        let model = rd_model(1);
        let pv = params(&model, &[a, b]);
        let d = 5;
        let data: Vec<f64> = (0..2 * d * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let tape = Tape::new();
        let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
        let f = BoundFields::bind(&model, &pv, theta, None, ForwardOptions::default()).unwrap();
        let s = tape.constant(Tensor::new(vec![1, 2, d, d], data.clone()).unwrap());
        let u = s.slice(1, 0, 1).unwrap();
        let v = s.slice(1, 1, 1).unwrap();
        let ru = u.sub(u.pow(3.0)).unwrap().add_scalar(-kappa).sub(v).unwrap();
        let rv = u.sub(v).unwrap();
        let g = Var::concat(&[ru, rv], 1).unwrap();
        let out = f.field_with(s, Some(g)).unwrap().value();

        let h = grid_spacing(d);
        let lap = crate::ode::laplacian_planes(&data, d, h, Boundary::Neumann);
        let n = d * d;
        for k in 0..n {
            let (uu, vv) = (data[k], data[n + k]);
            let du = a * lap[k] + uu - uu.powi(3) - kappa - vv;
            let dv = b * lap[n + k] + uu - vv;
            assert!((out.data()[k] - du).abs() < 1e-12);
            assert!((out.data()[n + k] - dv).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_field_is_additive() {
        let model = mlp_model(TaskKind::Pendulum, 0.2, 10);
        let pv = params(&model, &[0.8]);
        let tape = Tape::new();
        let theta = tape.constant(Tensor::from_vec(pv.theta().to_vec()));
        let phi = tape.constant(Tensor::from_vec(pv.phi().to_vec()));
        let f = BoundFields::bind(&model, &pv, theta, Some(phi), ForwardOptions::default()).unwrap();
        let s = tape.constant(Tensor::new(vec![4, 2], vec![0.1, 0.5, -1.0, 0.2, 0.9, -0.7, 0.0, 0.0]).unwrap());
        let total = f.combined(s).unwrap().value();
        let parts = f.scientific(s).unwrap().add(f.neural(s).unwrap().unwrap()).unwrap().value();
        for (p, q) in total.data().iter().zip(parts.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn small_amplitude_pendulum_has_linear_period() {
        let omega = 2.0 / 3.0;
        let model = mlp_model(TaskKind::Pendulum, 0.005, 600);
        let mut pv = params(&model, &[omega]);
        pv.phi_mut().fill(0.0);
        let y = hybrid_predict(&model, &pv, &state2(1e-3, 0.0)).unwrap();
        let v: Vec<f64> = y.data().chunks(2).map(|r| r[0]).collect();
        // Upward zero crossings, linearly interpolated.
        let crossings: Vec<f64> = (1..v.len())
            .filter(|&i| v[i - 1] < 0.0 && v[i] >= 0.0)
            .map(|i| 0.005 * (i as f64 + v[i - 1] / (v[i - 1] - v[i])))
            .collect();
        assert!(crossings.len() >= 2);
        let period = crossings[1] - crossings[0];
        assert!((period * omega - 1.0).abs() < 0.01, "period {period}");
    }

    #[test]
    fn zero_total_field_repeats_initial_state() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 4);
        let mut pv = params(&model, &[0.0]);
        pv.phi_mut().fill(0.0);
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.0, -0.6, 0.0]).unwrap();
        let y = hybrid_predict(&model, &pv, &x).unwrap();
        assert_eq!(y.shape(), &[4, 2, 2]);
        for step in y.data().chunks(4) {
            assert_eq!(step, x.data());
        }
    }

    #[test]
    fn zeroed_phi_prediction_equals_reduction() {
        for (model, theta, x) in [
            (
                mlp_model(TaskKind::Pendulum, 0.2, 10),
                vec![0.7],
                Tensor::new(vec![2, 2], vec![0.4, -0.2, 1.0, 0.3]).unwrap(),
            ),
            (
                rd_model(3),
                vec![0.002, 0.004],
                Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| (i as f64 * 0.13).cos()).collect()).unwrap(),
            ),
        ] {
            let mut pv = params(&model, &theta);
            pv.phi_mut().fill(0.0);
            let full = hybrid_predict(&model, &pv, &x).unwrap();
            let red = reduction_predict(&model, &pv, &Reduction::Identity, &x).unwrap();
            assert_eq!(full, red);
        }
    }

    #[test]
    fn duffing_reduction_is_harmonic() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 10);
        let pv = params(&model, &[1.0]);
        let y = reduction_predict(&model, &pv, &Reduction::Identity, &state2(1.0, 0.0)).unwrap();
        for (k, row) in y.data().chunks(2).enumerate() {
            let t = 0.1 * (k + 1) as f64;
            assert!((row[0] - t.cos()).abs() < 1e-6);
            assert!((row[1] + t.sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_reduction_shape_guard() {
        assert!(Reduction::Identity.check(2, 3).is_err());
        assert!(Reduction::Identity.check(2, 2).is_ok());
        let a = Reduction::Linear { a: Tensor::zeros(&[2, 3]) };
        assert!(a.check(2, 3).is_ok());
        assert!(a.check(3, 2).is_err());
    }

    #[test]
    fn linear_reduction_maps_every_state() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 3);
        let pv = params(&model, &[1.0]);
        let x = state2(0.5, 0.0);
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let swapped = reduction_predict(&model, &pv, &Reduction::Linear { a }, &x).unwrap();
        let plain = reduction_predict(&model, &pv, &Reduction::Identity, &x).unwrap();
        for (p, q) in plain.data().chunks(2).zip(swapped.data().chunks(2)) {
            assert_eq!((p[0], p[1]), (q[1], q[0]));
        }
    }

    #[test]
    fn gradients_reach_theta_and_phi() {
        for model in [mlp_model(TaskKind::Pendulum, 0.2, 5), rd_model(2)] {
            let theta0 = if model.scientific.kind == TaskKind::ReactDiff {
                vec![0.01, 0.02]
            } else {
                vec![0.6]
            };
            let pv = params(&model, &theta0);
            let x = match model.scientific.kind {
                TaskKind::ReactDiff => {
                    Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap()
                }
                _ => Tensor::new(vec![3, 2], vec![0.5, 0.1, -0.4, 0.3, 1.0, -1.0]).unwrap(),
            };
            let tape = Tape::new();
            let theta = tape.param(Tensor::from_vec(pv.theta().to_vec()));
            let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
            let opts = ForwardOptions {
                bn: BnMode::Train,
                trace_g: false,
            };
            let out = hybrid_forward(&model, &pv, theta, phi, tape.constant(x), opts).unwrap();
            let g = tape.backward(out.y.squared_norm()).unwrap();
            assert!(g.wrt(theta).data().iter().all(|v| *v != 0.0));
            assert!(g.wrt(phi).squared_norm() > 0.0);
        }
    }

    #[test]
    fn trace_collects_every_stage() {
        let model = mlp_model(TaskKind::Duffing, 0.1, 3);
        let pv = params(&model, &[1.0]);
        let tape = Tape::new();
        let theta = tape.param(Tensor::from_vec(pv.theta().to_vec()));
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let opts = ForwardOptions {
            bn: BnMode::Train,
            trace_g: true,
        };
        let out = hybrid_forward(&model, &pv, theta, phi, tape.constant(state2(0.1, 0.2)), opts).unwrap();
        assert_eq!(out.g_trace.len(), 3 * 4);
        assert!(out.bn_stats.is_empty());
    }

    #[test]
    fn general_composition_wires_g_of_x_and_f() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let h = compose(
            x,
            |x| Ok(x.scale(3.0)),
            |x, fx| Ok(x.mul(fx)?.add_scalar(1.0)),
        )
        .unwrap();
        assert_eq!(h.value().data(), &[4.0, 13.0]);
    }

    #[test]
    fn general_composition_model_predicts_time_major() {
        let m = 4;
        let model = HybridModel {
            scientific: ScientificPart::new(TaskKind::Duffing),
            neural: NeuralSpec::Mlp(MlpSpec::new(2 + 2 * m, vec![8], 2 * m)),
            composition: Composition::GeneralComposition,
            integration: IntegrationPlan::new(0.1, m),
        };
        let mut pv = params(&model, &[1.0]);
        // A single linear layer that copies f(x) through.
        pv.phi_mut().fill(0.0);
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.2]).unwrap();
        let y = hybrid_predict(&model, &pv, &x).unwrap();
        assert_eq!(y.shape(), &[m, 2, 2]);
        assert!(y.data().iter().all(|v| *v == 0.0));

        let tape = Tape::new();
        let f = tape.constant(reduction_predict(&model, &pv, &Reduction::Identity, &x).unwrap());
        let flat = time_to_batch_major(f).unwrap();
        assert_eq!(flat.shape(), vec![2, 2 * m]);
        let back = batch_to_time_major(flat, m, 2).unwrap();
        assert_eq!(*back.value(), *f.value());
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let mut model = mlp_model(TaskKind::Pendulum, 0.2, 10);
        model.neural = NeuralSpec::Mlp(MlpSpec::new(2, vec![8], 2));
        assert!(model.validate().is_err());
        let mut rd = rd_model(2);
        rd.scientific.kind = TaskKind::Duffing;
        assert!(rd.validate().is_err());
    }

    #[test]
    fn theta_range_checks() {
        let p = ScientificPart::new(TaskKind::Pendulum);
        assert!(p.check_theta(&[0.0]).is_err());
        assert!(p.check_theta(&[0.5]).is_ok());
        let r = ScientificPart::new(TaskKind::ReactDiff);
        assert!(r.check_theta(&[0.0, 0.1]).is_ok());
        assert!(r.check_theta(&[-0.1, 0.1]).is_err());
        assert!(r.check_theta(&[0.1]).is_err());
        let mut th = [-0.1, 0.2];
        r.project_theta(&mut th);
        assert_eq!(th, [0.0, 0.2]);
        assert!(r.check_theta(&th).is_ok());
        let mut w = [-3.0];
        p.project_theta(&mut w);
        assert!(p.check_theta(&w).is_ok());
    }
}
