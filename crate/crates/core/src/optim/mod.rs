//! Training engine: squared-error loss, Adam with cosine annealing, the
//! φ-only SAM family and the regularised baselines.

mod perturb;

pub use perturb::{estimate_fisher_diag, perturb_asam, perturb_fsam, perturb_sam, ZERO_GRAD_THRESHOLD};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::hybrid::{hybrid_forward, reduction_forward, ForwardOptions, HybridModel, Reduction};
use crate::nn::{BnMode, ParamVector};
use crate::tensor::{BatchStats, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamVariant {
    Sam,
    Asam,
    Fsam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub variant: SamVariant,
    pub rho: f64,
    #[serde(default = "default_fisher_damping")]
    pub fisher_damping: f64,
    #[serde(default = "default_threshold")]
    pub zero_grad_threshold: f64,
}

fn default_fisher_damping() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    ZERO_GRAD_THRESHOLD
}

impl SamConfig {
    pub fn new(variant: SamVariant, rho: f64) -> Self {
        SamConfig {
            variant,
            rho,
            fisher_damping: default_fisher_damping(),
            zero_grad_threshold: ZERO_GRAD_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.fisher_damping >= 0.0) {
            return Err(Error::config("fisher damping must be non-negative"));
        }
        Ok(())
    }

    /// φ-block perturbation for gradient `g` at weights `phi`.
    pub fn perturbation(&self, phi: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let thr = self.zero_grad_threshold;
        Ok(match self.variant {
            SamVariant::Sam => perturb_sam(g, self.rho, thr),
            SamVariant::Asam => perturb_asam(phi, g, self.rho, thr),
            SamVariant::Fsam => {
                let f = estimate_fisher_diag(g, self.fisher_damping);
                perturb_fsam(g, &f, self.rho, thr)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BatchMode {
    Full,
    Minibatch { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_final_lr")]
    pub final_lr: f64,
    pub iterations: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch: BatchMode,
}

fn default_final_lr() -> f64 {
    1e-6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> BatchMode {
    BatchMode::Full
}

impl OptimizerConfig {
    pub fn new(lr: f64, iterations: usize) -> Self {
        OptimizerConfig {
            lr,
            final_lr: default_final_lr(),
            iterations,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            batch: BatchMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.lr) {
            return Err(Error::config(format!(
                "need 0 < final_lr <= lr, got final_lr {} and lr {}",
                self.final_lr, self.lr
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if let BatchMode::Minibatch { size: 0 } = self.batch {
            return Err(Error::config("minibatch size must be positive"));
        }
        Ok(())
    }
}

/// `η_min + ½(η₀ − η_min)(1 + cos(π i / T))`.
pub fn cosine_lr(iteration: usize, cfg: &OptimizerConfig) -> f64 {
    let frac = iteration.min(cfg.iterations) as f64 / cfg.iterations as f64;
    cfg.final_lr + 0.5 * (cfg.lr - cfg.final_lr) * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMethod {
    Erm,
    L2reg,
    FregFnorm,
    FregReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub method: RegMethod,
    #[serde(default)]
    pub lambda: f64,
}

impl RegConfig {
    pub fn erm() -> Self {
        RegConfig {
            method: RegMethod::Erm,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            RegMethod::Erm if self.lambda != 0.0 => Err(Error::config("erm takes no coefficient")),
            _ if !(self.lambda >= 0.0) => Err(Error::config("regulariser coefficient must be >= 0")),
            _ => Ok(()),
        }
    }
}

/// Learning methods compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    L2reg,
    Freg,
    FregReduction,
    Sam,
    Asam,
    Fsam,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::L2reg,
        Method::Freg,
        Method::FregReduction,
        Method::Sam,
        Method::Asam,
        Method::Fsam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::L2reg => "l2reg",
            Method::Freg => "freg",
            Method::FregReduction => "freg-reduction",
            Method::Sam => "sam",
            Method::Asam => "asam",
            Method::Fsam => "fsam",
        }
    }

    /// Name of the swept hyperparameter, if any.
    pub fn hyper_name(self) -> Option<&'static str> {
        match self {
            Method::Erm => None,
            Method::L2reg | Method::Freg | Method::FregReduction => Some("lambda"),
            Method::Sam | Method::Asam | Method::Fsam => Some("rho"),
        }
    }

    /// Regulariser and perturbation settings for hyperparameter `value`.
    pub fn configure(self, value: Option<f64>, fisher_damping: f64) -> Result<(RegConfig, Option<SamConfig>)> {
        let need = || value.ok_or_else(|| Error::config(format!("method {} needs a hyperparameter", self.name())));
        let reg = |method, lambda| RegConfig { method, lambda };
        let sam = |variant, rho| {
            let mut s = SamConfig::new(variant, rho);
            s.fisher_damping = fisher_damping;
            s
        };
        let out = match self {
            Method::Erm => (RegConfig::erm(), None),
            Method::L2reg => (reg(RegMethod::L2reg, need()?), None),
            Method::Freg => (reg(RegMethod::FregFnorm, need()?), None),
            Method::FregReduction => (reg(RegMethod::FregReduction, need()?), None),
            Method::Sam => (RegConfig::erm(), Some(sam(SamVariant::Sam, need()?))),
            Method::Asam => (RegConfig::erm(), Some(sam(SamVariant::Asam, need()?))),
            Method::Fsam => (RegConfig::erm(), Some(sam(SamVariant::Fsam, need()?))),
        };
        out.0.validate()?;
        if let Some(s) = &out.1 {
            s.validate()?;
        }
        Ok(out)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Mean over the batch axis (axis 1 of time-major data) of the summed
/// squared error.
pub fn squared_error<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps != ts {
        return Err(TensorError::ShapeMismatch {
            op: "loss_mse",
            lhs: ps,
            rhs: ts,
        }
        .into());
    }
    let batch = batch_size(&ps)?;
    Ok(pred.sub(target)?.squared_norm().scale(1.0 / batch as f64))
}

fn batch_size(time_major: &[usize]) -> Result<usize> {
    match time_major.get(1) {
        Some(&b) if b > 0 && time_major[0] > 0 => Ok(b),
        _ => Err(TensorError::invalid("loss_mse", "empty batch").into()),
    }
}

/// Loss of the model on `(x, y)` with batch norm in evaluation mode.
pub fn loss_mse(model: &HybridModel, pv: &ParamVector, x: &Tensor, y: &Tensor) -> Result<f64> {
    batch_size(y.shape())?;
    let pred = crate::hybrid::hybrid_predict(model, pv, x)?;
    let tape = Tape::new();
    Ok(squared_error(tape.constant(pred), tape.constant(y.clone()))?.value().item()?)
}

pub fn reg_l2<'t>(phi: Var<'t>) -> Var<'t> {
    phi.squared_norm()
}

/// Mean over samples of `‖g(x)‖²`, where each trace entry holds a batch of
/// network outputs along axis 0.
pub fn reg_fnorm<'t>(g_outputs: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = g_outputs.first() else {
        return Err(TensorError::invalid("reg_fnorm", "empty sample set").into());
    };
    let mut total = first.squared_norm();
    let mut count = first.shape()[0];
    for g in &g_outputs[1..] {
        total = total.add(g.squared_norm())?;
        count += g.shape()[0];
    }
    if count == 0 {
        return Err(TensorError::invalid("reg_fnorm", "empty sample set").into());
    }
    Ok(total.scale(1.0 / count as f64))
}

/// Mean over samples of `‖h(x) − h'(x)‖²` for time-major predictions.
pub fn reg_reduction<'t>(full: Var<'t>, reduced: Var<'t>) -> Result<Var<'t>> {
    squared_error(full, reduced)
}

/// Adam moments over the flattened `θ ‖ φ` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam step applied in place to `params`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &OptimizerConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_perturbed: Option<f64>,
    pub reg: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub theta: Vec<f64>,
}

struct Evaluation {
    loss: f64,
    reg: f64,
    grad_theta: Vec<f64>,
    grad_phi: Vec<f64>,
    bn_stats: Vec<(usize, BatchStats)>,
}

fn full_perturbation(sam: &SamConfig, pv: &ParamVector, grad_phi: &[f64]) -> Result<Vec<f64>> {
    let mut eps = vec![0.0; pv.theta().len()];
    eps.extend(sam.perturbation(pv.phi(), grad_phi)?);
    Ok(eps)
}

/// Everything a training step needs besides the parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HybridModel,
    pub opt: OptimizerConfig,
    pub reg: RegConfig,
    pub sam: Option<SamConfig>,
    pub reduction: Reduction,
}

impl Trainer {
    pub fn new(model: HybridModel, opt: OptimizerConfig, reg: RegConfig, sam: Option<SamConfig>) -> Result<Self> {
        model.validate()?;
        opt.validate()?;
        reg.validate()?;
        if let Some(s) = &sam {
            s.validate()?;
        }
        Ok(Trainer {
            model,
            opt,
            reg,
            sam,
            reduction: Reduction::Identity,
        })
    }

    fn evaluate(
        &self,
        pv: &ParamVector,
        phi: &[f64],
        x: &Tensor,
        y: &Tensor,
        with_reg: bool,
    ) -> Result<Evaluation> {
        let tape = Tape::new();
        let theta_v = tape.param(Tensor::from_vec(pv.theta().to_vec()));
        let phi_v = tape.param(Tensor::from_vec(phi.to_vec()));
        let x_v = tape.constant(x.clone());
        let method = if with_reg { self.reg.method } else { RegMethod::Erm };
        let opts = ForwardOptions {
            bn: BnMode::Train,
            trace_g: method == RegMethod::FregFnorm,
        };
        let out = hybrid_forward(&self.model, pv, theta_v, phi_v, x_v, opts)?;
        let loss = squared_error(out.y, tape.constant(y.clone()))?;
        let reg = match method {
            RegMethod::Erm => None,
            RegMethod::L2reg => Some(reg_l2(phi_v)),
            RegMethod::FregFnorm => Some(reg_fnorm(&out.g_trace)?),
            RegMethod::FregReduction => {
                let red = reduction_forward(&self.model, pv, &self.reduction, theta_v, x_v)?;
                Some(reg_reduction(out.y, red)?)
            }
        };
        let (total, reg_value) = match reg {
            Some(r) => (loss.add(r.scale(self.reg.lambda))?, r.value().item()?),
            None => (loss, 0.0),
        };
        let loss_value = loss.value().item()?;
        let grads = tape.backward(total)?;
        Ok(Evaluation {
            loss: loss_value,
            reg: reg_value,
            grad_theta: grads.wrt(theta_v).into_data(),
            grad_phi: grads.wrt(phi_v).into_data(),
            bn_stats: out.bn_stats,
        })
    }

    /// Perturbation over the flattened `θ ‖ φ` vector that the next step on
    /// `(x, y)` would apply; `None` without SAM.
    pub fn ascent(&self, pv: &ParamVector, x: &Tensor, y: &Tensor) -> Result<Option<Vec<f64>>> {
        let Some(sam) = &self.sam else { return Ok(None) };
        let first = self.evaluate(pv, pv.phi(), x, y, false)?;
        Ok(Some(full_perturbation(sam, pv, &first.grad_phi)?))
    }

    /// One training iteration on `(x, y)`. The θ-block is never perturbed;
    /// Adam consumes the gradient taken at the perturbed point.
    pub fn step(
        &self,
        pv: &mut ParamVector,
        adam: &mut AdamState,
        x: &Tensor,
        y: &Tensor,
        iteration: usize,
    ) -> Result<StepMetrics> {
        let non_finite = |what: &str, v: f64| Error::NonFiniteLoss {
            iteration,
            detail: format!("{what} = {v} with θ = {:?}", pv.theta()),
        };
        let (loss, loss_perturbed, applied, bn_stats) = match &self.sam {
            None => {
                let e = self.evaluate(pv, pv.phi(), x, y, true)?;
                if !e.loss.is_finite() || !e.reg.is_finite() {
                    return Err(non_finite("loss", e.loss + e.reg));
                }
                (e.loss, None, e, None)
            }
            Some(sam) => {
                let first = self.evaluate(pv, pv.phi(), x, y, false)?;
                if !first.loss.is_finite() {
                    return Err(non_finite("loss", first.loss));
                }
                let eps = full_perturbation(sam, pv, &first.grad_phi)?;
                let nt = pv.theta().len();
                let shifted: Vec<f64> = pv.phi().iter().zip(&eps[nt..]).map(|(p, e)| p + e).collect();
                let second = self.evaluate(pv, &shifted, x, y, true)?;
                if !second.loss.is_finite() || !second.reg.is_finite() {
                    return Err(non_finite("perturbed loss", second.loss));
                }
                (first.loss, Some(second.loss), second, Some(first.bn_stats))
            }
        };
        let mut flat = pv.flatten();
        let grads: Vec<f64> = applied.grad_theta.iter().chain(&applied.grad_phi).copied().collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(non_finite("gradient norm", grads.iter().map(|g| g * g).sum::<f64>().sqrt()));
        }
        let lr = cosine_lr(iteration, &self.opt);
        adam.update(&mut flat, &grads, lr, &self.opt);
        self.model.scientific.project_theta(&mut flat[..applied.grad_theta.len()]);
        pv.set_flat(&flat)?;
        pv.apply_bn_stats(&bn_stats.unwrap_or(applied.bn_stats))?;
        let norm = |v: &[f64]| v.iter().map(|g| g * g).sum::<f64>().sqrt();
        Ok(StepMetrics {
            iteration,
            lr,
            loss,
            loss_perturbed,
            reg: applied.reg,
            grad_norm_theta: norm(&applied.grad_theta),
            grad_norm_phi: norm(&applied.grad_phi),
            theta: pv.theta().to_vec(),
        })
    }
}
