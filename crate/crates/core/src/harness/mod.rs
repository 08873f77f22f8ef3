//! Experiment orchestration: configs and presets, multi-seed runs, model
//! selection, sweeps, reports and checkpoints.

mod checkpoint;
mod oracle;
mod plot;
mod report;
mod run;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::hybrid::{Composition, HybridModel, Reduction, ScientificPart, TaskKind};
use crate::nn::{ConvNetSpec, MlpSpec, NeuralSpec, ThetaInit};
use crate::ode::IntegrationPlan;
use crate::optim::{Method, OptimizerConfig};
use crate::tensor::Padding;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use oracle::{fit_theta_with_residual, KnownResidual};
pub use report::{
    aggregate, emit_report, emit_table, load_report, select, sweep, Aggregate, DataSummary, RunReport,
    Selected, Stats, SweepRow, SweepTable, TableScale, REPORT_FORMAT,
};
pub use run::{
    advance, complete, finish, run_cell, run_experiment, run_experiment_with_data, test_metrics, CellId,
    CellRecord, CellState, CheckpointPlan, CurvePoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::config(format!("unknown profile `{s}` (desk | paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How one cell per (method, seed) is picked from the hyperparameter grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Minimal θ-RMSE against the known truth. Uses the ground truth, so it
    /// is an oracle protocol rather than a deployable one.
    #[default]
    BestThetaError,
    BestValLoss,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::BestThetaError => "best-theta-error",
            SelectionMode::BestValLoss => "best-val-loss",
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-theta-error" => Ok(SelectionMode::BestThetaError),
            "best-val-loss" => Ok(SelectionMode::BestValLoss),
            _ => Err(Error::config(format!("unknown selection mode `{s}`"))),
        }
    }
}

/// Hyperparameter grids, one per hyperparameter family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    /// `ρ_φ` for sam / asam / fsam.
    pub rho: Vec<f64>,
    /// `λ_p` for l2reg.
    pub lambda_l2: Vec<f64>,
    /// `λ_f` for both freg forms.
    pub lambda_freg: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        let lambdas = vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0];
        Grids {
            rho: vec![0.01, 0.05, 0.1, 0.5],
            lambda_l2: lambdas.clone(),
            lambda_freg: lambdas,
        }
    }
}

impl Grids {
    /// Values for `method` in first-seen order with duplicates removed;
    /// `[None]` for methods without a hyperparameter.
    pub fn values(&self, method: Method) -> Vec<Option<f64>> {
        let raw = match method {
            Method::Erm => return vec![None],
            Method::L2reg => &self.lambda_l2,
            Method::Freg | Method::FregReduction => &self.lambda_freg,
            Method::Sam | Method::Asam | Method::Fsam => &self.rho,
        };
        let mut out: Vec<f64> = Vec::new();
        for &v in raw {
            if !out.iter().any(|u| u.to_bits() == v.to_bits()) {
                out.push(v);
            }
        }
        out.into_iter().map(Some).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub profile: Profile,
    pub task: TaskSpec,
    pub model: HybridModel,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub grids: Grids,
    pub optimizer: OptimizerConfig,
    pub theta_init: ThetaInit,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub noise_seed: u64,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Iterations between logged curve points.
    pub log_interval: usize,
    #[serde(default = "one")]
    pub fisher_damping: f64,
    /// Linear map of the reduction used by the reduction form of freg.
    #[serde(default)]
    pub reduction: Reduction,
    /// Departures from the reference protocol, copied into every report.
    #[serde(default)]
    pub deviations: Vec<String>,
}

fn one() -> f64 {
    1.0
}

/// Six methods compared in the main table.
pub const TABLE_METHODS: [Method; 6] = [
    Method::Erm,
    Method::L2reg,
    Method::Freg,
    Method::Sam,
    Method::Asam,
    Method::Fsam,
];

/// Network of the hybrid model for each task.
pub fn default_neural(kind: TaskKind) -> NeuralSpec {
    match kind {
        TaskKind::Pendulum | TaskKind::Duffing => NeuralSpec::Mlp(MlpSpec::new(2, vec![128, 128], 1)),
        TaskKind::ReactDiff => NeuralSpec::Conv(ConvNetSpec {
            in_channels: 2,
            hidden_channels: vec![16, 16],
            out_channels: 2,
            kernel_size: 3,
            batchnorm: true,
            padding: Padding::Zero,
        }),
    }
}

/// θ drawn uniformly from `[0.5 θ*, 1.5 θ*]` per component.
pub fn default_theta_init(task: &TaskSpec) -> ThetaInit {
    let truth = task.params.theta();
    ThetaInit::Uniform {
        low: truth.iter().map(|t| 0.5 * t).collect(),
        high: truth.iter().map(|t| 1.5 * t).collect(),
    }
}

/// RK4 at the observation spacing, one substep.
pub fn default_model(task: &TaskSpec) -> HybridModel {
    let kind = task.kind();
    HybridModel {
        scientific: ScientificPart {
            kind,
            boundary: task.boundary,
        },
        neural: default_neural(kind),
        composition: Composition::AdditiveOde,
        integration: IntegrationPlan::new(task.dt(), task.m_y),
    }
}

impl ExperimentConfig {
    /// Reference protocol: lr 1e-4, 20000 full-batch iterations, five seeds.
    pub fn paper(kind: TaskKind) -> Self {
        let task = TaskSpec::preset(kind);
        ExperimentConfig {
            name: format!("{kind}-paper"),
            profile: Profile::Paper,
            model: default_model(&task),
            methods: TABLE_METHODS.to_vec(),
            grids: Grids::default(),
            optimizer: OptimizerConfig::new(1e-4, 20_000),
            theta_init: default_theta_init(&task),
            seeds: (0..5).collect(),
            data_seed: 1,
            noise_seed: 2,
            selection: SelectionMode::BestThetaError,
            log_interval: 500,
            fisher_damping: 1.0,
            reduction: Reduction::Identity,
            deviations: Vec::new(),
            task,
        }
    }

    /// Scaled-down protocol that fits on a single core. Every departure from
    /// [`ExperimentConfig::paper`] is listed in `deviations`.
    pub fn desk(kind: TaskKind) -> Self {
        let mut cfg = ExperimentConfig::paper(kind);
        cfg.name = format!("{kind}-desk");
        cfg.profile = Profile::Desk;
        let mut dev = Vec::new();
        match kind {
            TaskKind::Pendulum => {
                cfg.optimizer = OptimizerConfig::new(1e-3, 4000);
                dev.push("iterations 20000 -> 4000".to_string());
                dev.push("learning rate 1e-4 -> 1e-3".to_string());
            }
            TaskKind::Duffing => {
                cfg.optimizer = OptimizerConfig::new(1e-3, 4000);
                dev.push("iterations 20000 -> 4000".to_string());
                dev.push("learning rate 1e-4 -> 1e-3".to_string());
            }
            TaskKind::ReactDiff => {
                cfg.task.grid = 16;
                cfg.task.splits.train = 8;
                cfg.task.splits.val = 8;
                cfg.task.splits.test = 8;
                cfg.optimizer = OptimizerConfig::new(1e-3, 1000);
                cfg.model = default_model(&cfg.task);
                cfg.methods = vec![Method::Erm, Method::Sam];
                cfg.seeds = (0..3).collect();
                dev.push("grid 32x32 -> 16x16".to_string());
                dev.push("trajectories per split 100 -> 8".to_string());
                dev.push("iterations 20000 -> 1000".to_string());
                dev.push("learning rate 1e-4 -> 1e-3".to_string());
                dev.push("methods restricted to erm and sam".to_string());
                dev.push("seeds 5 -> 3".to_string());
            }
        }
        cfg.log_interval = (cfg.optimizer.iterations / 40).max(1);
        cfg.deviations = dev;
        cfg
    }

    pub fn preset(kind: TaskKind, profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig::desk(kind),
            Profile::Paper => ExperimentConfig::paper(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.model.scientific.kind != self.task.kind() {
            return Err(Error::config(format!(
                "model is for {} but the task is {}",
                self.model.scientific.kind,
                self.task.kind()
            )));
        }
        if self.model.scientific.boundary != self.task.boundary {
            return Err(Error::config("model and task boundary conditions differ"));
        }
        if self.model.integration.n_steps != self.task.m_y
            || (self.model.integration.dt - self.task.dt()).abs() > 1e-12 * self.task.dt()
        {
            return Err(Error::config(
                "integration plan must cover the observation grid (dt and m_y)",
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods configured"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log interval must be positive"));
        }
        for &m in &self.methods {
            let vals = self.grids.values(m);
            if vals.is_empty() {
                return Err(Error::config(format!("empty hyperparameter grid for {m}")));
            }
            for v in vals {
                m.configure(v, self.fisher_damping)?;
            }
        }
        let mut seen = Vec::new();
        for &s in &self.seeds {
            if seen.contains(&s) {
                return Err(Error::config(format!("seed {s} listed twice")));
            }
            seen.push(s);
        }
        Ok(())
    }

    /// Cells in a fixed order: method, then grid value, then seed.
    pub fn cells(&self) -> Vec<CellId> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for hyper in self.grids.values(method) {
                for &seed in &self.seeds {
                    out.push(CellId { method, hyper, seed });
                }
            }
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `√(mean_i (a_i − b_i)²)`.
pub fn theta_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Layout(format!(
            "θ estimate has {} entries, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    let s: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_error_examples() {
        assert_eq!(theta_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((theta_error(&[0.7], &[2.0 / 3.0]).unwrap() - (0.7 - 2.0 / 3.0)).abs() < 1e-15);
        let e = theta_error(&[1e-3 + 0.003, 5e-3 + 0.004], &[1e-3, 5e-3]).unwrap();
        assert!((e - 0.0035355).abs() < 1e-7, "{e}");
        assert!(theta_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn presets_validate() {
        for kind in TaskKind::ALL {
            for profile in [Profile::Desk, Profile::Paper] {
                let cfg = ExperimentConfig::preset(kind, profile);
                cfg.validate().unwrap();
                assert_eq!(cfg.profile, profile);
                assert_eq!(cfg.deviations.is_empty(), profile == Profile::Paper);
            }
        }
        let p = ExperimentConfig::paper(TaskKind::Duffing);
        assert_eq!(p.optimizer.lr, 1e-4);
        assert_eq!(p.optimizer.iterations, 20_000);
        assert_eq!(p.seeds.len(), 5);
        assert_eq!(ExperimentConfig::desk(TaskKind::ReactDiff).task.grid, 16);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        for kind in TaskKind::ALL {
            let cfg = ExperimentConfig::desk(kind);
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let a = ExperimentConfig::desk(TaskKind::Pendulum);
        let mut b = a.clone();
        b.optimizer.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn grids_dedup_and_invariants() {
        let mut g = Grids::default();
        g.rho = vec![0.1, 0.1];
        assert_eq!(g.values(Method::Sam), vec![Some(0.1)]);
        assert_eq!(g.values(Method::Erm), vec![None]);
        let mut cfg = ExperimentConfig::desk(TaskKind::Pendulum);
        cfg.grids.rho.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::desk(TaskKind::Pendulum);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk(TaskKind::Pendulum);
        cfg.grids.rho = vec![-0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cells_are_ordered() {
        let mut cfg = ExperimentConfig::desk(TaskKind::Pendulum);
        cfg.methods = vec![Method::Erm, Method::Sam];
        cfg.seeds = vec![3, 4];
        let cells = cfg.cells();
        assert_eq!(cells.len(), 2 + 4 * 2);
        assert_eq!(cells[0], CellId { method: Method::Erm, hyper: None, seed: 3 });
        assert_eq!(cells[2].hyper, Some(0.01));
    }
}
