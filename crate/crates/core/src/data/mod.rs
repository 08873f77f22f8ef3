//! Synthetic datasets for the three benchmark systems.
//!
//! Trajectories are integrated with adaptive Dormand–Prince at the fine step,
//! subsampled, and stored time-major: `x` is `[n, ...state]`, `y` is
//! `[m_y, n, ...state]`. Every trajectory draws its initial condition from its
//! own seed stream, so splits never share randomness.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::hybrid::TaskKind;
use crate::ode::{grid_spacing, integrate_rk45, laplacian_planes, Rk45Options};
use crate::tensor::{Boundary, Tensor};
use crate::{rng, Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"HSDT";
pub const DATASET_VERSION: u32 = 1;
/// Duffing trajectories leaving `|v| <= ESCAPE` are redrawn.
pub const ESCAPE: f64 = 10.0;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "lowercase")]
pub enum TrueParams {
    /// `v̈ = −γ v̇ − (2πω)² sin v`.
    Pendulum { gamma: f64, omega: f64 },
    /// `v̈ = −α v + β v³ − damping · v̇`.
    Duffing { alpha: f64, beta: f64, damping: f64 },
    /// `u_t = a∇²u + u − u³ − κ − v`, `v_t = b∇²v + u − v`.
    ReactDiff { a: f64, b: f64, kappa: f64 },
}

impl TrueParams {
    pub fn kind(&self) -> TaskKind {
        match self {
            TrueParams::Pendulum { .. } => TaskKind::Pendulum,
            TrueParams::Duffing { .. } => TaskKind::Duffing,
            TrueParams::ReactDiff { .. } => TaskKind::ReactDiff,
        }
    }

    /// Ground truth for the model's θ-block.
    pub fn theta(&self) -> Vec<f64> {
        match *self {
            TrueParams::Pendulum { omega, .. } => vec![omega],
            TrueParams::Duffing { alpha, .. } => vec![alpha],
            TrueParams::ReactDiff { a, b, .. } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Split> {
        Split::ALL.get(t as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub params: TrueParams,
    pub fine_dt: f64,
    pub subsample: usize,
    pub m_y: usize,
    /// Grid points per axis (reaction-diffusion only).
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub boundary: Boundary,
    pub splits: Splits,
    pub noise_std: f64,
    /// When false, only `y` is noised.
    #[serde(default = "yes")]
    pub noise_on_x: bool,
}

fn default_grid() -> usize {
    32
}

fn yes() -> bool {
    true
}

impl TaskSpec {
    pub fn preset(kind: TaskKind) -> Self {
        let (params, fine_dt, subsample, m_y, n) = match kind {
            TaskKind::Pendulum => (
                TrueParams::Pendulum {
                    gamma: 0.5,
                    omega: 2.0 / 3.0,
                },
                0.02,
                10,
                10,
                25,
            ),
            TaskKind::Duffing => (
                TrueParams::Duffing {
                    alpha: 1.0,
                    beta: 1.0,
                    damping: 0.0,
                },
                0.005,
                20,
                10,
                100,
            ),
            TaskKind::ReactDiff => (
                TrueParams::ReactDiff {
                    a: 1e-3,
                    b: 5e-3,
                    kappa: 5e-3,
                },
                0.001,
                100,
                5,
                100,
            ),
        };
        TaskSpec {
            params,
            fine_dt,
            subsample,
            m_y,
            grid: default_grid(),
            boundary: Boundary::default(),
            splits: Splits {
                train: n,
                val: n,
                test: n,
            },
            noise_std: 0.01,
            noise_on_x: true,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.params.kind()
    }

    /// Spacing of the observed samples.
    pub fn dt(&self) -> f64 {
        self.fine_dt * self.subsample as f64
    }

    pub fn state_shape(&self) -> Vec<usize> {
        match self.kind() {
            TaskKind::ReactDiff => vec![2, self.grid, self.grid],
            _ => vec![2],
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fine_dt > 0.0) || self.subsample == 0 || self.m_y == 0 {
            return Err(Error::config("fine_dt, subsample and m_y must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise std must be non-negative"));
        }
        if self.kind() == TaskKind::ReactDiff && self.grid < 3 {
            return Err(Error::config("reaction-diffusion grid needs at least 3 points"));
        }
        Ok(())
    }

    /// Stable text form embedded in dataset files and hashes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("task spec serialises")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub data_seed: u64,
    /// `None` for clean data.
    pub noise_seed: Option<u64>,
    /// Duffing trajectories redrawn after escaping.
    pub rejections: u32,
    pub x: Tensor,
    pub y: Tensor,
    pub clean_x: Tensor,
    pub clean_y: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `indices` of `(x, y)`.
    pub fn select(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let n = self.len();
        let sx: usize = self.x.shape()[1..].iter().product();
        let m = self.y.shape()[0];
        let mut x = Vec::with_capacity(indices.len() * sx);
        let mut y = Vec::with_capacity(m * indices.len() * sx);
        for &i in indices {
            x.extend_from_slice(&self.x.data()[i * sx..(i + 1) * sx]);
        }
        for t in 0..m {
            for &i in indices {
                let off = (t * n + i) * sx;
                y.extend_from_slice(&self.y.data()[off..off + sx]);
            }
        }
        let mut xs = self.x.shape().to_vec();
        xs[0] = indices.len();
        let mut ys = self.y.shape().to_vec();
        ys[1] = indices.len();
        (
            Tensor::new(xs, x).expect("row selection keeps shape"),
            Tensor::new(ys, y).expect("row selection keeps shape"),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTriple {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetTriple {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn map(self, mut f: impl FnMut(Dataset) -> Dataset) -> Self {
        DatasetTriple {
            train: f(self.train),
            val: f(self.val),
            test: f(self.test),
        }
    }
}

/// Right-hand side of the data-generating system.
pub fn true_field(spec: &TaskSpec) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + '_ {
    let d = spec.grid;
    let h = grid_spacing(d);
    move |_t, y, dy| match spec.params {
        TrueParams::Pendulum { gamma, omega } => {
            let k = (2.0 * PI * omega).powi(2);
            dy[0] = y[1];
            dy[1] = -gamma * y[1] - k * y[0].sin();
        }
        TrueParams::Duffing { alpha, beta, damping } => {
            dy[0] = y[1];
            dy[1] = -alpha * y[0] + beta * y[0].powi(3) - damping * y[1];
        }
        TrueParams::ReactDiff { a, b, kappa } => {
            let n = d * d;
            let lap = laplacian_planes(y, d, h, spec.boundary);
            let (u, v) = y.split_at(n);
            for k in 0..n {
                dy[k] = a * lap[k] + u[k] - u[k].powi(3) - kappa - v[k];
                dy[n + k] = b * lap[n + k] + u[k] - v[k];
            }
        }
    }
}

/// Clean trajectory `[x(0), x(Δt), …, x(m_y Δt)]` from `x0`.
pub fn simulate(spec: &TaskSpec, x0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let t_end = spec.dt() * spec.m_y as f64;
    let traj = integrate_rk45(true_field(spec), x0, t_end, spec.fine_dt, &Rk45Options::default())?;
    let states = traj.subsample(spec.subsample).states;
    if states.len() != spec.m_y + 1 {
        return Err(Error::Integration {
            step: states.len(),
            msg: format!("expected {} samples after subsampling", spec.m_y + 1),
        });
    }
    Ok(states)
}

fn sample_initial(spec: &TaskSpec, r: &mut impl Rng) -> Vec<f64> {
    match spec.kind() {
        TaskKind::Pendulum => (0..2).map(|_| r.random_range(-PI / 2.0..PI / 2.0)).collect(),
        TaskKind::Duffing => (0..2).map(|_| r.random_range(-1.0..1.0)).collect(),
        TaskKind::ReactDiff => (0..2 * spec.grid * spec.grid).map(|_| r.random_range(0.0..1.0)).collect(),
    }
}

fn escaped(spec: &TaskSpec, states: &[Vec<f64>]) -> bool {
    spec.kind() == TaskKind::Duffing && states.iter().any(|s| s[0].abs() > ESCAPE)
}

/// One trajectory with its own seed stream; returns states and redraw count.
fn trajectory(spec: &TaskSpec, seed: u64, split: Split, index: usize) -> Result<(Vec<Vec<f64>>, u32)> {
    let tag = format!("{}/{}", spec.kind(), split.name());
    let mut r = rng::stream(seed, &tag, index as u64);
    for redraw in 0..MAX_REDRAWS {
        let x0 = sample_initial(spec, &mut r);
        match simulate(spec, &x0) {
            Ok(states) if !escaped(spec, &states) => return Ok((states, redraw as u32)),
            Ok(_) if spec.kind() == TaskKind::Duffing => continue,
            Err(Error::Integration { .. }) if spec.kind() == TaskKind::Duffing => continue,
            Ok(_) => unreachable!("only Duffing trajectories are screened"),
            Err(Error::Integration { step, msg }) => {
                return Err(Error::Integration {
                    step,
                    msg: format!("{} trajectory {index}: {msg}", split.name()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Integration {
        step: 0,
        msg: format!("{} trajectory {index}: no bounded draw in {MAX_REDRAWS} attempts", split.name()),
    })
}

fn assemble(spec: &TaskSpec, trajectories: &[Vec<Vec<f64>>]) -> (Tensor, Tensor) {
    let n = trajectories.len();
    let state = spec.state_shape();
    let sx: usize = state.iter().product();
    let mut x = Vec::with_capacity(n * sx);
    for tr in trajectories {
        x.extend_from_slice(&tr[0]);
    }
    let mut y = Vec::with_capacity(spec.m_y * n * sx);
    for t in 1..=spec.m_y {
        for tr in trajectories {
            y.extend_from_slice(&tr[t]);
        }
    }
    let mut xs = vec![n];
    xs.extend(&state);
    let mut ys = vec![spec.m_y, n];
    ys.extend(&state);
    (
        Tensor::new(xs, x).expect("assembled shape"),
        Tensor::new(ys, y).expect("assembled shape"),
    )
}

/// Noise-free split generated from `seed`.
pub fn generate_split(spec: &TaskSpec, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.split_size(split);
    let results = (0..n)
        .into_par_iter()
        .map(|i| trajectory(spec, seed, split, i))
        .collect::<Result<Vec<_>>>()?;
    let rejections: u32 = results.iter().map(|r| r.1).sum();
    if rejections > 0 {
        log::info!(
            "{} {}: redrew {rejections} escaping trajectories",
            spec.kind(),
            split.name()
        );
    }
    let trajectories: Vec<_> = results.into_iter().map(|r| r.0).collect();
    let (x, y) = assemble(spec, &trajectories);
    Ok(Dataset {
        spec: spec.clone(),
        split,
        data_seed: seed,
        noise_seed: None,
        rejections,
        clean_x: x.clone(),
        clean_y: y.clone(),
        x,
        y,
    })
}

pub fn generate_clean(spec: &TaskSpec, seed: u64) -> Result<DatasetTriple> {
    Ok(DatasetTriple {
        train: generate_split(spec, seed, Split::Train)?,
        val: generate_split(spec, seed, Split::Val)?,
        test: generate_split(spec, seed, Split::Test)?,
    })
}

/// Clean generation followed by observation noise from `noise_seed`.
pub fn generate(spec: &TaskSpec, seed: u64, noise_seed: u64) -> Result<DatasetTriple> {
    let std = spec.noise_std;
    let on_x = spec.noise_on_x;
    Ok(generate_clean(spec, seed)?.map(|d| add_noise(d, std, noise_seed, on_x)))
}

pub fn gen_pendulum(spec: &TaskSpec, seed: u64) -> Result<DatasetTriple> {
    expect_kind(spec, TaskKind::Pendulum)?;
    generate(spec, seed, rng::derive_seed(seed, "noise", 0))
}

pub fn gen_duffing(spec: &TaskSpec, seed: u64) -> Result<DatasetTriple> {
    expect_kind(spec, TaskKind::Duffing)?;
    generate(spec, seed, rng::derive_seed(seed, "noise", 0))
}

pub fn gen_reactdiff(spec: &TaskSpec, seed: u64) -> Result<DatasetTriple> {
    expect_kind(spec, TaskKind::ReactDiff)?;
    generate(spec, seed, rng::derive_seed(seed, "noise", 0))
}

fn expect_kind(spec: &TaskSpec, kind: TaskKind) -> Result<()> {
    if spec.kind() != kind {
        return Err(Error::config(format!("expected a {kind} spec, got {}", spec.kind())));
    }
    Ok(())
}

/// I.i.d. Gaussian noise on `y` (and `x` when `on_x`), drawn from the clean
/// copies so repeated calls do not compound.
pub fn add_noise(mut ds: Dataset, std: f64, seed: u64, on_x: bool) -> Dataset {
    ds.noise_seed = Some(seed);
    ds.x = ds.clean_x.clone();
    ds.y = ds.clean_y.clone();
    if std == 0.0 {
        return ds;
    }
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let mut r = rng::stream(seed, ds.split.name(), 0);
    if on_x {
        ds.x.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut r));
    }
    ds.y.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut r));
    ds
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.str(&ds.spec.canonical());
    w.u8(ds.split.tag());
    w.u64(ds.data_seed);
    match ds.noise_seed {
        Some(s) => {
            w.u8(1);
            w.u64(s);
        }
        None => {
            w.u8(0);
            w.u64(0);
        }
    }
    w.u32(ds.rejections);
    for t in [&ds.x, &ds.y, &ds.clean_x, &ds.clean_y] {
        w.tensor(t);
    }
    w.finish(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let (mut r, version) = Reader::open(&bytes, path, DATASET_MAGIC)?;
    if version != DATASET_VERSION {
        return Err(r.err(format!(
            "dataset format version {version}, this build reads {DATASET_VERSION}"
        )));
    }
    let text = r.str()?;
    let spec: TaskSpec = toml::from_str(&text).map_err(|e| r.err(format!("embedded task spec: {e}")))?;
    let tag = r.u8()?;
    let split = Split::from_tag(tag).ok_or_else(|| r.err(format!("unknown split tag {tag}")))?;
    let data_seed = r.u64()?;
    let has_noise = r.u8()?;
    let noise = r.u64()?;
    let rejections = r.u32()?;
    let x = r.tensor()?;
    let y = r.tensor()?;
    let clean_x = r.tensor()?;
    let clean_y = r.tensor()?;
    r.finish()?;
    Ok(Dataset {
        spec,
        split,
        data_seed,
        noise_seed: (has_noise == 1).then_some(noise),
        rejections,
        x,
        y,
        clean_x,
        clean_y,
    })
}

/// Writes `train.hsdt`, `val.hsdt` and `test.hsdt` into `dir`.
pub fn save_triple(triple: &DatasetTriple, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for split in Split::ALL {
        save_dataset(triple.get(split), &dir.join(format!("{}.hsdt", split.name())))?;
    }
    Ok(())
}

pub fn load_triple(dir: &Path) -> Result<DatasetTriple> {
    let load = |s: Split| load_dataset(&dir.join(format!("{}.hsdt", s.name())));
    Ok(DatasetTriple {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind, n: usize) -> TaskSpec {
        let mut s = TaskSpec::preset(kind);
        s.splits = Splits {
            train: n,
            val: n,
            test: n,
        };
        if kind == TaskKind::ReactDiff {
            s.grid = 6;
        }
        s
    }

    #[test]
    fn presets_have_expected_sample_spacing() {
        let dts: Vec<f64> = TaskKind::ALL.iter().map(|k| TaskSpec::preset(*k).dt()).collect();
        for (got, want) in dts.iter().zip([0.2, 0.1, 0.1]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shapes_follow_task_contract() {
        for kind in TaskKind::ALL {
            let spec = small(kind, 3);
            let tr = generate(&spec, 1, 2).unwrap();
            let state = spec.state_shape();
            let mut xs = vec![3];
            xs.extend(&state);
            let mut ys = vec![spec.m_y, 3];
            ys.extend(&state);
            for s in Split::ALL {
                assert_eq!(tr.get(s).x.shape(), xs.as_slice());
                assert_eq!(tr.get(s).y.shape(), ys.as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = small(TaskKind::Pendulum, 4);
        let a = gen_pendulum(&spec, 9).unwrap();
        let b = gen_pendulum(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.clean_x, a.val.clean_x);
        assert_ne!(a.val.clean_x, a.test.clean_x);
        let c = gen_pendulum(&spec, 10).unwrap();
        assert_ne!(a.train.clean_x, c.train.clean_x);
    }

    #[test]
    fn pendulum_energy_decays() {
        let spec = small(TaskKind::Pendulum, 5);
        let k = (2.0 * PI * 2.0 / 3.0f64).powi(2);
        let energy = |v: f64, vd: f64| 0.5 * vd * vd + k * (1.0 - v.cos());
        let ds = generate_split(&spec, 3, Split::Train).unwrap();
        let (x, y) = (&ds.clean_x, &ds.clean_y);
        for i in 0..5 {
            let mut prev = energy(x.data()[2 * i], x.data()[2 * i + 1]);
            for t in 0..spec.m_y {
                let off = (t * 5 + i) * 2;
                let e = energy(y.data()[off], y.data()[off + 1]);
                assert!(e <= prev + 1e-9);
                prev = e;
            }
        }
    }

    #[test]
    fn small_pendulum_period() {
        let mut spec = TaskSpec::preset(TaskKind::Pendulum);
        spec.params = TrueParams::Pendulum {
            gamma: 0.0,
            omega: 2.0 / 3.0,
        };
        spec.subsample = 1;
        spec.m_y = 200;
        let tr = simulate(&spec, &[1e-3, 0.0]).unwrap();
        let v: Vec<f64> = tr.iter().map(|s| s[0]).collect();
        let ups: Vec<f64> = (1..v.len())
            .filter(|&i| v[i - 1] < 0.0 && v[i] >= 0.0)
            .map(|i| spec.fine_dt * (i as f64 - 1.0 + v[i - 1] / (v[i - 1] - v[i])))
            .collect();
        let period = ups[1] - ups[0];
        assert!((period / 1.5 - 1.0).abs() < 0.01, "{period}");
    }

    #[test]
    fn duffing_energy_is_conserved() {
        let spec = small(TaskKind::Duffing, 6);
        let energy = |s: &[f64]| 0.5 * s[1] * s[1] + 0.5 * s[0] * s[0] - 0.25 * s[0].powi(4);
        for i in 0..6 {
            let mut r = rng::stream(77, "duffing-energy", i);
            let x0 = sample_initial(&spec, &mut r);
            let tr = simulate(&spec, &x0).unwrap();
            let e0 = energy(&tr[0]);
            for s in &tr {
                assert!((energy(s) - e0).abs() <= 1e-6 * e0.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn duffing_fixed_points() {
        let spec = TaskSpec::preset(TaskKind::Duffing);
        for v in [0.0, 1.0, -1.0] {
            let tr = simulate(&spec, &[v, 0.0]).unwrap();
            assert!(tr.iter().all(|s| s[0] == v && s[1] == 0.0), "{v}");
        }
    }

    #[test]
    fn uniform_reactdiff_tends_to_reaction_fixed_point() {
        let mut spec = small(TaskKind::ReactDiff, 1);
        spec.fine_dt = 0.1;
        spec.subsample = 10;
        spec.m_y = 300;
        let n = spec.grid * spec.grid;
        let tr = simulate(&spec, &vec![0.3; 2 * n]).unwrap();
        let last = tr.last().unwrap();
        let fixed = -(0.005f64).cbrt();
        assert!((fixed + 0.1710).abs() < 1e-4);
        for k in 0..n {
            assert!((last[k] - fixed).abs() < 1e-4, "{}", last[k]);
            assert!((last[n + k] - fixed).abs() < 1e-4);
        }
    }

    #[test]
    fn uniform_reactdiff_is_grid_independent() {
        let mut coarse = small(TaskKind::ReactDiff, 1);
        coarse.grid = 4;
        let mut fine = coarse.clone();
        fine.grid = 8;
        let a = simulate(&coarse, &[vec![0.8; 16], vec![0.1; 16]].concat()).unwrap();
        let b = simulate(&fine, &[vec![0.8; 64], vec![0.1; 64]].concat()).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert!((sa[0] - sb[0]).abs() < 1e-7 && (sa[16] - sb[64]).abs() < 1e-7);
        }
    }

    #[test]
    fn frozen_reactdiff_without_dynamics() {
        let mut spec = small(TaskKind::ReactDiff, 1);
        spec.params = TrueParams::ReactDiff {
            a: 0.0,
            b: 0.0,
            kappa: 0.0,
        };
        // u = v = 0 annihilates the reaction; diffusion is off.
        let tr = simulate(&spec, &vec![0.0; 72]).unwrap();
        assert!(tr.iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn noise_statistics_and_seed_separation() {
        let mut spec = small(TaskKind::Duffing, 5000);
        spec.noise_std = 0.01;
        let clean = generate_split(&spec, 4, Split::Train).unwrap();
        let a = add_noise(clean.clone(), 0.01, 1, true);
        let diffs: Vec<f64> = a
            .x
            .data()
            .iter()
            .zip(clean.x.data())
            .chain(a.y.data().iter().zip(clean.y.data()))
            .map(|(p, q)| p - q)
            .collect();
        assert!(diffs.len() >= 100_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((0.0099..=0.0101).contains(&sd), "{sd}");

        let b = add_noise(clean.clone(), 0.01, 2, true);
        assert_eq!(a.clean_y, b.clean_y);
        assert_ne!(a.y, b.y);
        let same = add_noise(clean.clone(), 0.0, 5, true);
        assert_eq!(same.x, clean.x);
        assert_eq!(same.y, clean.y);
        let y_only = add_noise(clean.clone(), 0.01, 1, false);
        assert_eq!(y_only.x, clean.x);
        assert_ne!(y_only.y, clean.y);
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(TaskKind::ReactDiff, 2);
        let tr = generate(&spec, 5, 6).unwrap();
        save_triple(&tr, dir.path()).unwrap();
        let back = load_triple(dir.path()).unwrap();
        assert_eq!(back, tr);
        assert_eq!(back.train.spec, spec);

        let p = dir.path().join("val.hsdt");
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_split(&small(TaskKind::Pendulum, 2), 1, Split::Test).unwrap();
        let p = dir.path().join("d.hsdt");
        save_dataset(&ds, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let mut body = bytes[..bytes.len() - 32].to_vec();
        body[4..8].copy_from_slice(&99u32.to_le_bytes());
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        std::fs::write(&p, &body).unwrap();
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn select_picks_rows_in_time_major_layout() {
        let ds = generate_split(&small(TaskKind::Pendulum, 4), 1, Split::Train).unwrap();
        let (x, y) = ds.select(&[2, 0]);
        assert_eq!(x.data(), [&ds.x.data()[4..6], &ds.x.data()[0..2]].concat().as_slice());
        assert_eq!(y.shape(), &[10, 2, 2]);
        assert_eq!(&y.data()[4..6], &ds.y.data()[8 + 4..8 + 6]);
    }
}
