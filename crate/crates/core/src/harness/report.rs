use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::sensitivity_svg;
use super::run::CellRecord;
use super::{ExperimentConfig, Profile, SelectionMode};
use crate::data::DatasetTriple;
use crate::hybrid::TaskKind;
use crate::optim::Method;
use crate::{Error, Result};

pub const REPORT_FORMAT: &str = "hsam-report/1";

/// Mean, sample SD and median of the successful values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let n = values.len();
        if n == 0 {
            return Stats {
                n,
                mean: None,
                sd: None,
                median: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Stats {
            n,
            mean: Some(mean),
            sd: Some(sd),
            median: Some(median),
        }
    }
}

/// Cell chosen for one (method, seed) by the selection mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub method: Method,
    pub seed: u64,
    /// Index into `records`; `None` when every grid cell failed.
    pub record: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hyper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub theta_rmse: Stats,
    pub test_y_rmse: Stats,
    /// Seeds whose every grid cell failed; missing from the statistics.
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub hyper: f64,
    pub theta_rmse: Stats,
    pub test_y_rmse: Stats,
    pub failed: usize,
}

/// Per-grid-value statistics across seeds with the erm reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub task: TaskKind,
    pub rows: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub erm_theta_rmse: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub erm_test_y_rmse: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub name: String,
    pub task: TaskKind,
    pub profile: Profile,
    pub selection: SelectionMode,
    pub config_hash: String,
    pub truth: Vec<f64>,
    pub deviations: Vec<String>,
    /// Resolved values of every choice the reference protocol leaves open.
    pub resolved: BTreeMap<String, String>,
    pub data: DataSummary,
    pub records: Vec<CellRecord>,
    pub selected: Vec<Selected>,
    pub aggregates: Vec<Aggregate>,
    pub sweep: SweepTable,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Redrawn initial conditions per split (escaping Duffing trajectories).
    pub rejections: [u32; 3],
}

fn resolved(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let m = &cfg.model;
    let mut r = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        r.insert(k.to_string(), v);
    };
    put("selection", cfg.selection.name().into());
    put(
        "training integrator",
        format!(
            "rk4, dt {} with {} substep(s), {} steps",
            m.integration.dt, m.integration.substeps, m.integration.n_steps
        ),
    );
    put("theta init", serde_json::to_string(&cfg.theta_init).unwrap_or_default());
    put("phi init", "kaiming-uniform sqrt(6 / fan_in), zero biases".into());
    put("optimizer", serde_json::to_string(&cfg.optimizer).unwrap_or_default());
    put("lr schedule", format!("cosine {} -> {}", cfg.optimizer.lr, cfg.optimizer.final_lr));
    put("sam gradient", "adam consumes the gradient at phi + eps; theta never perturbed".into());
    put("fisher damping", cfg.fisher_damping.to_string());
    put("boundary", format!("{:?}", cfg.task.boundary).to_lowercase());
    put("noise", format!("std {} on y{}", cfg.task.noise_std, if cfg.task.noise_on_x { " and x" } else { "" }));
    put(
        "data generator",
        format!(
            "dormand-prince 5(4), rtol 1e-8, atol 1e-10, fine dt {}, every {}th sample kept",
            cfg.task.fine_dt, cfg.task.subsample
        ),
    );
    put("data seeds", format!("data {}, noise {}", cfg.data_seed, cfg.noise_seed));
    put("sd convention", "sample (n - 1); failed runs excluded and listed".into());
    if let crate::nn::NeuralSpec::Conv(c) = &m.neural {
        put("conv padding", format!("{:?}", c.padding).to_lowercase());
    }
    if cfg.task.kind() == TaskKind::Duffing {
        put("duffing initial state", "uniform(-1, 1)^2, redrawn when |v| > 10".into());
    }
    r
}

/// Picks one cell per (method, seed) across the grid. Failed cells never win;
/// ties go to the earlier grid value.
pub fn select(records: &[CellRecord], cfg: &ExperimentConfig) -> Vec<Selected> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let mut best: Option<(usize, f64)> = None;
            for (i, r) in records.iter().enumerate() {
                if r.method != method || r.seed != seed || !r.ok() {
                    continue;
                }
                let key = match cfg.selection {
                    SelectionMode::BestThetaError => r.theta_rmse,
                    SelectionMode::BestValLoss => r.val_loss,
                };
                let Some(k) = key else { continue };
                if best.is_none_or(|(_, b)| k < b) {
                    best = Some((i, k));
                }
            }
            out.push(Selected {
                method,
                seed,
                record: best.map(|b| b.0),
                hyper: best.and_then(|b| records[b.0].hyper),
            });
        }
    }
    out
}

pub fn aggregate(records: &[CellRecord], selected: &[Selected], methods: &[Method]) -> Vec<Aggregate> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&Selected> = selected.iter().filter(|s| s.method == method).collect();
            let picked: Vec<&CellRecord> = mine.iter().filter_map(|s| s.record.map(|i| &records[i])).collect();
            let th: Vec<f64> = picked.iter().filter_map(|r| r.theta_rmse).collect();
            let y: Vec<f64> = picked.iter().filter_map(|r| r.test_y_rmse).collect();
            Aggregate {
                method,
                theta_rmse: Stats::of(&th),
                test_y_rmse: Stats::of(&y),
                failed_seeds: mine.iter().filter(|s| s.record.is_none()).map(|s| s.seed).collect(),
            }
        })
        .collect()
}

/// One row per (method with a hyperparameter, grid value); erm supplies the
/// reference line.
pub fn sweep(records: &[CellRecord], cfg: &ExperimentConfig) -> SweepTable {
    let mut rows = Vec::new();
    for &method in cfg.methods.iter().filter(|m| m.hyper_name().is_some()) {
        for h in cfg.grids.values(method).into_iter().flatten() {
            let cells: Vec<&CellRecord> = records
                .iter()
                .filter(|r| r.method == method && r.hyper.map(f64::to_bits) == Some(h.to_bits()))
                .collect();
            let th: Vec<f64> = cells.iter().filter_map(|r| r.theta_rmse).collect();
            let y: Vec<f64> = cells.iter().filter_map(|r| r.test_y_rmse).collect();
            rows.push(SweepRow {
                method,
                hyper: h,
                theta_rmse: Stats::of(&th),
                test_y_rmse: Stats::of(&y),
                failed: cells.iter().filter(|r| !r.ok()).count(),
            });
        }
    }
    let erm: Vec<&CellRecord> = records.iter().filter(|r| r.method == Method::Erm).collect();
    let (et, ey) = if erm.is_empty() {
        (None, None)
    } else {
        let th: Vec<f64> = erm.iter().filter_map(|r| r.theta_rmse).collect();
        let y: Vec<f64> = erm.iter().filter_map(|r| r.test_y_rmse).collect();
        (Some(Stats::of(&th)), Some(Stats::of(&y)))
    };
    SweepTable {
        task: cfg.task.kind(),
        rows,
        erm_theta_rmse: et,
        erm_test_y_rmse: ey,
    }
}

impl RunReport {
    pub fn assemble(cfg: &ExperimentConfig, data: &DatasetTriple, records: Vec<CellRecord>) -> Result<RunReport> {
        let selected = select(&records, cfg);
        let aggregates = aggregate(&records, &selected, &cfg.methods);
        let sweep = sweep(&records, cfg);
        Ok(RunReport {
            format: REPORT_FORMAT.into(),
            name: cfg.name.clone(),
            task: cfg.task.kind(),
            profile: cfg.profile,
            selection: cfg.selection,
            config_hash: cfg.hash(),
            truth: cfg.task.params.theta(),
            deviations: cfg.deviations.clone(),
            resolved: resolved(cfg),
            data: DataSummary {
                train: data.train.len(),
                val: data.val.len(),
                test: data.test.len(),
                rejections: [data.train.rejections, data.val.rejections, data.test.rejections],
            },
            records,
            selected,
            aggregates,
            sweep,
            config: cfg.clone(),
        })
    }

    pub fn aggregate_for(&self, method: Method) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Selected records of `method`, one per seed that has one.
    pub fn selected_records(&self, method: Method) -> Vec<&CellRecord> {
        self.selected
            .iter()
            .filter(|s| s.method == method)
            .filter_map(|s| s.record.map(|i| &self.records[i]))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let r: RunReport = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if r.format != REPORT_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported report format `{}`", r.format),
        });
    }
    Ok(r)
}

/// Powers of ten dividing the θ- and y-errors in the main table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableScale {
    pub theta_exp: i32,
    pub y_exp: i32,
}

impl TableScale {
    pub fn of(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Pendulum => TableScale { theta_exp: -3, y_exp: -2 },
            TaskKind::ReactDiff => TableScale { theta_exp: -4, y_exp: 0 },
            TaskKind::Duffing => TableScale { theta_exp: -2, y_exp: -2 },
        }
    }
}

fn cell(stats: &Stats, exp: i32, failed: usize) -> String {
    let scale = 10f64.powi(exp);
    let mut s = match (stats.mean, stats.sd) {
        (Some(m), Some(sd)) => format!("{:.3} ± {:.3}", m / scale, sd / scale),
        _ => "n/a".to_string(),
    };
    if failed > 0 {
        let _ = write!(s, " ({failed} failed)");
    }
    s
}

/// Comparison table: one row per (task, metric), one column per method.
pub fn emit_table(reports: &[&RunReport], path: &Path) -> Result<()> {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        for a in &r.aggregates {
            if !methods.contains(&a.method) {
                methods.push(a.method);
            }
        }
    }
    methods.sort();
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "# {}: profile {}, selection {}, config {}",
            r.task,
            r.profile,
            r.selection.name(),
            &r.config_hash[..12]
        );
        for d in &r.deviations {
            let _ = writeln!(out, "# {}: deviation: {d}", r.task);
        }
    }
    let _ = write!(out, "task,metric");
    for m in &methods {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for r in reports {
        let sc = TableScale::of(r.task);
        for (metric, exp) in [("theta-error", sc.theta_exp), ("y-error", sc.y_exp)] {
            let _ = write!(out, "{},{metric} (x1e{exp})", r.task);
            for m in &methods {
                let cellv = match r.aggregate_for(*m) {
                    Some(a) => {
                        let st = if metric == "theta-error" { &a.theta_rmse } else { &a.test_y_rmse };
                        cell(st, exp, a.failed_seeds.len())
                    }
                    None => "-".into(),
                };
                let _ = write!(out, ",{cellv}");
            }
            out.push('\n');
        }
    }
    write_file(path, &out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn sweep_csv(t: &SweepTable) -> String {
    let mut out = String::from("method,hyper,theta_rmse_mean,theta_rmse_sd,test_y_rmse_mean,test_y_rmse_sd,n,failed\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in &t.rows {
        let _ = writeln!(
            out,
            "{},{:e},{},{},{},{},{},{}",
            r.method,
            r.hyper,
            f(r.theta_rmse.mean),
            f(r.theta_rmse.sd),
            f(r.test_y_rmse.mean),
            f(r.test_y_rmse.sd),
            r.theta_rmse.n,
            r.failed
        );
    }
    if let (Some(a), Some(b)) = (&t.erm_theta_rmse, &t.erm_test_y_rmse) {
        let _ = writeln!(out, "erm,,{},{},{},{},{},0", f(a.mean), f(a.sd), f(b.mean), f(b.sd), a.n);
    }
    out
}

fn metrics_jsonl(r: &RunReport) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        method: Method,
        #[serde(skip_serializing_if = "Option::is_none")]
        hyper: Option<f64>,
        seed: u64,
        #[serde(flatten)]
        point: &'a super::run::CurvePoint,
    }
    let mut out = String::new();
    for rec in &r.records {
        for p in &rec.curve {
            let line = Line {
                method: rec.method,
                hyper: rec.hyper,
                seed: rec.seed,
                point: p,
            };
            out.push_str(&serde_json::to_string(&line).expect("metrics serialise"));
            out.push('\n');
        }
    }
    out
}

/// Writes `report.json`, `table1.csv`, `sweep.csv`, `metrics.jsonl` and one
/// `sensitivity-<method>.svg` per swept method into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    for &m in &report.config.methods {
        if report.config.grids.values(m).is_empty() {
            return Err(Error::config(format!(
                "refusing to emit: hyperparameter grid for {m} is empty (grids must be non-empty)"
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("report.json", &report.to_json())?;
    put("sweep.csv", &sweep_csv(&report.sweep))?;
    put("metrics.jsonl", &metrics_jsonl(report))?;
    let swept: Vec<Method> = report
        .config
        .methods
        .iter()
        .copied()
        .filter(|m| m.hyper_name().is_some())
        .collect();
    for m in swept {
        put(&format!("sensitivity-{m}.svg"), &sensitivity_svg(&report.sweep, m))?;
    }
    let table = dir.join("table1.csv");
    emit_table(&[report], &table)?;
    written.push(table);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, hyper: Option<f64>, seed: u64, th: Option<f64>, val: f64) -> CellRecord {
        CellRecord {
            method,
            hyper,
            seed,
            theta_init: vec![1.0],
            theta: vec![1.0],
            theta_rmse: th,
            test_y_rmse: th.map(|t| 10.0 * t),
            val_y_rmse: Some(val),
            val_loss: Some(val),
            train_loss: Some(val),
            iterations: 1,
            failed: if th.is_none() { Some("boom".into()) } else { None },
            curve: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk(TaskKind::Pendulum);
        c.methods = vec![Method::Erm, Method::Sam];
        c.seeds = vec![0, 1];
        c.grids.rho = vec![0.1, 0.5, 0.1];
        c
    }

    fn records() -> Vec<CellRecord> {
        vec![
            rec(Method::Erm, None, 0, Some(0.3), 1.0),
            rec(Method::Erm, None, 1, None, 1.0),
            rec(Method::Sam, Some(0.1), 0, Some(0.05), 2.0),
            rec(Method::Sam, Some(0.1), 1, Some(0.02), 1.0),
            rec(Method::Sam, Some(0.5), 0, Some(0.01), 3.0),
            rec(Method::Sam, Some(0.5), 1, Some(0.04), 0.5),
        ]
    }

    #[test]
    fn stats_examples() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.mean, Some(4.0));
        assert_eq!(s.median, Some(2.5));
        assert!((s.sd.unwrap() - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stats::of(&[]).mean, None);
        assert_eq!(Stats::of(&[2.0]).sd, Some(0.0));
    }

    #[test]
    fn selection_is_the_argmin() {
        let recs = records();
        let mut c = cfg();
        let sel = select(&recs, &c);
        assert_eq!(sel.len(), 4);
        for s in &sel {
            let best = recs
                .iter()
                .enumerate()
                .filter(|(_, r)| r.method == s.method && r.seed == s.seed && r.ok())
                .min_by(|a, b| a.1.theta_rmse.partial_cmp(&b.1.theta_rmse).unwrap())
                .map(|(i, _)| i);
            assert_eq!(s.record, best);
        }
        assert_eq!(sel[1].record, None);
        c.selection = SelectionMode::BestValLoss;
        let sel = select(&recs, &c);
        assert_eq!(sel[2].record, Some(2));
        assert_eq!(sel[3].record, Some(5));
    }

    #[test]
    fn aggregates_recompute_from_records() {
        let recs = records();
        let c = cfg();
        let sel = select(&recs, &c);
        let agg = aggregate(&recs, &sel, &c.methods);
        assert_eq!(agg[0].failed_seeds, vec![1]);
        assert_eq!(agg[0].theta_rmse.n, 1);
        let sam = &agg[1];
        assert_eq!(sam.theta_rmse, Stats::of(&[0.01, 0.02]));
    }

    #[test]
    fn sweep_dedups_and_counts() {
        let recs = records();
        let t = sweep(&recs, &cfg());
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].hyper, 0.1);
        assert_eq!(t.rows[0].theta_rmse, Stats::of(&[0.05, 0.02]));
        assert_eq!(t.erm_theta_rmse.as_ref().unwrap().n, 1);
    }

    #[test]
    fn table_cells_use_task_scales() {
        let s = Stats::of(&[0.0199, 0.0199]);
        assert_eq!(cell(&s, TableScale::of(TaskKind::Pendulum).theta_exp, 0), "19.900 ± 0.000");
        assert_eq!(TableScale::of(TaskKind::Duffing).theta_exp, -2);
        assert_eq!(TableScale::of(TaskKind::ReactDiff).y_exp, 0);
        assert_eq!(cell(&Stats::of(&[]), -2, 2), "n/a (2 failed)");
    }
}
