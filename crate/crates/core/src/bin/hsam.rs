use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsam::data::{generate, load_triple, save_triple, DatasetTriple};
use hsam::harness::{
    advance, complete, emit_report, emit_table, load_checkpoint, load_report, run_experiment_with_data,
    save_checkpoint, CellId, CellRecord, CellState, Checkpoint, CheckpointPlan, ExperimentConfig, Profile,
    RunReport, SelectionMode,
};
use hsam::hybrid::TaskKind;
use hsam::optim::Method;
use hsam::{Error, Result};

#[derive(Parser)]
#[command(name = "hsam", version, about = "Sharpness-aware training of hybrid physics/neural models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); overrides --task and --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task preset: pendulum, duffing or reactdiff.
    #[arg(long, global = true)]
    task: Option<TaskKind>,
    /// Preset scale.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Seed; see the subcommand help for its meaning.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $HSAM_OUT/<config name>, or runs/<config name>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Root for default output directories.
    #[arg(long = "out-root", env = "HSAM_OUT", global = true, default_value = "runs", hide = true)]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the resolved experiment config as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Generate and write the train/val/test datasets (--seed: data seed).
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a single (method, hyperparameter, seed) cell (--seed: cell seed).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        /// Hyperparameter value [default: first grid value].
        #[arg(long)]
        hyper: Option<f64>,
        /// Checkpoint every N iterations.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Stop after N iterations and leave a checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Run every configured method, grid value and seed (--seed: first seed).
    Bench {
        #[command(flatten)]
        common: Common,
        /// Read datasets written by `gen` instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// best-theta-error or best-val-loss [default: from config].
        #[arg(long)]
        selection: Option<SelectionMode>,
    },
    /// Hyperparameter sweep of the given methods with the erm reference.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Swept method (repeatable).
        #[arg(long = "method", default_value = "sam")]
        methods: Vec<Method>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-emit tables and plots from stored reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// report.json files; several reports give one combined table.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Continue a cell from its checkpoint.
    Resume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        stop_at: Option<usize>,
    },
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = match (&self.config, self.task) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(k)) => ExperimentConfig::preset(k, self.profile),
            (None, None) => return Err(Error::Config("either --config or --task is required".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(&cfg.name))
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn datasets(cfg: &mut ExperimentConfig, dir: Option<&Path>) -> Result<DatasetTriple> {
    match dir {
        Some(d) => {
            let data = load_triple(d)?;
            cfg.data_seed = data.train.data_seed;
            cfg.noise_seed = data.train.noise_seed.unwrap_or(cfg.noise_seed);
            Ok(data)
        }
        None => generate(&cfg.task, cfg.data_seed, cfg.noise_seed),
    }
}

fn print_summary(report: &RunReport) {
    println!("{} ({}, selection {})", report.name, report.profile, report.selection.name());
    for d in &report.deviations {
        println!("  deviation: {d}");
    }
    for a in &report.aggregates {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "n/a".into());
        println!(
            "  {:<8} theta-rmse {} ± {} (median {})  test y-rmse {} ± {}{}",
            a.method.name(),
            f(a.theta_rmse.mean),
            f(a.theta_rmse.sd),
            f(a.theta_rmse.median),
            f(a.test_y_rmse.mean),
            f(a.test_y_rmse.sd),
            if a.failed_seeds.is_empty() {
                String::new()
            } else {
                format!("  failed seeds {:?}", a.failed_seeds)
            }
        );
    }
}

fn write_record(dir: &Path, rec: &CellRecord) -> Result<PathBuf> {
    mkdir(dir)?;
    let p = dir.join(format!("{}.json", rec.id().label()));
    let mut s = serde_json::to_string_pretty(rec).expect("record serialises");
    s.push('\n');
    write(&p, &s)?;
    Ok(p)
}

fn finish_cell(
    cfg: &ExperimentConfig,
    data: &DatasetTriple,
    mut state: CellState,
    plan: &CheckpointPlan,
    stop_at: Option<usize>,
    out: &Path,
) -> Result<bool> {
    if let Some(n) = stop_at.filter(|&n| n < cfg.optimizer.iterations) {
        advance(cfg, data, &mut state, n, Some(plan))?;
        save_checkpoint(&plan.path, &Checkpoint::from_state(cfg, &state))?;
        println!("stopped at iteration {}; checkpoint {}", state.iteration, plan.path.display());
        return Ok(true);
    }
    let rec = complete(cfg, data, state, Some(plan))?;
    let p = write_record(out, &rec)?;
    match &rec.failed {
        None => println!(
            "{}: theta {:?}, theta-rmse {:.4e}, test y-rmse {:.4e} -> {}",
            rec.id().label(),
            rec.theta,
            rec.theta_rmse.unwrap_or(f64::NAN),
            rec.test_y_rmse.unwrap_or(f64::NAN),
            p.display()
        ),
        Some(e) => println!("{}: FAILED ({e}) -> {}", rec.id().label(), p.display()),
    }
    Ok(rec.ok())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Config { common } => {
            let cfg = common.experiment()?;
            let text = cfg.to_toml()?;
            match &common.out {
                Some(p) => write(p, &text)?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Gen { common } => {
            let mut cfg = common.experiment()?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            let dir = common.out_dir(&cfg).join("data");
            let data = generate(&cfg.task, cfg.data_seed, cfg.noise_seed)?;
            mkdir(&dir)?;
            save_triple(&data, &dir)?;
            println!(
                "wrote {} / {} / {} trajectories to {} (redrawn: {}, {}, {})",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                dir.display(),
                data.train.rejections,
                data.val.rejections,
                data.test.rejections
            );
            Ok(true)
        }
        Command::Train {
            common,
            method,
            hyper,
            checkpoint_every,
            stop_at,
        } => {
            let cfg = common.experiment()?;
            let hyper = match hyper {
                Some(h) => Some(h),
                None => cfg.grids.values(method)[0],
            };
            method.configure(hyper, cfg.fisher_damping)?;
            let id = CellId {
                method,
                hyper,
                seed: common.seed.unwrap_or(cfg.seeds[0]),
            };
            let out = common.out_dir(&cfg);
            let plan = CheckpointPlan {
                path: out.join(format!("{}.ckpt", id.label())),
                every: checkpoint_every,
            };
            let data = generate(&cfg.task, cfg.data_seed, cfg.noise_seed)?;
            finish_cell(&cfg, &data, CellState::init(&cfg, id)?, &plan, stop_at, &out)
        }
        Command::Resume {
            common,
            checkpoint,
            checkpoint_every,
            stop_at,
        } => {
            let cfg = common.experiment()?;
            let state = load_checkpoint(&checkpoint)?.into_state(&cfg)?;
            println!("resuming {} at iteration {}", state.id.label(), state.iteration);
            let out = common.out_dir(&cfg);
            let plan = CheckpointPlan {
                path: checkpoint,
                every: checkpoint_every,
            };
            let data = generate(&cfg.task, cfg.data_seed, cfg.noise_seed)?;
            finish_cell(&cfg, &data, state, &plan, stop_at, &out)
        }
        Command::Bench { common, data, selection } => {
            let mut cfg = common.experiment()?;
            if let Some(s) = common.seed {
                let n = cfg.seeds.len() as u64;
                cfg.seeds = (s..s + n).collect();
            }
            if let Some(sel) = selection {
                cfg.selection = sel;
            }
            bench(cfg, &common, data.as_deref())
        }
        Command::Sweep { common, methods, data } => {
            let mut cfg = common.experiment()?;
            if let Some(s) = common.seed {
                let n = cfg.seeds.len() as u64;
                cfg.seeds = (s..s + n).collect();
            }
            if methods.iter().any(|m| m.hyper_name().is_none()) {
                return Err(Error::Config("sweep methods must have a hyperparameter".into()));
            }
            cfg.methods = std::iter::once(Method::Erm).chain(methods).collect();
            cfg.methods.dedup();
            cfg.name = format!("{}-sweep", cfg.name);
            for &m in &cfg.methods[1..] {
                if cfg.grids.values(m).len() < 2 {
                    return Err(Error::Config(format!("a sweep needs at least two grid values for {m}")));
                }
            }
            bench(cfg, &common, data.as_deref())
        }
        Command::Report { common, reports } => {
            let loaded = reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let out = common.out.clone().unwrap_or_else(|| common.out_root.join("report"));
            if let [single] = loaded.as_slice() {
                emit_report(single, &out)?;
                print_summary(single);
            } else {
                mkdir(&out)?;
                let refs: Vec<&RunReport> = loaded.iter().collect();
                emit_table(&refs, &out.join("table1.csv"))?;
                for r in &loaded {
                    print_summary(r);
                }
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}

fn bench(mut cfg: ExperimentConfig, common: &Common, data_dir: Option<&Path>) -> Result<bool> {
    cfg.validate()?;
    let data = datasets(&mut cfg, data_dir)?;
    let report = run_experiment_with_data(&cfg, &data, common.jobs)?;
    let out = common.out_dir(&cfg);
    emit_report(&report, &out)?;
    let timings: Vec<_> = report
        .records
        .iter()
        .map(|r| serde_json::json!({"cell": r.id().label(), "wall_time_s": r.wall_time_s}))
        .collect();
    write(
        &out.join("timings.json"),
        &(serde_json::to_string_pretty(&timings).expect("timings serialise") + "\n"),
    )?;
    print_summary(&report);
    println!("wrote {}", out.display());
    Ok(report.records.iter().any(|r| r.ok()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
