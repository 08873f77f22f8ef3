//! `HSAM` checkpoints: a cell's parameters, optimiser state, iteration and
//! logged curve, bound to the hash of the experiment config.

use std::path::Path;

use super::run::{CellId, CellState, CurvePoint};
use super::ExperimentConfig;
use crate::binio::{Reader, Writer};
use crate::nn::ParamVector;
use crate::optim::{AdamState, Method};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSAM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: CellState,
}

impl Checkpoint {
    pub fn from_state(cfg: &ExperimentConfig, state: &CellState) -> Self {
        Checkpoint {
            config_hash: cfg.hash(),
            state: state.clone(),
        }
    }

    /// Returns the state if the checkpoint belongs to `cfg`.
    pub fn into_state(self, cfg: &ExperimentConfig) -> Result<CellState> {
        let want = cfg.hash();
        if self.config_hash != want {
            return Err(Error::config(format!(
                "checkpoint was written under config {} but the current config hashes to {}",
                &self.config_hash[..12.min(self.config_hash.len())],
                &want[..12]
            )));
        }
        if self.state.iteration > cfg.optimizer.iterations {
            return Err(Error::config("checkpoint is past the configured iteration count"));
        }
        Ok(self.state)
    }
}

fn opt_f64(w: &mut Writer, v: Option<f64>) {
    match v {
        Some(x) => {
            w.u8(1);
            w.f64s(&[x]);
        }
        None => w.u8(0),
    }
}

fn read_opt_f64(r: &mut Reader<'_>) -> Result<Option<f64>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.f64s(1)?[0])),
        t => Err(r.err(format!("bad option tag {t}"))),
    }
}

fn f64_vec(w: &mut Writer, v: &[f64]) {
    w.u64(v.len() as u64);
    w.f64s(v);
}

fn read_f64_vec(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let n = r.u64()? as usize;
    r.f64s(n)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let s = &ck.state;
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.str(&ck.config_hash);
    w.str(s.id.method.name());
    opt_f64(&mut w, s.id.hyper);
    w.u64(s.id.seed);
    w.u64(s.iteration as u64);
    f64_vec(&mut w, &s.theta_init);
    s.params.write(&mut w);
    w.u64(s.adam.t);
    f64_vec(&mut w, &s.adam.m);
    f64_vec(&mut w, &s.adam.v);
    w.u64(s.curve.len() as u64);
    for c in &s.curve {
        w.u64(c.iteration as u64);
        w.f64s(&[c.lr, c.loss]);
        opt_f64(&mut w, c.loss_perturbed);
        w.f64s(&[c.reg, c.grad_norm_theta, c.grad_norm_phi]);
        f64_vec(&mut w, &c.theta);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    w.finish(&tmp)?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let (mut r, version) = Reader::open(&bytes, path, CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.str()?;
    let method: Method = r.str()?.parse().map_err(|_| r.err("unknown method"))?;
    let hyper = read_opt_f64(&mut r)?;
    let seed = r.u64()?;
    let iteration = r.u64()? as usize;
    let theta_init = read_f64_vec(&mut r)?;
    let params = ParamVector::read(&mut r)?;
    let t = r.u64()?;
    let m = read_f64_vec(&mut r)?;
    let v = read_f64_vec(&mut r)?;
    let n = params.theta().len() + params.phi().len();
    if m.len() != n || v.len() != n {
        return Err(r.err("optimiser moments do not match the parameter count"));
    }
    let nc = r.u64()? as usize;
    let mut curve = Vec::with_capacity(nc.min(1 << 20));
    for _ in 0..nc {
        let iteration = r.u64()? as usize;
        let lr_loss = r.f64s(2)?;
        let loss_perturbed = read_opt_f64(&mut r)?;
        let rest = r.f64s(3)?;
        curve.push(CurvePoint {
            iteration,
            lr: lr_loss[0],
            loss: lr_loss[1],
            loss_perturbed,
            reg: rest[0],
            grad_norm_theta: rest[1],
            grad_norm_phi: rest[2],
            theta: read_f64_vec(&mut r)?,
        });
    }
    r.finish()?;
    Ok(Checkpoint {
        config_hash,
        state: CellState {
            id: CellId { method, hyper, seed },
            iteration,
            theta_init,
            params,
            adam: AdamState { m, v, t },
            curve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::run::{advance, complete, CheckpointPlan};
    use super::*;
    use crate::data::generate;
    use crate::hybrid::TaskKind;

    fn cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(TaskKind::ReactDiff);
        cfg.task.grid = 5;
        cfg.task.m_y = 2;
        cfg.task.splits.train = 3;
        cfg.task.splits.val = 2;
        cfg.task.splits.test = 2;
        cfg.model = super::super::default_model(&cfg.task);
        cfg.optimizer.iterations = 8;
        cfg.log_interval = 3;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cell.ck");
        let cfg = cfg();
        let data = generate(&cfg.task, 1, 2).unwrap();
        let id = CellId {
            method: Method::Fsam,
            hyper: Some(0.05),
            seed: 4,
        };
        let straight = complete(&cfg, &data, CellState::init(&cfg, id).unwrap(), None).unwrap();

        let mut s = CellState::init(&cfg, id).unwrap();
        let plan = CheckpointPlan {
            path: path.clone(),
            every: 4,
        };
        advance(&cfg, &data, &mut s, 4, Some(&plan)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.state, s);
        assert!(!ck.state.params.buffers().is_empty());
        let resumed = complete(&cfg, &data, ck.into_state(&cfg).unwrap(), None).unwrap();
        assert_eq!(resumed, CellRecord { wall_time_s: resumed.wall_time_s, ..straight });
    }

    #[test]
    fn altered_config_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cell.ck");
        let cfg = cfg();
        let id = CellId {
            method: Method::Erm,
            hyper: None,
            seed: 0,
        };
        let s = CellState::init(&cfg, id).unwrap();
        save_checkpoint(&path, &Checkpoint::from_state(&cfg, &s)).unwrap();
        let mut other = cfg.clone();
        other.optimizer.lr *= 3.0;
        let ck = load_checkpoint(&path).unwrap();
        assert!(matches!(ck.into_state(&other), Err(Error::Config(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }

    use super::super::run::CellRecord;
}
