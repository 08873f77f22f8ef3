//! Partitioned parameter storage and neural building blocks.
//!
//! Every model parameter lives in a [`ParamVector`], split into a θ-block for
//! the scientific constants and a φ-block for network weights. Networks never
//! own weights; they bind named views of the φ-block onto a tape per forward.

mod conv;
mod mlp;

pub use conv::{BnMode, ConvBinding, ConvNetSpec};
pub use mlp::{mlp_forward, MlpBinding, MlpSpec};

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, Var};
use crate::{binio, rng, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Theta,
    Phi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub block: Block,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named sub-tensors and where they sit inside the two flat blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    theta_len: usize,
    phi_len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a named sub-tensor at the end of `block`.
    pub fn push(&mut self, name: impl Into<String>, block: Block, shape: &[usize]) {
        let len: usize = shape.iter().product();
        let offset = match block {
            Block::Theta => &mut self.theta_len,
            Block::Phi => &mut self.phi_len,
        };
        self.entries.push(LayoutEntry {
            name: name.into(),
            block,
            offset: *offset,
            shape: shape.to_vec(),
        });
        *offset += len;
    }

    pub fn from_entries(entries: Vec<LayoutEntry>) -> Result<Self> {
        let theta_len = entries
            .iter()
            .filter(|e| e.block == Block::Theta)
            .map(LayoutEntry::len)
            .sum();
        let phi_len = entries
            .iter()
            .filter(|e| e.block == Block::Phi)
            .map(LayoutEntry::len)
            .sum();
        let layout = Layout {
            entries,
            theta_len,
            phi_len,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Checks that each block is tiled exactly, without gaps or overlaps.
    pub fn validate(&self) -> Result<()> {
        for (block, len) in [(Block::Theta, self.theta_len), (Block::Phi, self.phi_len)] {
            let mut spans: Vec<(usize, usize)> = self
                .entries
                .iter()
                .filter(|e| e.block == block)
                .map(|e| (e.offset, e.len()))
                .collect();
            spans.sort_unstable();
            let mut cursor = 0;
            for (off, n) in spans {
                if off != cursor {
                    return Err(Error::Layout(format!(
                        "{block:?} block has a gap or overlap at offset {off} (expected {cursor})"
                    )));
                }
                cursor += n;
            }
            if cursor != len {
                return Err(Error::Layout(format!(
                    "{block:?} block covers {cursor} of {len} entries"
                )));
            }
        }
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Layout(format!("duplicate name `{}`", w[0])));
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&LayoutEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn theta_len(&self) -> usize {
        self.theta_len
    }

    pub fn phi_len(&self) -> usize {
        self.phi_len
    }

    pub fn theta_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.block == Block::Theta)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Taped view of a named φ sub-tensor, sliced out of the flat φ leaf.
    pub fn bind<'t>(&self, name: &str, block_var: Var<'t>) -> Result<Var<'t>> {
        let e = self.entry(name)?;
        Ok(block_var.slice(0, e.offset, e.len())?.reshape(&e.shape)?)
    }
}

/// Policy for the initial θ-block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum ThetaInit {
    Fixed { values: Vec<f64> },
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

impl ThetaInit {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            ThetaInit::Fixed { values } => {
                if values.len() != n {
                    return Err(Error::config(format!(
                        "fixed θ init has {} values, model declares {n}",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
            ThetaInit::Uniform { low, high } => {
                if low.len() != n || high.len() != n {
                    return Err(Error::config(format!(
                        "uniform θ init bounds must have {n} entries"
                    )));
                }
                let mut r = rng::stream(seed, "theta-init", 0);
                low.iter()
                    .zip(high)
                    .map(|(&l, &h)| {
                        if !(l <= h) {
                            return Err(Error::config(format!("empty θ init range [{l}, {h}]")));
                        }
                        Ok(if l == h { l } else { r.random_range(l..h) })
                    })
                    .collect()
            }
        }
    }
}

/// Parses `fixed(a, b, ...)` or `uniform(lo1:hi1, lo2:hi2, ...)`.
impl FromStr for ThetaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| Error::config(format!("unknown θ init policy `{s}`")))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::config(format!("unterminated θ init policy `{s}`")))?;
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number `{t}` in θ init policy")))
        };
        match name.trim() {
            "fixed" => Ok(ThetaInit::Fixed {
                values: args.split(',').map(num).collect::<Result<_>>()?,
            }),
            "uniform" => {
                let (mut low, mut high) = (Vec::new(), Vec::new());
                for pair in args.split(',') {
                    let (l, h) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::config(format!("expected lo:hi, got `{pair}`")))?;
                    low.push(num(l)?);
                    high.push(num(h)?);
                }
                Ok(ThetaInit::Uniform { low, high })
            }
            other => Err(Error::config(format!("unknown θ init policy `{other}`"))),
        }
    }
}

/// Neural part of a hybrid model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NeuralSpec {
    Mlp(MlpSpec),
    Conv(ConvNetSpec),
}

impl NeuralSpec {
    fn register(&self, layout: &mut Layout) {
        match self {
            NeuralSpec::Mlp(s) => s.register(layout),
            NeuralSpec::Conv(s) => s.register(layout),
        }
    }
}

/// Kaiming-uniform bound for ReLU layers: `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub values: Vec<f64>,
}

/// Flat parameter store with a hard θ / φ partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    theta: Vec<f64>,
    phi: Vec<f64>,
    buffers: Vec<Buffer>,
}

impl ParamVector {
    pub fn from_parts(
        layout: Layout,
        theta: Vec<f64>,
        phi: Vec<f64>,
        buffers: Vec<Buffer>,
    ) -> Result<Self> {
        layout.validate()?;
        if theta.len() != layout.theta_len() || phi.len() != layout.phi_len() {
            return Err(Error::Layout(format!(
                "blocks of length ({}, {}) do not match layout ({}, {})",
                theta.len(),
                phi.len(),
                layout.theta_len(),
                layout.phi_len()
            )));
        }
        Ok(ParamVector {
            layout,
            theta,
            phi,
            buffers,
        })
    }

    /// Seeded initialisation: θ from `theta_init`, φ weights Kaiming-uniform,
    /// biases zero, batch-norm scales one.
    pub fn init(
        theta_names: &[&str],
        neural: &NeuralSpec,
        theta_init: &ThetaInit,
        seed: u64,
    ) -> Result<Self> {
        let mut layout = Layout::new();
        for name in theta_names {
            layout.push(format!("theta.{name}"), Block::Theta, &[1]);
        }
        neural.register(&mut layout);
        let theta = theta_init.sample(theta_names.len(), seed)?;
        let mut phi = vec![0.0; layout.phi_len()];
        let mut r = rng::stream(seed, "phi-init", 0);
        for e in layout.entries().iter().filter(|e| e.block == Block::Phi) {
            let dst = &mut phi[e.offset..e.offset + e.len()];
            if e.name.ends_with(".weight") {
                let fan_in = match neural {
                    NeuralSpec::Mlp(_) => e.shape[0],
                    NeuralSpec::Conv(_) => e.shape[1..].iter().product(),
                };
                let b = kaiming_bound(fan_in);
                dst.iter_mut().for_each(|v| *v = r.random_range(-b..b));
            } else if e.name.ends_with(".gamma") {
                dst.fill(1.0);
            }
        }
        let buffers = match neural {
            NeuralSpec::Conv(s) => s.initial_buffers(),
            NeuralSpec::Mlp(_) => Vec::new(),
        };
        ParamVector::from_parts(layout, theta, phi, buffers)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.values.as_slice())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.buffers
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.values)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Read-only view of a named sub-tensor.
    pub fn view(&self, name: &str) -> Result<&[f64]> {
        let e = self.layout.entry(name)?;
        let block = match e.block {
            Block::Theta => &self.theta,
            Block::Phi => &self.phi,
        };
        Ok(&block[e.offset..e.offset + e.len()])
    }

    /// Mutable view that writes through to the flat block.
    pub fn view_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let e = self.layout.entry(name)?.clone();
        let block = match e.block {
            Block::Theta => &mut self.theta,
            Block::Phi => &mut self.phi,
        };
        Ok(&mut block[e.offset..e.offset + e.len()])
    }

    /// Copy of a named sub-tensor with its declared shape.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let shape = self.layout.entry(name)?.shape.clone();
        Ok(Tensor::new(shape, self.view(name)?.to_vec())?)
    }

    /// θ followed by φ.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + self.phi.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nt = self.theta.len();
        if flat.len() != nt + self.phi.len() {
            return Err(Error::Layout(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                nt + self.phi.len()
            )));
        }
        self.theta.copy_from_slice(&flat[..nt]);
        self.phi.copy_from_slice(&flat[nt..]);
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut binio::Writer) {
        w.u32(self.layout.entries.len() as u32);
        for e in &self.layout.entries {
            w.str(&e.name);
            w.u8(match e.block {
                Block::Theta => 0,
                Block::Phi => 1,
            });
            w.u64(e.offset as u64);
            w.u32(e.shape.len() as u32);
            for &d in &e.shape {
                w.u64(d as u64);
            }
        }
        w.u32(self.buffers.len() as u32);
        for b in &self.buffers {
            w.str(&b.name);
            w.u64(b.values.len() as u64);
        }
        w.f64s(&self.theta);
        w.f64s(&self.phi);
        for b in &self.buffers {
            w.f64s(&b.values);
        }
    }

    pub(crate) fn read(r: &mut binio::Reader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let block = match r.u8()? {
                0 => Block::Theta,
                1 => Block::Phi,
                b => return Err(r.err(format!("unknown block tag {b}"))),
            };
            let offset = r.u64()? as usize;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            entries.push(LayoutEntry {
                name,
                block,
                offset,
                shape,
            });
        }
        let layout = Layout::from_entries(entries)?;
        let nb = r.u32()? as usize;
        let mut specs = Vec::with_capacity(nb);
        for _ in 0..nb {
            let name = r.str()?;
            specs.push((name, r.u64()? as usize));
        }
        let theta = r.f64s(layout.theta_len())?;
        let phi = r.f64s(layout.phi_len())?;
        let mut buffers = Vec::with_capacity(nb);
        for (name, len) in specs {
            buffers.push(Buffer {
                name,
                values: r.f64s(len)?,
            });
        }
        ParamVector::from_parts(layout, theta, phi, buffers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum_like(seed: u64) -> ParamVector {
        let spec = NeuralSpec::Mlp(MlpSpec::new(2, vec![128, 128], 1));
        ParamVector::init(
            &["omega"],
            &spec,
            &ThetaInit::Fixed { values: vec![0.5] },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NeuralSpec::Mlp(MlpSpec::new(2, vec![128, 128], 2));
        let policy = ThetaInit::Uniform {
            low: vec![0.0],
            high: vec![1.0],
        };
        let a = ParamVector::init(&["w"], &spec, &policy, 0).unwrap();
        let b = ParamVector::init(&["w"], &spec, &policy, 0).unwrap();
        assert_eq!(a, b);
        let c = ParamVector::init(&["w"], &spec, &policy, 1).unwrap();
        assert_ne!(a.phi(), c.phi());
    }

    #[test]
    fn fixed_theta_policy() {
        let pv = pendulum_like(0);
        assert_eq!(pv.theta(), &[0.5]);
        assert_eq!(pv.view("theta.omega").unwrap(), &[0.5]);
    }

    #[test]
    fn kaiming_bound_for_fan_in_128() {
        let b = kaiming_bound(128);
        assert!((b - 0.21650635094610965).abs() < 1e-15);
        let pv = pendulum_like(7);
        let w = pv.view("mlp.1.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= b));
        assert!(w.iter().any(|v| v.abs() > 0.9 * b));
        assert!(pv.view("mlp.1.bias").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_policy_is_rejected() {
        assert!("gaussian(0, 1)".parse::<ThetaInit>().is_err());
        assert_eq!(
            "fixed(0.5)".parse::<ThetaInit>().unwrap(),
            ThetaInit::Fixed { values: vec![0.5] }
        );
        assert_eq!(
            "uniform(0.1:0.9, 2:3)".parse::<ThetaInit>().unwrap(),
            ThetaInit::Uniform {
                low: vec![0.1, 2.0],
                high: vec![0.9, 3.0]
            }
        );
    }

    #[test]
    fn views_write_through() {
        let mut pv = pendulum_like(0);
        pv.view_mut("mlp.2.bias").unwrap()[0] = 3.25;
        assert_eq!(pv.view("mlp.2.bias").unwrap(), &[3.25]);
        let e = pv.layout().entry("mlp.2.bias").unwrap().clone();
        assert_eq!(pv.phi()[e.offset], 3.25);
        assert!(matches!(pv.view("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn blocks_do_not_alias() {
        let mut pv = pendulum_like(1);
        let phi = pv.phi().to_vec();
        pv.theta_mut()[0] = 9.0;
        assert_eq!(pv.phi(), &phi[..]);
        let theta = pv.theta().to_vec();
        pv.phi_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(pv.theta(), &theta[..]);
    }

    #[test]
    fn layout_tiles_blocks() {
        let pv = pendulum_like(0);
        let total: usize = pv
            .layout()
            .entries()
            .iter()
            .filter(|e| e.block == Block::Phi)
            .map(LayoutEntry::len)
            .sum();
        assert_eq!(total, pv.phi().len());
        assert_eq!(pv.phi().len(), 2 * 128 + 128 + 128 * 128 + 128 + 128 + 1);

        let mut bad = pv.layout().entries().to_vec();
        bad[2].offset += 1;
        assert!(Layout::from_entries(bad).is_err());
    }
}
