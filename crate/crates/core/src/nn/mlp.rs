use serde::{Deserialize, Serialize};

use super::{Block, Layout};
use crate::tensor::{TensorError, Var};
use crate::Result;

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    /// Weights are stored `[in, out]` so a layer is `x · W + b`.
    pub(super) fn register(&self, layout: &mut Layout) {
        for (i, pair) in self.widths().windows(2).enumerate() {
            layout.push(format!("mlp.{i}.weight"), Block::Phi, &[pair[0], pair[1]]);
            layout.push(format!("mlp.{i}.bias"), Block::Phi, &[pair[1]]);
        }
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Layer views bound onto a tape once per forward and reused across calls.
pub struct MlpBinding<'t> {
    input_dim: usize,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> MlpBinding<'t> {
    pub fn bind(spec: &MlpSpec, layout: &Layout, phi: Var<'t>) -> Result<Self> {
        let layers = (0..spec.n_layers())
            .map(|i| {
                Ok((
                    layout.bind(&format!("mlp.{i}.weight"), phi)?,
                    layout.bind(&format!("mlp.{i}.bias"), phi)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MlpBinding {
            input_dim: spec.input_dim,
            layers,
        })
    }

    /// `x: [batch, input_dim]` to `[batch, output_dim]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                lhs: shape,
                rhs: vec![self.input_dim],
            }
            .into());
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

pub fn mlp_forward<'t>(spec: &MlpSpec, layout: &Layout, phi: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    MlpBinding::bind(spec, layout, phi)?.forward(x)
}
