use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{Block, Buffer, Layout, ParamVector, BN_EPS, BN_MOMENTUM};
use crate::tensor::{BatchStats, Padding, TensorError, Var};
use crate::{Error, Result};

/// Same-size stack of `k×k` convolutions with ReLU (and optional batch norm)
/// between layers and a linear final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub batchnorm: bool,
    #[serde(default)]
    pub padding: Padding,
}

impl ConvNetSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_channels];
        w.extend(&self.hidden_channels);
        w.push(self.out_channels);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "conv kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    fn has_bn(&self, layer: usize) -> bool {
        self.batchnorm && layer < self.hidden_channels.len()
    }

    pub(super) fn register(&self, layout: &mut Layout) {
        let k = self.kernel_size;
        for (i, pair) in self.widths().windows(2).enumerate() {
            layout.push(format!("conv.{i}.weight"), Block::Phi, &[pair[1], pair[0], k, k]);
            layout.push(format!("conv.{i}.bias"), Block::Phi, &[pair[1]]);
            if self.has_bn(i) {
                layout.push(format!("conv.{i}.bn.gamma"), Block::Phi, &[pair[1]]);
                layout.push(format!("conv.{i}.bn.beta"), Block::Phi, &[pair[1]]);
            }
        }
    }

    pub(super) fn initial_buffers(&self) -> Vec<Buffer> {
        let mut out = Vec::new();
        for (i, &c) in self.hidden_channels.iter().enumerate() {
            if self.batchnorm {
                out.push(Buffer {
                    name: format!("conv.{i}.bn.running_mean"),
                    values: vec![0.0; c],
                });
                out.push(Buffer {
                    name: format!("conv.{i}.bn.running_var"),
                    values: vec![1.0; c],
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and record them.
    Train,
    /// Normalise with the running statistics stored in the parameter vector.
    Eval,
}

struct ConvLayer<'t> {
    weight: Var<'t>,
    bias: Var<'t>,
    bn: Option<(Var<'t>, Var<'t>)>,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

pub struct ConvBinding<'t> {
    spec: ConvNetSpec,
    layers: Vec<ConvLayer<'t>>,
    mode: BnMode,
    stats: RefCell<Vec<(usize, BatchStats)>>,
}

impl<'t> ConvBinding<'t> {
    pub fn bind(spec: &ConvNetSpec, pv: &ParamVector, phi: Var<'t>, mode: BnMode) -> Result<Self> {
        spec.validate()?;
        let layout = pv.layout();
        let layers = (0..spec.widths().len() - 1)
            .map(|i| {
                let bn = if spec.has_bn(i) {
                    Some((
                        layout.bind(&format!("conv.{i}.bn.gamma"), phi)?,
                        layout.bind(&format!("conv.{i}.bn.beta"), phi)?,
                    ))
                } else {
                    None
                };
                let running = if spec.has_bn(i) && mode == BnMode::Eval {
                    Some((
                        pv.buffer(&format!("conv.{i}.bn.running_mean"))?.to_vec(),
                        pv.buffer(&format!("conv.{i}.bn.running_var"))?.to_vec(),
                    ))
                } else {
                    None
                };
                Ok(ConvLayer {
                    weight: layout.bind(&format!("conv.{i}.weight"), phi)?,
                    bias: layout.bind(&format!("conv.{i}.bias"), phi)?,
                    bn,
                    running,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConvBinding {
            spec: spec.clone(),
            layers,
            mode,
            stats: RefCell::new(Vec::new()),
        })
    }

    /// `x: [batch, in_ch, d, d]` to `[batch, out_ch, d, d]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "convnet_forward",
                lhs: s,
                rhs: vec![self.spec.in_channels],
            }
            .into());
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.conv2d(layer.weight, Some(layer.bias), self.spec.padding)?;
            if let Some((gamma, beta)) = layer.bn {
                h = match (self.mode, &layer.running) {
                    (BnMode::Eval, Some((rm, rv))) => h.batch_norm_eval(gamma, beta, rm, rv, BN_EPS)?,
                    _ => {
                        let (out, stats) = h.batch_norm(gamma, beta, BN_EPS)?;
                        self.stats.borrow_mut().push((i, stats));
                        out
                    }
                };
            }
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Batch statistics recorded by training-mode calls, in call order.
    pub fn take_stats(&self) -> Vec<(usize, BatchStats)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

impl ParamVector {
    /// Folds recorded batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            let rm = self.buffer_mut(&format!("conv.{layer}.bn.running_mean"))?;
            for (r, m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffer_mut(&format!("conv.{layer}.bn.running_var"))?;
            for (r, v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NeuralSpec, ThetaInit};
    use crate::tensor::{Tape, Tensor};

    fn spec(batchnorm: bool, hidden: Vec<usize>) -> ConvNetSpec {
        ConvNetSpec {
            in_channels: 2,
            hidden_channels: hidden,
            out_channels: 2,
            kernel_size: 3,
            batchnorm,
            padding: Padding::Zero,
        }
    }

    fn params(s: &ConvNetSpec) -> ParamVector {
        ParamVector::init(
            &[],
            &NeuralSpec::Conv(s.clone()),
            &ThetaInit::Fixed { values: vec![] },
            5,
        )
        .unwrap()
    }

    fn input(batch: usize, d: usize) -> Tensor {
        let n = batch * 2 * d * d;
        Tensor::new(
            vec![batch, 2, d, d],
            (0..n).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.4).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let s = spec(false, vec![4]);
        let mut pv = params(&s);
        pv.phi_mut().fill(0.0);
        let tape = Tape::new();
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let net = ConvBinding::bind(&s, &pv, phi, BnMode::Train).unwrap();
        let y = net.forward(tape.constant(input(2, 5))).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 5, 5]);
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_kernel_single_layer_is_identity() {
        let s = ConvNetSpec {
            in_channels: 1,
            hidden_channels: vec![],
            out_channels: 1,
            kernel_size: 3,
            batchnorm: false,
            padding: Padding::Zero,
        };
        let mut pv = params(&s);
        pv.phi_mut().fill(0.0);
        pv.view_mut("conv.0.weight").unwrap()[4] = 1.0;
        let tape = Tape::new();
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let net = ConvBinding::bind(&s, &pv, phi, BnMode::Train).unwrap();
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let y = net.forward(tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn batch_of_one_in_training_mode_errors() {
        let s = spec(true, vec![4]);
        let pv = params(&s);
        let tape = Tape::new();
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let net = ConvBinding::bind(&s, &pv, phi, BnMode::Train).unwrap();
        assert!(net.forward(tape.constant(input(1, 4))).is_err());
        let eval = ConvBinding::bind(&s, &pv, phi, BnMode::Eval).unwrap();
        assert!(eval.forward(tape.constant(input(1, 4))).is_ok());
    }

    #[test]
    fn spatial_size_below_kernel_is_rejected() {
        let s = spec(false, vec![]);
        let pv = params(&s);
        let tape = Tape::new();
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let net = ConvBinding::bind(&s, &pv, phi, BnMode::Train).unwrap();
        assert!(net.forward(tape.constant(Tensor::zeros(&[2, 2, 2, 2]))).is_err());
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let mut s = spec(false, vec![]);
        s.kernel_size = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let s = spec(true, vec![3]);
        let mut pv = params(&s);
        let tape = Tape::new();
        let phi = tape.param(Tensor::from_vec(pv.phi().to_vec()));
        let net = ConvBinding::bind(&s, &pv, phi, BnMode::Train).unwrap();
        net.forward(tape.constant(input(3, 4))).unwrap();
        let stats = net.take_stats();
        assert_eq!(stats.len(), 1);
        pv.apply_bn_stats(&stats).unwrap();
        let rm = pv.buffer("conv.0.bn.running_mean").unwrap();
        let rv = pv.buffer("conv.0.bn.running_var").unwrap();
        for c in 0..3 {
            assert!((rm[c] - 0.1 * stats[0].1.mean[c]).abs() < 1e-15);
            assert!((rv[c] - (0.9 + 0.1 * stats[0].1.var[c])).abs() < 1e-15);
        }
    }
}
