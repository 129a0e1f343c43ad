//! Layer specifications and sequential stacks.

use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{kaiming_uniform, ParamNodes, ParameterSet};
use crate::nn::tensor::Tensor;
use crate::{Error, Result};
use rand_chacha::ChaCha20Rng;

/// One layer of a sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    TConv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
    /// `(B, C*L)` back to `(B, C, L)`: the decoder's unflatten.
    Reshape {
        channels: usize,
        length: usize,
    },
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            }
            | LayerSpec::TConv1d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => *in_ch > 0 && *out_ch > 0 && *kernel > 0 && *stride > 0,
            LayerSpec::BatchNorm { channels } => *channels > 0,
            LayerSpec::LeakyRelu { slope } => *slope > 0.0 && *slope < 1.0,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => *in_features > 0 && *out_features > 0,
            LayerSpec::Flatten => true,
            LayerSpec::Reshape { channels, length } => *channels > 0 && *length > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer hyperparameters: {self:?}")))
        }
    }
}

/// Forward mode: training uses batch statistics, eval uses frozen running
/// statistics. `update_stats` controls whether a training pass also writes
/// the running buffers (gradient checking must not).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { update_stats: bool },
    Eval,
}

const BN_MOMENTUM: f64 = 0.9;

/// A sequential stack owning its parameters and batch-norm running buffers.
#[derive(Debug, Clone)]
pub struct Stack {
    specs: Vec<LayerSpec>,
    pub params: ParameterSet,
    /// `(running_mean, running_var)` per batch-norm layer, in layer order.
    buffers: Vec<(Tensor, Tensor)>,
}

impl Stack {
    /// Build a stack with Kaiming-uniform weights (gain matched to
    /// `init_slope`), zero biases, unit gammas.
    pub fn new(prefix: &str, specs: Vec<LayerSpec>, init_slope: f64, rng: &mut ChaCha20Rng) -> Result<Self> {
        let mut params = ParameterSet::new();
        let mut buffers = Vec::new();
        for (li, spec) in specs.iter().enumerate() {
            spec.validate()?;
            match spec {
                LayerSpec::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    params.add(
                        format!("{prefix}.{li}.weight"),
                        kaiming_uniform(&[*out_ch, *in_ch, *kernel], init_slope, rng),
                    );
                    params.add(format!("{prefix}.{li}.bias"), Tensor::zeros(&[*out_ch]));
                }
                LayerSpec::TConv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    params.add(
                        format!("{prefix}.{li}.weight"),
                        kaiming_uniform(&[*in_ch, *out_ch, *kernel], init_slope, rng),
                    );
                    params.add(format!("{prefix}.{li}.bias"), Tensor::zeros(&[*out_ch]));
                }
                LayerSpec::BatchNorm { channels } => {
                    params.add(format!("{prefix}.{li}.gamma"), Tensor::full(&[*channels], 1.0));
                    params.add(format!("{prefix}.{li}.beta"), Tensor::zeros(&[*channels]));
                    buffers.push((Tensor::zeros(&[*channels]), Tensor::full(&[*channels], 1.0)));
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    params.add(
                        format!("{prefix}.{li}.weight"),
                        kaiming_uniform(&[*out_features, *in_features], init_slope, rng),
                    );
                    params.add(format!("{prefix}.{li}.bias"), Tensor::zeros(&[*out_features]));
                }
                LayerSpec::LeakyRelu { .. } | LayerSpec::Flatten | LayerSpec::Reshape { .. } => {}
            }
        }
        Ok(Self {
            specs,
            params,
            buffers,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn specs_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.specs
    }

    pub fn buffers(&self) -> &[(Tensor, Tensor)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Vec<(Tensor, Tensor)> {
        &mut self.buffers
    }

    /// Run the stack on graph `g`. `pnodes` must come from binding
    /// `self.params` onto the same graph.
    pub fn forward(&mut self, g: &mut Graph, input: NodeId, mode: Mode, pnodes: &ParamNodes) -> Result<NodeId> {
        let mut x = input;
        let mut pi = 0;
        let mut bi = 0;
        for spec in &self.specs {
            match spec {
                LayerSpec::Conv1d {
                    stride, padding, ..
                } => {
                    let (w, b) = (pnodes.ids[pi], pnodes.ids[pi + 1]);
                    pi += 2;
                    x = g.conv1d(x, w, b, *stride, *padding)?;
                }
                LayerSpec::TConv1d {
                    stride, padding, ..
                } => {
                    let (w, b) = (pnodes.ids[pi], pnodes.ids[pi + 1]);
                    pi += 2;
                    x = g.tconv1d(x, w, b, *stride, *padding)?;
                }
                LayerSpec::BatchNorm { channels } => {
                    let (gamma, beta) = (pnodes.ids[pi], pnodes.ids[pi + 1]);
                    pi += 2;
                    match mode {
                        Mode::Train { update_stats } => {
                            if update_stats {
                                let value = g.value(x).clone();
                                update_running(&mut self.buffers[bi], &value, *channels)?;
                            }
                            x = g.batchnorm_train(x, gamma, beta)?;
                        }
                        Mode::Eval => {
                            let (rm, rv) = &self.buffers[bi];
                            x = g.batchnorm_eval(x, gamma, beta, rm, rv)?;
                        }
                    }
                    bi += 1;
                }
                LayerSpec::LeakyRelu { slope } => {
                    x = g.leaky_relu(x, *slope)?;
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (pnodes.ids[pi], pnodes.ids[pi + 1]);
                    pi += 2;
                    x = g.dense(x, w, b)?;
                }
                LayerSpec::Flatten => {
                    x = g.flatten(x)?;
                }
                LayerSpec::Reshape { channels, length } => {
                    let b = g.value(x).shape()[0];
                    x = g.reshape(x, &[b, *channels, *length])?;
                }
            }
        }
        Ok(x)
    }
}

fn update_running(buffer: &mut (Tensor, Tensor), x: &Tensor, channels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[1] != channels {
        return Err(Error::Shape(format!(
            "batchnorm input {s:?} does not match {channels} channels"
        )));
    }
    let (bsz, _, l) = (s[0], s[1], s[2]);
    let n = (bsz * l) as f64;
    for cc in 0..channels {
        let mut sum = 0.0;
        for b in 0..bsz {
            for li in 0..l {
                sum += x.at3(b, cc, li);
            }
        }
        let mean = sum / n;
        let mut var = 0.0;
        for b in 0..bsz {
            for li in 0..l {
                let d = x.at3(b, cc, li) - mean;
                var += d * d;
            }
        }
        var /= n;
        let rm = &mut buffer.0.data_mut()[cc];
        *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean;
        let rv = &mut buffer.1.data_mut()[cc];
        *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var;
    }
    Ok(())
}
