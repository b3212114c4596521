//! Layer building blocks shared by the codec, diffusion, GAN and detector
//! networks: 3x3 convolutions and dense layers, with the bind pattern that
//! registers parameters as graph leaves for one forward/backward pass.

use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 3x3 convolution parameters. Kernel [c_out, c_in, 3, 3], bias [c_out].
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv3x3 {
    /// He-style init scaled by `gain`; `gain = 0` gives an all-zero layer.
    pub fn init(c_in: usize, c_out: usize, dilation: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain * (2.0 / (c_in as f64 * 9.0)).sqrt();
        let mut weight = Tensor::zeros(&[c_out, c_in, 3, 3]);
        if gain != 0.0 {
            for v in weight.data_mut() {
                *v = std * rng.normal();
            }
        }
        Conv3x3 {
            weight,
            bias: Tensor::zeros(&[c_out]),
            dilation,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv3x3 {
        BoundConv3x3 {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            dilation: self.dilation,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv3x3 {
    pub weight: VarId,
    pub bias: VarId,
    pub dilation: usize,
}

impl BoundConv3x3 {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        g.conv2d(x, self.weight, Some(self.bias), self.dilation)
    }

    pub fn param_ids(&self) -> Vec<VarId> {
        vec![self.weight, self.bias]
    }
}

/// Dense layer: weight [out, in], bias [out, 1]; input/output are column
/// vectors [n, 1].
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn init(n_in: usize, n_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain * (1.0 / n_in as f64).sqrt();
        let mut weight = Tensor::zeros(&[n_out, n_in]);
        if gain != 0.0 {
            for v in weight.data_mut() {
                *v = std * rng.normal();
            }
        }
        Dense {
            weight,
            bias: Tensor::zeros(&[n_out, 1]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDense {
        BoundDense {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: VarId,
    pub bias: VarId,
}

impl BoundDense {
    pub fn apply(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        let wx = g.matmul(self.weight, x)?;
        g.add(wx, self.bias)
    }

    pub fn param_ids(&self) -> Vec<VarId> {
        vec![self.weight, self.bias]
    }
}

/// Harvest gradients for a canonical parameter order, zeros where untouched.
pub fn collect_grads(
    g: &mut Graph,
    grads: &mut crate::graph::Gradients,
    ids: &[VarId],
) -> Vec<Tensor> {
    ids.iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect()
}

/// Elementwise sum of per-sample gradient lists, for batch averaging.
pub fn accumulate(total: &mut Vec<Tensor>, sample: &[Tensor]) {
    if total.is_empty() {
        total.extend_from_slice(sample);
        return;
    }
    for (t, s) in total.iter_mut().zip(sample) {
        let td = t.data_mut();
        for (a, b) in td.iter_mut().zip(s.data()) {
            *a += b;
        }
    }
}

pub fn scale_grads(grads: &mut [Tensor], factor: f64) {
    for t in grads {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}
