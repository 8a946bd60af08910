//! The six candidate operations and the composite unit they are built from.
//!
//! Every candidate is one or two "normalize, rectify, convolve" units. Kernel
//! extents are written in `(z, y, x)` order, so an in-plane `k x k x 1` kernel
//! becomes `[1, k, k]` and a through-plane `1 x 1 x k` kernel `[k, 1, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "Conv2D_k3")]
    Conv2dK3,
    #[serde(rename = "Conv2D_k5")]
    Conv2dK5,
    #[serde(rename = "Conv3D_k3")]
    Conv3dK3,
    #[serde(rename = "Conv3D_k5")]
    Conv3dK5,
    #[serde(rename = "P3D_k3")]
    P3dK3,
    #[serde(rename = "P3D_k5")]
    P3dK5,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Conv2dK3,
        OpKind::Conv2dK5,
        OpKind::Conv3dK3,
        OpKind::Conv3dK5,
        OpKind::P3dK3,
        OpKind::P3dK5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2dK3 => "Conv2D_k3",
            OpKind::Conv2dK5 => "Conv2D_k5",
            OpKind::Conv3dK3 => "Conv3D_k3",
            OpKind::Conv3dK5 => "Conv3D_k5",
            OpKind::P3dK3 => "P3D_k3",
            OpKind::P3dK5 => "P3D_k5",
        }
    }

    pub fn kernel_size(self) -> usize {
        match self {
            OpKind::Conv2dK3 | OpKind::Conv3dK3 | OpKind::P3dK3 => 3,
            _ => 5,
        }
    }

    /// Kernel extents of each composite unit, in `(z, y, x)` order.
    pub fn factor_kernels(self) -> Vec<[usize; 3]> {
        let k = self.kernel_size();
        match self {
            OpKind::Conv2dK3 | OpKind::Conv2dK5 => vec![[1, k, k]],
            OpKind::Conv3dK3 | OpKind::Conv3dK5 => vec![[k, k, k]],
            OpKind::P3dK3 | OpKind::P3dK5 => vec![[1, k, k], [k, 1, 1]],
        }
    }

    /// Whether the op mixes information across z.
    pub fn sees_through_plane(self) -> bool {
        !matches!(self, OpKind::Conv2dK3 | OpKind::Conv2dK5)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NasError::Config(format!("unknown op kind {s:?}")))
    }
}

/// Whether normalization uses batch statistics or the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalization parameters plus their running statistics.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.bn.gamma"), ParamKind::Weight, Tensor::full(vec![channels], T::one())),
            beta: store.add(format!("{prefix}.bn.beta"), ParamKind::Weight, Tensor::zeros(vec![channels])),
            running_mean: store.add(format!("{prefix}.bn.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![channels])),
            running_var: store.add(format!("{prefix}.bn.running_var"), ParamKind::Buffer, Tensor::full(vec![channels], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, (self.running_mean, self.running_var), store, mode == Mode::Train)
    }
}

/// Plain convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            kernel: store.add_kernel(&format!("{prefix}.conv.weight"), [c_out, c_in, kernel[0], kernel[1], kernel[2]], rng),
            bias: store.add(format!("{prefix}.conv.bias"), ParamKind::Weight, Tensor::zeros(vec![c_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv(x, w, Some(b))
    }
}

/// One "normalize, rectify, convolve" unit.
#[derive(Debug, Clone)]
pub struct Composite {
    pub norm: NormParams,
    pub conv: ConvParams,
}

impl Composite {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            norm: NormParams::new(store, prefix, c_in),
            conv: ConvParams::new(store, prefix, c_in, c_out, kernel, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let n = self.norm.forward(g, store, x, mode)?;
        let r = g.relu(n);
        self.conv.forward(g, store, r)
    }
}

/// Parameters of one candidate operation: one unit, or two for P3D.
#[derive(Debug, Clone)]
pub struct OpWeights {
    pub kind: OpKind,
    pub units: Vec<Composite>,
}

impl OpWeights {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: OpKind,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let units = kind
            .factor_kernels()
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let ci = if i == 0 { c_in } else { c_out };
                Composite::new(store, &format!("{prefix}.{}.u{i}", kind.name()), ci, c_out, k, rng)
            })
            .collect();
        Self { kind, units }
    }

    /// Number of trainable scalars this op owns.
    pub fn weight_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.units
            .iter()
            .map(|u| {
                [u.norm.gamma, u.norm.beta, u.conv.kernel, u.conv.bias]
                    .iter()
                    .map(|id| store.get(*id).value.len())
                    .sum::<usize>()
            })
            .sum()
    }
}

/// Applies a candidate operation. Spatial extent is preserved.
pub fn op_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    weights: &OpWeights,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let mut h = x;
    for unit in &weights.units {
        h = unit.forward(g, store, h, mode)?;
    }
    Ok(h)
}

/// `sum_k gamma_k * op_k(x)`.
///
/// `gamma` is normally the softmax of the block's logits (so gradients reach
/// them); tests may pass a constant node instead to pin the weights.
pub fn mixed_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ops: &[OpWeights],
    gamma: Var,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let outs = ops
        .iter()
        .map(|w| op_forward(g, store, w, x, mode))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&outs, gamma)
}
