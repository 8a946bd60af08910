//! Gradient steps for plain training and for the architecture search.

use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::graph::{Graph, Var};
use crate::ops::Mode;
use crate::optim::{Adam, AdamConfig, ParamKindTag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::Network;

/// Momentum used to fold batch statistics into the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub enum Target<T> {
    /// Class index per voxel; trained with soft Dice + cross-entropy.
    Labels(Vec<u16>),
    /// As `Labels`, with Dice averaged over the classes present in the batch.
    PresentLabels(Vec<u16>),
    /// Dense regression target; trained with mean squared error.
    Dense(Vec<T>),
    /// Dense target with per-value loss weights.
    Weighted { values: Vec<T>, weights: Vec<T> },
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Target<T>,
}

pub fn loss_node<T: Scalar>(g: &mut Graph<T>, out: Var, target: &Target<T>) -> Result<Var> {
    match target {
        Target::Labels(l) => g.dice_ce_loss(out, l),
        Target::PresentLabels(l) => g.dice_ce_loss_present(out, l),
        Target::Dense(d) => g.mse_loss(out, d),
        Target::Weighted { values, weights } => g.weighted_mse_loss(out, values, weights),
    }
}

/// Forward + backward in training mode. Returns the loss, the owned
/// parameter gradients and the graph's normalization observations.
fn forward_backward<T: Scalar, N: Network<T>>(net: &N, batch: &Batch<T>) -> Result<(f64, Graph<T>)> {
    let mut g = Graph::new();
    let x = g.constant(batch.input.clone());
    let out = net.forward(&mut g, x, Mode::Train)?;
    let loss = loss_node(&mut g, out, &batch.target)?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(NasError::Shape(format!("non-finite loss {value}")));
    }
    g.backward(loss);
    Ok((value, g))
}

fn owned_grads<T: Scalar>(g: &Graph<T>) -> Vec<(crate::params::ParamId, Vec<T>)> {
    g.param_grads().into_iter().map(|(id, s)| (id, s.to_vec())).collect()
}

/// Loss in evaluation mode, without gradients.
pub fn eval_loss<T: Scalar, N: Network<T>>(net: &N, batch: &Batch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(batch.input.clone());
    let out = net.forward(&mut g, x, Mode::Eval)?;
    let loss = loss_node(&mut g, out, &batch.target)?;
    Ok(g.scalar(loss).as_f64())
}

/// One weight update. Returns the training loss before the update.
pub fn train_step<T: Scalar, N: Network<T>>(net: &mut N, batch: &Batch<T>, opt: &mut Adam) -> Result<f64> {
    let (loss, g) = forward_backward(net, batch)?;
    let grads = owned_grads(&g);
    net.update_running_stats(g.bn_observations(), BN_MOMENTUM);
    opt.update(net.store_mut(), &grads);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Weights on the training batch, then logits on the validation batch.
    #[default]
    Alternating,
    /// Weights and logits updated together on the training batch.
    SingleLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub weights: Adam,
    pub arch: Adam,
    pub steps: u64,
}

impl SearchState {
    pub fn new(lr_weights: f64, lr_alpha: f64) -> Self {
        Self {
            weights: Adam::new(AdamConfig::with_lr(lr_weights), ParamKindTag::Weight),
            arch: Adam::new(AdamConfig::with_lr(lr_alpha), ParamKindTag::Arch),
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLosses {
    pub train: f64,
    pub val: f64,
}

/// One first-order search step on a mixed network.
pub fn search_step<T: Scalar, N: Network<T>>(
    net: &mut N,
    train: &Batch<T>,
    val: &Batch<T>,
    state: &mut SearchState,
    mode: SearchMode,
) -> Result<SearchLosses> {
    if !net.is_mixed() {
        return Err(NasError::Config("search_step needs a mixed network".into()));
    }
    let losses = match mode {
        SearchMode::Alternating => {
            let (train_loss, g) = forward_backward(net, train)?;
            let grads = owned_grads(&g);
            net.update_running_stats(g.bn_observations(), BN_MOMENTUM);
            state.weights.update(net.store_mut(), &grads);
            drop(g);
            let (val_loss, g) = forward_backward(net, val)?;
            let grads = owned_grads(&g);
            state.arch.update(net.store_mut(), &grads);
            SearchLosses { train: train_loss, val: val_loss }
        }
        SearchMode::SingleLevel => {
            let (train_loss, g) = forward_backward(net, train)?;
            let grads = owned_grads(&g);
            net.update_running_stats(g.bn_observations(), BN_MOMENTUM);
            state.weights.update(net.store_mut(), &grads);
            state.arch.update(net.store_mut(), &grads);
            SearchLosses { train: train_loss, val: train_loss }
        }
    };
    state.steps += 1;
    Ok(losses)
}
