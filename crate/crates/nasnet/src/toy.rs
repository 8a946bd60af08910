//! A task that only ops with through-plane reach can solve.
//!
//! The target at voxel `(z, y, x)` is `v[z + 1] - v[z - 1]` (zero outside the
//! grid) for a random field `v`. Inputs carry `v` and `-v` so the leading
//! rectifier of each op loses nothing. In-plane kernels see a single `z`
//! slice and cannot do better than predicting the mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{derive_architecture, DerivedArch};
use crate::error::Result;
use crate::ops::OpKind;
use crate::optim::{Adam, AdamConfig, ParamKindTag};
use crate::search::{eval_loss, search_step, train_step, Batch, SearchMode, SearchState, Target};
use crate::tensor::Tensor;
use crate::unet::{BlockNet, Network};

pub const EDGE: usize = 8;
pub const HIDDEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub mode: SearchMode,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { steps: 200, batch: 2, lr_weights: 1e-2, lr_alpha: 3e-2, mode: SearchMode::Alternating }
    }
}

pub fn batch(n: usize, seed: u64) -> Batch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vox = EDGE * EDGE * EDGE;
    let plane = EDGE * EDGE;
    let mut input = Vec::with_capacity(n * 2 * vox);
    let mut target = Vec::with_capacity(n * vox);
    for _ in 0..n {
        let v: Vec<f32> = (0..vox).map(|_| StandardNormal.sample(&mut rng)).collect();
        input.extend_from_slice(&v);
        input.extend(v.iter().map(|a| -a));
        for z in 0..EDGE {
            for i in 0..plane {
                let up = if z + 1 < EDGE { v[(z + 1) * plane + i] } else { 0.0 };
                let down = if z > 0 { v[(z - 1) * plane + i] } else { 0.0 };
                target.push(up - down);
            }
        }
    }
    Batch {
        input: Tensor::new(vec![n, 2, EDGE, EDGE, EDGE], input).expect("sized above"),
        target: Target::Dense(target),
    }
}

/// Runs the search for one seed and returns the derived op of the block.
pub fn search(cfg: &ToyConfig, seed: u64) -> Result<OpKind> {
    let mut net = BlockNet::<f32>::new(2, HIDDEN, 1, None, seed);
    let mut state = SearchState::new(cfg.lr_weights, cfg.lr_alpha);
    for step in 0..cfg.steps as u64 {
        let train = batch(cfg.batch, seed.wrapping_mul(1_000_003).wrapping_add(2 * step));
        let val = batch(cfg.batch, seed.wrapping_mul(1_000_003).wrapping_add(2 * step + 1));
        search_step(&mut net, &train, &val, &mut state, cfg.mode)?;
    }
    let derived: DerivedArch = derive_architecture(&net.arch_params());
    Ok(derived.chosen["block"])
}

/// Trains a single fixed op for `steps` and returns its held-out loss.
pub fn fixed_op_loss(kind: OpKind, steps: usize, lr: f64, seed: u64) -> Result<f64> {
    let mut net = BlockNet::<f32>::new(2, HIDDEN, 1, Some(kind), seed);
    let mut opt = Adam::new(AdamConfig::with_lr(lr), ParamKindTag::Weight);
    for step in 0..steps as u64 {
        train_step(&mut net, &batch(2, seed.wrapping_mul(7919).wrapping_add(step)), &mut opt)?;
    }
    eval_loss(&net, &batch(4, u64::MAX - seed))
}
