//! Networks assembled from searchable blocks.
//!
//! [`NasUNet`] is the encoder-decoder backbone shared by every branch.
//! [`BlockNet`] is a single searchable block followed by a pointwise head; it
//! is small enough for finite-difference checks and toy searches.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchParams, DerivedArch};
use crate::error::{NasError, Result};
use crate::graph::{channel_softmax, BnObservation, Graph, Var};
use crate::ops::{mixed_forward, op_forward, Composite, ConvParams, Mode, OpKind, OpWeights};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the op of each searchable block is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchChoice {
    /// All six candidates, blended by softmax weights (search phase).
    Mixed,
    /// One op per block.
    Derived(DerivedArch),
}

#[derive(Debug, Clone)]
pub enum BlockOps {
    Mixed { alpha: ParamId, ops: Vec<OpWeights> },
    Fixed(OpWeights),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub ops: BlockOps,
}

/// Per-block gamma values that replace the softmax of the logits.
pub type GammaOverride<T> = BTreeMap<String, [T; 6]>;

impl Block {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        id: &str,
        c_in: usize,
        c_out: usize,
        op: Option<OpKind>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ops = match op {
            Some(kind) => BlockOps::Fixed(OpWeights::new(store, id, kind, c_in, c_out, rng)),
            None => {
                let alpha = store.add(format!("{id}.alpha"), ParamKind::Arch, Tensor::zeros(vec![6]));
                let ops = OpKind::ALL
                    .iter()
                    .map(|k| OpWeights::new(store, id, *k, c_in, c_out, rng))
                    .collect();
                BlockOps::Mixed { alpha, ops }
            }
        };
        Self { id: id.to_string(), c_in, c_out, ops }
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self.ops, BlockOps::Mixed { .. })
    }

    pub fn candidates(&self) -> &[OpWeights] {
        match &self.ops {
            BlockOps::Mixed { ops, .. } => ops,
            BlockOps::Fixed(w) => std::slice::from_ref(w),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        overrides: &GammaOverride<T>,
    ) -> Result<Var> {
        match &self.ops {
            BlockOps::Fixed(w) => op_forward(g, store, w, x, mode),
            BlockOps::Mixed { alpha, ops } => {
                let gamma = match overrides.get(&self.id) {
                    Some(gm) => g.constant(Tensor::new(vec![6], gm.to_vec())?),
                    None => {
                        let a = g.param(store, *alpha);
                        g.softmax(a)
                    }
                };
                mixed_forward(g, store, ops, gamma, x, mode)
            }
        }
    }
}

/// Output interpretation of the final pointwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-voxel softmax over classes at inference.
    Segmentation,
    /// Identity output (heat-map regression).
    Regression,
}

pub trait Network<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn blocks(&self) -> Vec<&Block>;
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn head(&self) -> HeadKind;

    fn forward_with(&self, g: &mut Graph<T>, x: Var, mode: Mode, overrides: &GammaOverride<T>) -> Result<Var>;

    fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_with(g, x, mode, &GammaOverride::new())
    }

    fn is_mixed(&self) -> bool {
        self.blocks().iter().any(|b| b.is_mixed())
    }

    /// Current logits of every mixed block.
    fn arch_params(&self) -> ArchParams {
        let mut a = ArchParams::default();
        for b in self.blocks() {
            if let BlockOps::Mixed { alpha, .. } = &b.ops {
                let v = self.store().get(*alpha).value.data();
                let mut logits = [0.0; 6];
                for (o, x) in logits.iter_mut().zip(v) {
                    *o = x.as_f64();
                }
                a.alpha.insert(b.id.clone(), logits);
            }
        }
        a
    }

    fn set_arch_params(&mut self, arch: &ArchParams) -> Result<()> {
        let ids: Vec<(String, ParamId)> = self
            .blocks()
            .iter()
            .filter_map(|b| match &b.ops {
                BlockOps::Mixed { alpha, .. } => Some((b.id.clone(), *alpha)),
                BlockOps::Fixed(_) => None,
            })
            .collect();
        for (block, id) in ids {
            let logits = arch
                .alpha
                .get(&block)
                .ok_or_else(|| NasError::Config(format!("no logits for block {block}")))?;
            let data: Vec<T> = logits.iter().map(|v| T::from_f64(*v)).collect();
            self.store_mut().get_mut(id).value = Tensor::new(vec![6], data)?;
        }
        Ok(())
    }

    /// Folds observed batch statistics into the running averages.
    fn update_running_stats(&mut self, observations: &[BnObservation<T>], momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for o in observations {
            for (id, fresh) in [(o.running_mean, &o.mean), (o.running_var, &o.var_unbiased)] {
                let buf = self.store_mut().get_mut(id).value.data_mut();
                for (b, f) in buf.iter_mut().zip(fresh) {
                    *b = keep * *b + m * *f;
                }
            }
        }
    }

    /// Number of trainable weights (architecture logits excluded).
    fn weight_count(&self) -> usize {
        self.store().count(ParamKind::Weight)
    }

    /// Inference on a `(n, c, z, y, x)` batch; segmentation heads return
    /// per-voxel class probabilities.
    fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, Mode::Eval)?;
        let t = g.value(out).clone();
        match self.head() {
            HeadKind::Regression => Ok(t),
            HeadKind::Segmentation => {
                let [n, c, z, y, xx] = t.dims5()?;
                let p = channel_softmax(t.data(), n, c, z * y * xx);
                Tensor::new(t.shape().to_vec(), p)
            }
        }
    }
}

fn default_levels() -> usize {
    3
}

fn default_base_channels() -> usize {
    8
}

fn default_fixed_op() -> OpKind {
    OpKind::Conv3dK3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasUNetConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Blocks that carry logits; `None` means every block.
    #[serde(default)]
    pub searchable: Option<Vec<String>>,
    /// Op used by blocks that are not searchable.
    #[serde(default = "default_fixed_op")]
    pub fixed_op: OpKind,
    pub head: HeadKind,
}

impl NasUNetConfig {
    pub fn new(in_channels: usize, out_channels: usize, head: HeadKind) -> Self {
        Self {
            levels: default_levels(),
            base_channels: default_base_channels(),
            in_channels,
            out_channels,
            searchable: None,
            fixed_op: default_fixed_op(),
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(NasError::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(NasError::Config("channel counts must be >= 1".into()));
        }
        if let Some(s) = &self.searchable {
            let all = self.block_ids();
            if let Some(bad) = s.iter().find(|b| !all.contains(b)) {
                return Err(NasError::Config(format!("unknown searchable block {bad:?}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Encoder blocks `enc0..enc{L-1}` (the last is the bottleneck), then
    /// decoder blocks from the deepest up.
    pub fn block_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = (0..self.levels).map(|l| format!("enc{l}")).collect();
        ids.extend((0..self.levels - 1).rev().map(|l| format!("dec{l}")));
        ids
    }

    pub fn searchable_ids(&self) -> Vec<String> {
        match &self.searchable {
            None => self.block_ids(),
            Some(s) => self.block_ids().into_iter().filter(|b| s.contains(b)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NasUNet<T> {
    pub cfg: NasUNetConfig,
    store: ParamStore<T>,
    stem: ConvParams,
    encoder: Vec<Block>,
    up: Vec<ConvParams>,
    decoder: Vec<Block>,
    head: Composite,
}

/// Builds the backbone. Weights are initialised from `seed`.
pub fn build_unet<T: Scalar>(cfg: &NasUNetConfig, arch: &ArchChoice, seed: u64) -> Result<NasUNet<T>> {
    cfg.validate()?;
    let searchable = cfg.searchable_ids();
    let op_for = |id: &str| -> Result<Option<OpKind>> {
        if !searchable.iter().any(|s| s == id) {
            return Ok(Some(cfg.fixed_op));
        }
        match arch {
            ArchChoice::Mixed => Ok(None),
            ArchChoice::Derived(d) => d
                .chosen
                .get(id)
                .copied()
                .map(Some)
                .ok_or_else(|| NasError::Config(format!("derived architecture has no op for block {id}"))),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c0 = cfg.channels(0);
    let stem = ConvParams::new(&mut store, "stem", cfg.in_channels, c0, [3, 3, 3], &mut rng);
    let mut encoder = Vec::new();
    for l in 0..cfg.levels {
        let c_in = if l == 0 { c0 } else { cfg.channels(l - 1) };
        let id = format!("enc{l}");
        encoder.push(Block::new(&mut store, &id, c_in, cfg.channels(l), op_for(&id)?, &mut rng));
    }
    let mut up = Vec::new();
    let mut decoder = Vec::new();
    for l in (0..cfg.levels - 1).rev() {
        up.push(ConvParams::new(&mut store, &format!("up{l}"), cfg.channels(l + 1), cfg.channels(l), [1, 1, 1], &mut rng));
        let id = format!("dec{l}");
        decoder.push(Block::new(&mut store, &id, 2 * cfg.channels(l), cfg.channels(l), op_for(&id)?, &mut rng));
    }
    let head = Composite::new(&mut store, "head", c0, cfg.out_channels, [1, 1, 1], &mut rng);
    Ok(NasUNet { cfg: cfg.clone(), store, stem, encoder, up, decoder, head })
}

impl<T: Scalar> Network<T> for NasUNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn blocks(&self) -> Vec<&Block> {
        self.encoder.iter().chain(&self.decoder).collect()
    }

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    fn head(&self) -> HeadKind {
        self.cfg.head
    }

    fn forward_with(&self, g: &mut Graph<T>, x: Var, mode: Mode, overrides: &GammaOverride<T>) -> Result<Var> {
        let dims = g.value(x).dims5()?;
        if dims[1] != self.cfg.in_channels {
            return Err(NasError::Shape(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels, dims[1]
            )));
        }
        let store = &self.store;
        let mut h = self.stem.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h)?;
            }
            h = block.forward(g, store, h, mode, overrides)?;
            skips.push(h);
        }
        for (i, (up, block)) in self.up.iter().zip(&self.decoder).enumerate() {
            let l = self.cfg.levels - 2 - i;
            let skip = skips[l];
            let d = g.value(skip).dims5()?;
            let u = g.upsample2_to(h, [d[2], d[3], d[4]])?;
            let u = up.forward(g, store, u)?;
            let cat = g.concat(&[skip, u])?;
            h = block.forward(g, store, cat, mode, overrides)?;
        }
        self.head.forward(g, store, h, mode)
    }
}

/// One searchable block followed by a pointwise head.
#[derive(Debug, Clone)]
pub struct BlockNet<T> {
    store: ParamStore<T>,
    block: Block,
    head: ConvParams,
    in_channels: usize,
    out_channels: usize,
}

impl<T: Scalar> BlockNet<T> {
    /// `op = None` builds the mixed variant.
    pub fn new(in_channels: usize, hidden: usize, out_channels: usize, op: Option<OpKind>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "block", in_channels, hidden, op, &mut rng);
        let head = ConvParams::new(&mut store, "head", hidden, out_channels, [1, 1, 1], &mut rng);
        Self { store, block, head, in_channels, out_channels }
    }

    pub fn block(&self) -> &Block {
        &self.block
    }
}

impl<T: Scalar> Network<T> for BlockNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn blocks(&self) -> Vec<&Block> {
        vec![&self.block]
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn head(&self) -> HeadKind {
        HeadKind::Regression
    }

    fn forward_with(&self, g: &mut Graph<T>, x: Var, mode: Mode, overrides: &GammaOverride<T>) -> Result<Var> {
        let h = self.block.forward(g, &self.store, x, mode, overrides)?;
        self.head.forward(g, &self.store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{loss_node, Target};
    use rand::Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_layout() {
        let cfg = NasUNetConfig::new(1, 10, HeadKind::Segmentation);
        assert_eq!(cfg.block_ids(), ["enc0", "enc1", "enc2", "dec1", "dec0"]);
        assert_eq!((0..3).map(|l| cfg.channels(l)).collect::<Vec<_>>(), [8, 16, 32]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NasUNetConfig::new(1, 2, HeadKind::Segmentation);
        cfg.levels = 1;
        assert!(matches!(build_unet::<f32>(&cfg, &ArchChoice::Mixed, 0), Err(NasError::Config(_))));
        let mut cfg = NasUNetConfig::new(1, 2, HeadKind::Segmentation);
        cfg.searchable = Some(vec!["enc7".into()]);
        assert!(cfg.validate().is_err());
        let cfg = NasUNetConfig::new(1, 2, HeadKind::Segmentation);
        let partial = DerivedArch::uniform_op(["enc0".to_string()], OpKind::Conv3dK3);
        assert!(build_unet::<f32>(&cfg, &ArchChoice::Derived(partial), 0).is_err());
    }

    #[test]
    fn segmentation_output_shape_and_normalization() {
        let cfg = NasUNetConfig::new(1, 10, HeadKind::Segmentation);
        let arch = DerivedArch::uniform_op(cfg.block_ids(), OpKind::Conv2dK3);
        let net = build_unet::<f32>(&cfg, &ArchChoice::Derived(arch), 1).unwrap();
        let p = net.predict(random(vec![1, 1, 32, 32, 32], 2).cast()).unwrap();
        assert_eq!(p.shape(), &[1, 10, 32, 32, 32]);
        let vox = 32 * 32 * 32;
        for j in 0..vox {
            let s: f64 = (0..10).map(|c| p.data()[c * vox + j] as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_shape_is_preserved_for_any_extent() {
        let mut cfg = NasUNetConfig::new(2, 3, HeadKind::Regression);
        cfg.base_channels = 2;
        let net = build_unet::<f64>(&cfg, &ArchChoice::Mixed, 3).unwrap();
        for dims in [[4, 8, 12], [5, 7, 9], [1, 2, 3]] {
            let out = net.predict(random(vec![1, 2, dims[0], dims[1], dims[2]], 4)).unwrap();
            assert_eq!(out.shape(), &[1, 3, dims[0], dims[1], dims[2]]);
        }
    }

    #[test]
    fn mixed_parameter_count_sums_all_candidates() {
        let cfg = NasUNetConfig::new(1, 10, HeadKind::Segmentation);
        // stem 1→8 k3, pointwise up-convs 32→16 and 16→8, head norm + 8→10
        let shared = (27 * 8 + 8) + (32 * 16 + 16) + (16 * 8 + 8) + (2 * 8 + 8 * 10 + 10);
        let mixed = build_unet::<f32>(&cfg, &ArchChoice::Mixed, 0).unwrap();
        let mut per_op = 0;
        for kind in OpKind::ALL {
            let arch = DerivedArch::uniform_op(cfg.block_ids(), kind);
            let net = build_unet::<f32>(&cfg, &ArchChoice::Derived(arch), 0).unwrap();
            per_op += net.weight_count() - shared;
        }
        assert_eq!(mixed.weight_count(), shared + per_op);
        assert_eq!(mixed.store().count(ParamKind::Arch), 5 * 6);
    }

    #[test]
    fn only_searchable_blocks_carry_logits() {
        let mut cfg = NasUNetConfig::new(1, 2, HeadKind::Segmentation);
        cfg.searchable = Some(vec!["enc1".into(), "dec0".into()]);
        let net = build_unet::<f32>(&cfg, &ArchChoice::Mixed, 0).unwrap();
        let a = net.arch_params();
        assert_eq!(a.alpha.keys().collect::<Vec<_>>(), ["dec0", "enc1"]);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = NasUNetConfig::new(1, 2, HeadKind::Segmentation);
        let a = build_unet::<f32>(&cfg, &ArchChoice::Mixed, 9).unwrap();
        let b = build_unet::<f32>(&cfg, &ArchChoice::Mixed, 9).unwrap();
        let c = build_unet::<f32>(&cfg, &ArchChoice::Mixed, 10).unwrap();
        let vals = |n: &NasUNet<f32>| n.store().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    fn block_loss(net: &BlockNet<f64>, x: &Tensor<f64>, target: &Target<f64>) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, xv, Mode::Train).unwrap();
        let l = loss_node(&mut g, out, target).unwrap();
        g.scalar(l)
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let mut net = BlockNet::<f64>::new(1, 3, 2, None, 11);
        let mut arch = net.arch_params();
        arch.alpha.insert("block".into(), [0.3, -0.2, 0.1, 0.4, -0.5, 0.0]);
        net.set_arch_params(&arch).unwrap();
        let x = random(vec![1, 1, 4, 4, 4], 12);
        for target in [Target::Dense(random(vec![1, 2, 4, 4, 4], 13).into_data()), Target::Labels((0..64).map(|i| (i % 2) as u16).collect())] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = net.forward(&mut g, xv, Mode::Train).unwrap();
            let l = loss_node(&mut g, out, &target).unwrap();
            g.backward(l);
            let BlockOps::Mixed { alpha, .. } = &net.block().ops else { unreachable!() };
            let analytic = g.param_grads().into_iter().find(|(id, _)| id == alpha).unwrap().1.to_vec();
            let eps = 1e-3;
            for k in 0..6 {
                let mut probe = net.clone();
                let mut a = arch.clone();
                a.alpha.get_mut("block").unwrap()[k] += eps;
                probe.set_arch_params(&a).unwrap();
                let plus = block_loss(&probe, &x, &target);
                a.alpha.get_mut("block").unwrap()[k] -= 2.0 * eps;
                probe.set_arch_params(&a).unwrap();
                let minus = block_loss(&probe, &x, &target);
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-8);
                assert!(rel < 1e-3, "alpha {k}: tape {} fd {fd}", analytic[k]);
            }
        }
    }

    #[test]
    fn running_stats_move_towards_batch_stats() {
        let mut net = BlockNet::<f64>::new(1, 2, 1, Some(OpKind::Conv3dK3), 0);
        let x = random(vec![1, 1, 3, 3, 3], 1);
        let mut g = Graph::new();
        let xv = g.constant(x);
        net.forward(&mut g, xv, Mode::Train).unwrap();
        let obs = g.bn_observations().to_vec();
        net.update_running_stats(&obs, 0.1);
        let rm = net.store().get(obs[0].running_mean).value.data()[0];
        let rv = net.store().get(obs[0].running_var).value.data()[0];
        assert!((rm - 0.1 * obs[0].mean[0]).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * obs[0].var_unbiased[0])).abs() < 1e-12);
    }
}
