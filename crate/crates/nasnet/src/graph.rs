//! Reverse-mode autograd tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are inputs,
//! constants or copies of parameters from a [`ParamStore`]; every other node
//! records the operation that produced it so that [`Graph::backward`] can
//! propagate gradients in reverse insertion order.

use std::collections::HashMap;

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeom, ConvGrads};
use crate::error::{NasError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(usize),
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample {
        x: usize,
        src: Vec<u32>,
    },
    Concat(Vec<usize>),
    Add(usize, usize),
    Softmax(usize),
    WeightedSum {
        xs: Vec<usize>,
        w: usize,
    },
    /// Scalar loss whose gradient wrt `x` was computed during the forward pass.
    Loss {
        x: usize,
        dx: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a normalization layer in training mode.
#[derive(Debug, Clone)]
pub struct BnObservation<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    bn_observations: Vec<BnObservation<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            bn_observations: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that accumulates a gradient (used for inputs in gradient tests).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn bn_observations(&self) -> &[BnObservation<T>] {
        &self.bn_observations
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, z, y, xx] = self.value(x).dims5()?;
        let ws = self.value(w).shape().to_vec();
        let (co, kernel) = match ws.as_slice() {
            &[co, wci, kz, ky, kx] if wci == ci && kz % 2 == 1 && ky % 2 == 1 && kx % 2 == 1 => (co, [kz, ky, kx]),
            _ => {
                return Err(NasError::Shape(format!(
                    "kernel {ws:?} does not fit input with {ci} channels"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(NasError::Shape(format!("bias length {} != {co}", self.value(b).len())));
            }
        }
        let geom = ConvGeom { c_in: ci, c_out: co, kernel, spatial: [z, y, xx] };
        let out = conv3d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let t = Tensor::new(vec![n, co, z, y, xx], out)?;
        Ok(self.push(t, Op::Conv { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, rg))
    }

    /// Per-channel normalization. With `batch_stats` the statistics come from
    /// the batch (and are recorded for the running averages); otherwise the
    /// supplied running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &ParamStore<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let [n, c, z, y, xx] = self.value(x).dims5()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(NasError::Shape(format!("normalization expects {c} channels")));
        }
        let vox = z * y * xx;
        let m = (n * vox) as f64;
        let eps = BN_EPS;
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        if batch_stats {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * vox..(b * c + ch + 1) * vox].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                mean[ch] = s / m;
                let mut q = 0.0;
                for b in 0..n {
                    q += xd[(b * c + ch) * vox..(b * c + ch + 1) * vox]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean[ch];
                            d * d
                        })
                        .sum::<f64>();
                }
                var[ch] = q / m;
            }
        } else {
            let rm = store.get(running.0).value.data();
            let rv = store.get(running.1).value.data();
            for ch in 0..c {
                mean[ch] = rm[ch].as_f64();
                var[ch] = rv[ch].as_f64();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|v| T::from_f64(*v)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * vox..(b * c + ch + 1) * vox;
                for ((o, h), v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r.clone()]) {
                    *h = (*v - mean_t[ch]) * inv_std[ch];
                    *o = g[ch] * *h + bt[ch];
                }
            }
        }
        if batch_stats {
            let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_observations.push(BnObservation {
                running_mean: running.0,
                running_var: running.1,
                mean: mean_t.clone(),
                var_unbiased: var.iter().map(|v| T::from_f64(v * corr)).collect(),
            });
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let t = Tensor::new(vec![n, c, z, y, xx], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, batch_stats },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| if *a > T::zero() { *a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x.0);
        self.push(t, Op::Relu(x.0), rg)
    }

    /// 2x max pooling (stride 2). Odd extents keep a partial last window.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, z, y, xx] = self.value(x).dims5()?;
        let (oz, oy, ox) = (z.div_ceil(2), y.div_ceil(2), xx.div_ceil(2));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oz * oy * ox);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * z * y * xx;
            for a in 0..oz {
                for b in 0..oy {
                    for d in 0..ox {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for iz in 2 * a..(2 * a + 2).min(z) {
                            for iy in 2 * b..(2 * b + 2).min(y) {
                                for ix in 2 * d..(2 * d + 2).min(xx) {
                                    let i = base + (iz * y + iy) * xx + ix;
                                    if src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        let t = Tensor::new(vec![n, c, oz, oy, ox], out)?;
        Ok(self.push(t, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling onto an explicit target extent.
    pub fn upsample2_to(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let [n, c, z, y, xx] = self.value(x).dims5()?;
        let [tz, ty, tx] = target;
        if tz.div_ceil(2) != z || ty.div_ceil(2) != y || tx.div_ceil(2) != xx {
            return Err(NasError::Shape(format!(
                "cannot upsample {:?} to {target:?}",
                [z, y, xx]
            )));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * tz * ty * tx);
        let mut src = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * z * y * xx;
            for a in 0..tz {
                for b in 0..ty {
                    for d in 0..tx {
                        let i = base + ((a / 2) * y + b / 2) * xx + d / 2;
                        out.push(data[i]);
                        src.push(i as u32);
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        let t = Tensor::new(vec![n, c, tz, ty, tx], out)?;
        Ok(self.push(t, Op::Upsample { x: x.0, src }, rg))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims5()?;
        let mut channels = 0;
        for v in xs {
            let d = self.value(*v).dims5()?;
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(NasError::Shape(format!("cannot concatenate {d:?} with {first:?}")));
            }
            channels += d[1];
        }
        let [n, _, z, y, xx] = first;
        let vox = z * y * xx;
        let mut out = Vec::with_capacity(n * channels * vox);
        for b in 0..n {
            for v in xs {
                let c = self.value(*v).shape()[1];
                out.extend_from_slice(&self.value(*v).data()[b * c * vox..(b + 1) * c * vox]);
            }
        }
        let rg = xs.iter().any(|v| self.rg(v.0));
        let t = Tensor::new(vec![n, channels, z, y, xx], out)?;
        Ok(self.push(t, Op::Concat(xs.iter().map(|v| v.0).collect()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NasError::Shape("add operands differ in shape".into()));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| *p + *q).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    /// Softmax over a 1-D vector, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let out = softmax_vec(v);
        let t = Tensor::new(vec![out.len()], out).expect("1-D");
        let rg = self.rg(x.0);
        self.push(t, Op::Softmax(x.0), rg)
    }

    /// `sum_k w[k] * xs[k]` with `w` a 1-D node of length `xs.len()`.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        if self.value(w).len() != xs.len() {
            return Err(NasError::Shape(format!("{} weights for {} inputs", self.value(w).len(), xs.len())));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut out = vec![T::zero(); self.value(xs[0]).len()];
        for (k, v) in xs.iter().enumerate() {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(NasError::Shape("weighted sum operands differ in shape".into()));
            }
            let wk = self.value(w).data()[k];
            for (o, a) in out.iter_mut().zip(self.value(*v).data()) {
                *o += wk * *a;
            }
        }
        let rg = self.rg(w.0) || xs.iter().any(|v| self.rg(v.0));
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::WeightedSum { xs: xs.iter().map(|v| v.0).collect(), w: w.0 }, rg))
    }

    /// Soft Dice + cross-entropy over `(n, classes, z, y, x)` logits.
    ///
    /// `target` holds a class index per voxel. Dice is averaged over the
    /// foreground classes (index >= 1) with batch-level sums and smoothing 1.
    pub fn dice_ce_loss(&mut self, logits: Var, target: &[u16]) -> Result<Var> {
        self.dice_ce(logits, target, false)
    }

    /// As [`Graph::dice_ce_loss`], but Dice averages only the foreground
    /// classes that occur in `target`. Cross-entropy still spans every class.
    pub fn dice_ce_loss_present(&mut self, logits: Var, target: &[u16]) -> Result<Var> {
        self.dice_ce(logits, target, true)
    }

    fn dice_ce(&mut self, logits: Var, target: &[u16], present_only: bool) -> Result<Var> {
        let [n, c, z, y, xx] = self.value(logits).dims5()?;
        let vox = z * y * xx;
        if target.len() != n * vox {
            return Err(NasError::Shape(format!("target has {} voxels, logits {}", target.len(), n * vox)));
        }
        if let Some(bad) = target.iter().find(|t| **t as usize >= c) {
            return Err(NasError::Shape(format!("target class {bad} >= {c} classes")));
        }
        let probs = channel_softmax(self.value(logits).data(), n, c, vox);
        let total = (n * vox) as f64;
        let smooth = 1.0;
        // Cross-entropy part.
        let mut ce = 0.0f64;
        let mut dp = vec![0.0f64; probs.len()];
        let mut dz = vec![T::zero(); probs.len()];
        for b in 0..n {
            for j in 0..vox {
                let t = target[b * vox + j] as usize;
                let pt = probs[(b * c + t) * vox + j].as_f64().max(1e-12);
                ce -= pt.ln();
            }
        }
        ce /= total;
        // Dice part, sums over the whole batch.
        let mut inter = vec![0.0f64; c];
        let mut psum = vec![0.0f64; c];
        let mut tsum = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                for j in 0..vox {
                    let p = probs[(b * c + ch) * vox + j].as_f64();
                    psum[ch] += p;
                    if target[b * vox + j] as usize == ch {
                        inter[ch] += p;
                        tsum[ch] += 1.0;
                    }
                }
            }
        }
        let first = if c > 1 { 1 } else { 0 };
        let scored: Vec<usize> = (first..c).filter(|ch| !present_only || tsum[*ch] > 0.0).collect();
        let fg = scored.len().max(1);
        let mut dice_mean = if scored.is_empty() { 1.0 } else { 0.0 };
        for &ch in &scored {
            let den = psum[ch] + tsum[ch] + smooth;
            let num = 2.0 * inter[ch] + smooth;
            dice_mean += num / den;
            for b in 0..n {
                for j in 0..vox {
                    let t = if target[b * vox + j] as usize == ch { 1.0 } else { 0.0 };
                    // d(-D_c / fg)/dp
                    dp[(b * c + ch) * vox + j] = -((2.0 * t * den - num) / (den * den)) / fg as f64;
                }
            }
        }
        dice_mean /= fg as f64;
        let loss = ce + (1.0 - dice_mean);
        // Chain through the softmax; CE contributes (p - onehot) / total directly.
        for b in 0..n {
            for j in 0..vox {
                let mut dot = 0.0;
                for ch in 0..c {
                    let i = (b * c + ch) * vox + j;
                    dot += dp[i] * probs[i].as_f64();
                }
                let t = target[b * vox + j] as usize;
                for ch in 0..c {
                    let i = (b * c + ch) * vox + j;
                    let p = probs[i].as_f64();
                    let onehot = if ch == t { 1.0 } else { 0.0 };
                    dz[i] = T::from_f64(p * (dp[i] - dot) + (p - onehot) / total);
                }
            }
        }
        let rg = self.rg(logits.0);
        Ok(self.push(Tensor::full(vec![1], T::from_f64(loss)), Op::Loss { x: logits.0, dx: dz }, rg))
    }

    /// Mean squared error against a dense target of the same size.
    pub fn mse_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(NasError::Shape(format!("target has {} values, prediction {}", target.len(), p.len())));
        }
        let m = p.len() as f64;
        let mut s = 0.0f64;
        let mut dx = Vec::with_capacity(p.len());
        for (a, b) in p.iter().zip(target) {
            let d = a.as_f64() - b.as_f64();
            s += d * d;
            dx.push(T::from_f64(2.0 * d / m));
        }
        let rg = self.rg(pred.0);
        Ok(self.push(Tensor::full(vec![1], T::from_f64(s / m)), Op::Loss { x: pred.0, dx }, rg))
    }

    /// `sum(w * (pred - target)^2) / sum(w)`.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != weights.len() {
            return Err(NasError::Shape(format!(
                "prediction {}, target {} and weights {} differ in length",
                p.len(),
                target.len(),
                weights.len()
            )));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if !(total > 0.0) || weights.iter().any(|w| !(w.as_f64() >= 0.0)) {
            return Err(NasError::Shape("loss weights must be non-negative with a positive sum".into()));
        }
        let mut s = 0.0f64;
        let mut dx = Vec::with_capacity(p.len());
        for ((a, b), w) in p.iter().zip(target).zip(weights) {
            let (d, w) = (a.as_f64() - b.as_f64(), w.as_f64());
            s += w * d * d;
            dx.push(T::from_f64(2.0 * w * d / total));
        }
        let rg = self.rg(pred.0);
        Ok(self.push(Tensor::full(vec![1], T::from_f64(s / total)), Op::Loss { x: pred.0, dx }, rg))
    }

    /// `sum(x * weights)` as a scalar; a generic linear probe for gradient tests.
    pub fn dot_loss(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let v = self.value(x).data();
        if v.len() != weights.len() {
            return Err(NasError::Shape("dot weights differ in length".into()));
        }
        let s: f64 = v.iter().zip(weights).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::full(vec![1], T::from_f64(s)), Op::Loss { x: x.0, dx: weights.to_vec() }, rg))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        let len = self.nodes.len();
        self.grads = (0..len).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one(); self.nodes[loss.0].value.len()]);
        for i in (0..len).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].value.len();
        let slot = self.grads[target].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily take the op so parents can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let batch = self.nodes[*x].value.shape()[0];
                let mut gx = self.rg(*x).then(|| vec![T::zero(); self.nodes[*x].value.len()]);
                let mut gw = self.rg(*w).then(|| vec![T::zero(); self.nodes[*w].value.len()]);
                let mut gb = b.filter(|b| self.rg(*b)).map(|b| vec![T::zero(); self.nodes[b].value.len()]);
                conv3d_backward(
                    geom,
                    batch,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    g,
                    ConvGrads { x: gx.as_deref_mut(), w: gw.as_deref_mut(), bias: gb.as_deref_mut() },
                );
                if let Some(gx) = gx {
                    self.acc(*x, |s| add_into(s, &gx));
                }
                if let Some(gw) = gw {
                    self.acc(*w, |s| add_into(s, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.acc(*b, |s| add_into(s, &gb));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, z, y, xx] = self.nodes[*x].value.dims5().expect("5-D");
                let vox = z * y * xx;
                let m = T::from_f64((n * vox) as f64);
                let gam = self.nodes[*gamma].value.data().to_vec();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * vox..(b * c + ch + 1) * vox;
                        for (gv, h) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += *gv;
                            sum_gx[ch] += *gv * *h;
                        }
                    }
                }
                self.acc(*gamma, |s| add_into(s, &sum_gx));
                self.acc(*beta, |s| add_into(s, &sum_g));
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * vox..(b * c + ch + 1) * vox;
                            let scale = gam[ch] * inv_std[ch];
                            for ((o, gv), h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if *batch_stats {
                                    scale * (*gv - sum_g[ch] / m - *h * sum_gx[ch] / m)
                                } else {
                                    scale * *gv
                                };
                            }
                        }
                    }
                    self.acc(*x, |s| add_into(s, &gx));
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data().to_vec();
                self.acc(*x, |s| {
                    for ((o, gv), v) in s.iter_mut().zip(g).zip(&xv) {
                        if *v > T::zero() {
                            *o += *gv;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                self.acc(*x, |s| {
                    for (gv, a) in g.iter().zip(argmax) {
                        s[*a as usize] += *gv;
                    }
                });
            }
            Op::Upsample { x, src } => {
                self.acc(*x, |s| {
                    for (gv, a) in g.iter().zip(src) {
                        s[*a as usize] += *gv;
                    }
                });
            }
            Op::Concat(xs) => {
                let dims = self.nodes[i].value.dims5().expect("5-D");
                let [n, _, z, y, xx] = dims;
                let vox = z * y * xx;
                let total_c = dims[1];
                let mut offset = 0;
                for p in xs {
                    let c = self.nodes[*p].value.shape()[1];
                    self.acc(*p, |s| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * vox..(b * total_c + offset + c) * vox];
                            add_into(&mut s[b * c * vox..(b + 1) * c * vox], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, |s| add_into(s, g));
                self.acc(*b, |s| add_into(s, g));
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let dot: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
                self.acc(*x, |s| {
                    for ((o, yv), gv) in s.iter_mut().zip(&y).zip(g) {
                        *o += *yv * (*gv - dot);
                    }
                });
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.nodes[*w].value.data().to_vec();
                if self.rg(*w) {
                    let gw: Vec<T> = xs
                        .iter()
                        .map(|p| self.nodes[*p].value.data().iter().zip(g).map(|(a, b)| *a * *b).sum())
                        .collect();
                    self.acc(*w, |s| add_into(s, &gw));
                }
                for (k, p) in xs.iter().enumerate() {
                    let wk = wv[k];
                    self.acc(*p, |s| {
                        for (o, gv) in s.iter_mut().zip(g) {
                            *o += wk * *gv;
                        }
                    });
                }
            }
            Op::Loss { x, dx } => {
                let upstream = g[0];
                self.acc(*x, |s| {
                    for (o, d) in s.iter_mut().zip(dx) {
                        *o += upstream * *d;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient of the last backward pass wrt `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter loaded into this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn softmax_vec<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|a| (*a - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|a| a / s).collect()
}

/// Softmax across the channel axis of `(n, c, vox)` data.
pub fn channel_softmax<T: Scalar>(data: &[T], n: usize, c: usize, vox: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for j in 0..vox {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(data[(b * c + ch) * vox + j]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (data[(b * c + ch) * vox + j] - max).exp();
                out[(b * c + ch) * vox + j] = e;
                s += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * vox + j] /= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compares tape gradients of every input against central differences.
    fn check<F>(shapes: &[&[usize]], seed: u64, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (mut g, vars, out) = eval(&inputs);
        g.backward(out);
        let eps = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).expect("input gradient").to_vec();
            for i in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.scalar(op) - gm.scalar(om)) / (2.0 * eps);
                let tol = 1e-6 * (1.0 + fd.abs().max(analytic[i].abs()));
                assert!(
                    (fd - analytic[i]).abs() < tol,
                    "input {k} element {i}: tape {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    fn probe(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(g: &mut Graph<f64>, v: Var) -> Var {
        let w = probe(g.value(v).len(), 99);
        g.dot_loss(v, &w).unwrap()
    }

    #[test]
    fn conv_gradients() {
        check(&[&[2, 2, 3, 4, 3], &[3, 2, 3, 1, 3], &[3]], 1, |g, v| {
            let c = g.conv(v[0], v[1], Some(v[2])).unwrap();
            dot(g, c)
        });
    }

    #[test]
    fn batch_norm_gradients() {
        let mut store = ParamStore::<f64>::new();
        let rm = store.add("rm", ParamKind::Buffer, Tensor::zeros(vec![2]));
        let rv = store.add("rv", ParamKind::Buffer, Tensor::full(vec![2], 1.0));
        for batch_stats in [true, false] {
            check(&[&[2, 2, 2, 2, 3], &[2], &[2]], 2, |g, v| {
                let b = g.batch_norm(v[0], v[1], v[2], (rm, rv), &store, batch_stats).unwrap();
                dot(g, b)
            });
        }
    }

    #[test]
    fn pooling_upsampling_and_relu_gradients() {
        check(&[&[1, 2, 3, 4, 5]], 3, |g, v| {
            let r = g.relu(v[0]);
            let p = g.max_pool2(r).unwrap();
            let u = g.upsample2_to(p, [3, 4, 5]).unwrap();
            dot(g, u)
        });
    }

    #[test]
    fn concat_add_and_weighted_sum_gradients() {
        check(&[&[1, 1, 2, 2, 2], &[1, 2, 2, 2, 2], &[1, 3, 2, 2, 2], &[2]], 4, |g, v| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let a = g.add(c, v[2]).unwrap();
            let s = g.softmax(v[3]);
            let w = g.weighted_sum(&[a, v[2]], s).unwrap();
            dot(g, w)
        });
    }

    #[test]
    fn dice_ce_gradients() {
        let target: Vec<u16> = (0..2 * 12).map(|i| (i * 7 % 3) as u16).collect();
        check(&[&[2, 3, 1, 3, 4]], 5, |g, v| g.dice_ce_loss(v[0], &target).unwrap());
    }

    #[test]
    fn present_dice_gradients() {
        let target: Vec<u16> = (0..2 * 12).map(|i| if i % 5 == 0 { 2 } else { 0 }).collect();
        check(&[&[2, 4, 1, 3, 4]], 5, |g, v| g.dice_ce_loss_present(v[0], &target).unwrap());
    }

    #[test]
    fn present_dice_ignores_absent_classes() {
        let target: Vec<u16> = vec![0, 0, 1, 1, 0, 0, 0, 0];
        let logits: Vec<f64> = probe(8 * 3, 4);
        let two = Tensor::new(vec![1, 2, 1, 2, 4], logits[..16].to_vec()).unwrap();
        // a third class whose logit is so low it never takes probability
        let mut with_absent = logits[..16].to_vec();
        with_absent.extend([-60.0; 8]);
        let three = Tensor::new(vec![1, 3, 1, 2, 4], with_absent).unwrap();
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(two), g.constant(three));
        let (la, lb) = (g.dice_ce_loss_present(a, &target).unwrap(), g.dice_ce_loss_present(b, &target).unwrap());
        assert!((g.scalar(la) - g.scalar(lb)).abs() < 1e-9);
        let full = g.dice_ce_loss(b, &target).unwrap();
        assert!(g.scalar(full) < g.scalar(lb));
    }

    #[test]
    fn mse_gradients() {
        let target = probe(16, 6);
        check(&[&[1, 2, 2, 2, 2]], 7, |g, v| g.mse_loss(v[0], &target).unwrap());
    }

    #[test]
    fn weighted_mse_gradients() {
        let target = probe(16, 6);
        let weights: Vec<f64> = probe(16, 9).iter().map(|w| w.abs() + 0.1).collect();
        check(&[&[1, 2, 2, 2, 2]], 7, |g, v| g.weighted_mse_loss(v[0], &target, &weights).unwrap());
    }

    #[test]
    fn uniform_weights_reduce_to_mse() {
        let target = probe(16, 6);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 2, 2], probe(16, 2)).unwrap());
        let a = g.mse_loss(x, &target).unwrap();
        let b = g.weighted_mse_loss(x, &target, &[3.0; 16]).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);
        assert!(g.weighted_mse_loss(x, &target, &[0.0; 16]).is_err());
    }

    #[test]
    fn perfect_prediction_has_low_dice_ce() {
        let target = vec![0u16, 1, 2, 1];
        let mut logits = vec![-20.0; 12];
        for (j, t) in target.iter().enumerate() {
            logits[*t as usize * 4 + j] = 20.0;
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 3, 1, 2, 2], logits).unwrap());
        let l = g.dice_ce_loss(x, &target).unwrap();
        // Only the smoothing term keeps dice below one.
        assert!(g.scalar(l) < 0.2, "{}", g.scalar(l));
    }

    #[test]
    fn channel_softmax_normalizes() {
        let data = probe(2 * 3 * 5, 8);
        let p = channel_softmax(&data, 2, 3, 5);
        for b in 0..2 {
            for j in 0..5 {
                let s: f64 = (0..3).map(|c| p[(b * 3 + c) * 5 + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_records_unbiased_variance() {
        let mut store = ParamStore::<f64>::new();
        let rm = store.add("rm", ParamKind::Buffer, Tensor::zeros(vec![1]));
        let rv = store.add("rv", ParamKind::Buffer, Tensor::full(vec![1], 1.0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let gm = g.constant(Tensor::full(vec![1], 1.0));
        let bt = g.constant(Tensor::zeros(vec![1]));
        g.batch_norm(x, gm, bt, (rm, rv), &store, true).unwrap();
        let o = &g.bn_observations()[0];
        assert!((o.mean[0] - 3.0).abs() < 1e-12);
        // deviations -2, -1, 0, 3 → 14 / 3
        assert!((o.var_unbiased[0] - 14.0 / 3.0).abs() < 1e-12);
    }
}
