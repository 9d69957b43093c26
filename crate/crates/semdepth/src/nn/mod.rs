//! Minimal deterministic autodiff engine used by the network blocks.
//!
//! Design: parameters live in a [`ParamSet`]; every training step builds a
//! fresh [`Graph`] (define-by-run, values computed eagerly), calls
//! [`Graph::backward`] on the scalar loss node, and hands accumulated
//! gradients to [`Adam`]. Everything is `f64` and single-threaded, so runs
//! are bit-reproducible and checkpoints restore forward outputs exactly.

pub mod conv;

pub use conv::ConvGeometry;

use conv::{conv2d_backward, conv2d_forward};
use ndarray::{Array1, Array4, ArrayView1, s};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub type Tensor4 = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter storage: values, gradient buffers and trainability
/// (batch-norm running statistics are stored here as non-trainable state so
/// checkpoints capture them).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor4>,
    grads: Vec<Tensor4>,
    trainable: Vec<bool>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4, trainable: bool) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Array4::zeros(value.dim()));
        self.values.push(value);
        self.names.push(name.into());
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.grads[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of trainable scalars.
    pub fn n_trainable_scalars(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.len())
            .sum()
    }
}

/// He fan-in normal initialization for a conv weight (O, I, kh, kw).
pub fn init_he_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    kernel: (usize, usize),
) -> ParamId {
    let fan_in = (c_in * kernel.0 * kernel.1) as f64;
    let std = (2.0 / fan_in).sqrt();
    let value = Array4::from_shape_fn((c_out, c_in, kernel.0, kernel.1), |_| {
        let u: f64 = rng.sample(rand_distr::StandardNormal);
        u * std
    });
    params.add(name, value, true)
}

/// Per-channel vector parameter stored as (1, C, 1, 1).
pub fn init_channel(
    params: &mut ParamSet,
    name: &str,
    channels: usize,
    fill: f64,
    trainable: bool,
) -> ParamId {
    params.add(name, Array4::from_elem((1, channels, 1, 1), fill), trainable)
}

fn channel_view(t: &Tensor4) -> ArrayView1<'_, f64> {
    let c = t.dim().1;
    t.view().into_shape_with_order(c).expect("channel vector")
}

/// Batch-norm parameter bundle.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn init_batch_norm(params: &mut ParamSet, name: &str, channels: usize) -> BnParams {
    BnParams {
        gamma: init_channel(params, &format!("{name}.gamma"), channels, 1.0, true),
        beta: init_channel(params, &format!("{name}.beta"), channels, 0.0, true),
        running_mean: init_channel(params, &format!("{name}.running_mean"), channels, 0.0, false),
        running_var: init_channel(params, &format!("{name}.running_var"), channels, 1.0, false),
    }
}

enum Op {
    Input,
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: NodeId,
        bn: BnParams,
        mean: Array1<f64>,
        invstd: Array1<f64>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MulConst {
        x: NodeId,
        k: Tensor4,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    ConcatC {
        xs: Vec<NodeId>,
    },
    Interleave2 {
        parts: [NodeId; 4],
    },
    MaxPool {
        x: NodeId,
        argmax: Array4<u32>,
    },
    UpsampleNearest2 {
        x: NodeId,
    },
    SumC {
        x: NodeId,
    },
    SoftmaxC {
        x: NodeId,
    },
    MaskedMape {
        pred: NodeId,
        gt: Tensor4,
        mask: Tensor4,
        n_valid: f64,
    },
    SoftIou {
        pred: NodeId,
        gt: Tensor4,
        inter: Vec<f64>,
        union: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl PoolGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

enum ParamAccess<'p> {
    Train(&'p mut ParamSet),
    Eval(&'p ParamSet),
}

impl ParamAccess<'_> {
    fn get(&self, id: ParamId) -> &Tensor4 {
        match self {
            ParamAccess::Train(p) => p.value(id),
            ParamAccess::Eval(p) => p.value(id),
        }
    }
}

/// A single forward/backward tape over a parameter set.
pub struct Graph<'p> {
    params: ParamAccess<'p>,
    nodes: Vec<Node>,
    training: bool,
}

impl<'p> Graph<'p> {
    /// Training-mode graph: batch-norm uses batch statistics and updates
    /// running averages; [`Graph::backward`] is available.
    pub fn train(params: &'p mut ParamSet) -> Self {
        Self { params: ParamAccess::Train(params), nodes: Vec::new(), training: true }
    }

    /// Inference-mode graph: batch-norm uses running statistics, nothing is
    /// mutated.
    pub fn eval(params: &'p ParamSet) -> Self {
        Self { params: ParamAccess::Eval(params), nodes: Vec::new(), training: false }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, node: NodeId) -> &Tensor4 {
        &self.nodes[node.0].value
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, node: NodeId) -> f64 {
        let v = &self.nodes[node.0].value;
        debug_assert_eq!(v.len(), 1);
        v[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, node: NodeId) -> bool {
        self.nodes[node.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geo: ConvGeometry,
    ) -> NodeId {
        let w = self.params.get(weight);
        let bias_vec: Option<Vec<f64>> =
            bias.map(|b| channel_view(self.params.get(b)).to_vec());
        let y = conv2d_forward(
            &self.nodes[x.0].value.view(),
            &w.view(),
            bias_vec.as_deref(),
            &geo,
        );
        let needs = self.needs(x) || self.training;
        self.push(y, Op::Conv { x, weight, bias, geo }, needs)
    }

    pub fn batch_norm(&mut self, x: NodeId, bn: BnParams) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f64;
        let (mean, var) = if self.training {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let slice = xv.slice(s![.., ch, .., ..]);
                let mu = slice.sum() / m;
                let v = slice.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
                mean[ch] = mu;
                var[ch] = v;
            }
            (mean, var)
        } else {
            (
                channel_view(self.params.get(bn.running_mean)).to_owned(),
                channel_view(self.params.get(bn.running_var)).to_owned(),
            )
        };
        let invstd = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let gamma = channel_view(self.params.get(bn.gamma)).to_owned();
        let beta = channel_view(self.params.get(bn.beta)).to_owned();
        let mut y = xv.clone();
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - mu) * is * g + b);
        }
        if self.training {
            if let ParamAccess::Train(params) = &mut self.params {
                for (pid, batch) in [(bn.running_mean, &mean), (bn.running_var, &var)] {
                    let running = params.value_mut(pid);
                    for ch in 0..c {
                        let r = running[[0, ch, 0, 0]];
                        running[[0, ch, 0, 0]] = (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * batch[ch];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.training;
        self.push(y, Op::BatchNorm { x, bn, mean, invstd }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add { a, b }, needs)
    }

    /// Elementwise product with a constant tensor (broadcast over channels
    /// when `k` has one channel).
    pub fn mul_const(&mut self, x: NodeId, k: Tensor4) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let y = mul_broadcast(xv, &k);
        let needs = self.needs(x);
        self.push(y, Op::MulConst { x, k }, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v * k);
        let needs = self.needs(x);
        self.push(y, Op::Scale { x, k }, needs)
    }

    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.nodes[xs[0].0].value.dim();
        let total: usize = xs.iter().map(|x| self.nodes[x.0].value.dim().1).sum();
        let mut y = Array4::zeros((n, total, h, w));
        let mut off = 0;
        for x in xs {
            let v = &self.nodes[x.0].value;
            let c = v.dim().1;
            y.slice_mut(s![.., off..off + c, .., ..]).assign(v);
            off += c;
        }
        let needs = xs.iter().any(|x| self.needs(*x));
        self.push(y, Op::ConcatC { xs: xs.to_vec() }, needs)
    }

    /// Interleaves four equally-shaped maps into a 2×-upsampled map: parts
    /// A,B,C,D land at sub-pixel offsets (0,0), (0,1), (1,0), (1,1).
    pub fn interleave2(&mut self, parts: [NodeId; 4]) -> NodeId {
        let (n, c, h, w) = self.nodes[parts[0].0].value.dim();
        for p in &parts {
            assert_eq!(self.nodes[p.0].value.dim(), (n, c, h, w), "interleave shape mismatch");
        }
        let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
        for (idx, p) in parts.iter().enumerate() {
            let (dr, dc) = (idx / 2, idx % 2);
            let v = &self.nodes[p.0].value;
            y.slice_mut(s![.., .., dr..; 2, dc..; 2]).assign(v);
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(y, Op::Interleave2 { parts }, needs)
    }

    pub fn max_pool(&mut self, x: NodeId, geo: PoolGeometry) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let (oh, ow) = geo.out_size(h, w);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut argmax = Array4::<u32>::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for r in 0..oh {
                    for cc in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for kr in 0..geo.kernel.0 {
                            for kc in 0..geo.kernel.1 {
                                let ir = (r * geo.stride.0 + kr) as isize - geo.pad.0 as isize;
                                let ic = (cc * geo.stride.1 + kc) as isize - geo.pad.1 as isize;
                                if ir < 0 || ir >= h as isize || ic < 0 || ic >= w as isize {
                                    continue;
                                }
                                let v = xv[[i, ch, ir as usize, ic as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (ir as usize * w + ic as usize) as u32;
                                }
                            }
                        }
                        y[[i, ch, r, cc]] = best;
                        argmax[[i, ch, r, cc]] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(y, Op::MaxPool { x, argmax }, needs)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
        for dr in 0..2 {
            for dc in 0..2 {
                y.slice_mut(s![.., .., dr..; 2, dc..; 2]).assign(xv);
            }
        }
        let needs = self.needs(x);
        self.push(y, Op::UpsampleNearest2 { x }, needs)
    }

    /// Sums channels into a single-channel map.
    pub fn sum_c(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, _, h, w) = xv.dim();
        let mut y = Array4::zeros((n, 1, h, w));
        {
            let mut dst = y.slice_mut(s![.., 0, .., ..]);
            dst.assign(&xv.sum_axis(ndarray::Axis(1)));
        }
        let needs = self.needs(x);
        self.push(y, Op::SumC { x }, needs)
    }

    pub fn softmax_c(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let mut y = xv.clone();
        for i in 0..n {
            for r in 0..h {
                for cc in 0..w {
                    let mut max = f64::NEG_INFINITY;
                    for ch in 0..c {
                        max = max.max(y[[i, ch, r, cc]]);
                    }
                    let mut sum = 0.0;
                    for ch in 0..c {
                        let e = (y[[i, ch, r, cc]] - max).exp();
                        y[[i, ch, r, cc]] = e;
                        sum += e;
                    }
                    for ch in 0..c {
                        y[[i, ch, r, cc]] /= sum;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(y, Op::SoftmaxC { x }, needs)
    }

    /// Masked MAPE loss in percent over `mask != 0` positions:
    /// `(100/n)·Σ mask·|pred − gt|/gt`. Ground truth must be positive under
    /// the mask; the caller guarantees `n_valid > 0`.
    pub fn masked_mape_loss(&mut self, pred: NodeId, gt: Tensor4, mask: Tensor4) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.dim(), gt.dim(), "mape loss shape mismatch");
        assert_eq!(pv.dim(), mask.dim(), "mape mask shape mismatch");
        let n_valid = mask.iter().filter(|m| **m != 0.0).count() as f64;
        assert!(n_valid > 0.0, "mape loss needs at least one valid pixel");
        let mut sum = 0.0;
        ndarray::Zip::from(pv).and(&gt).and(&mask).for_each(|&p, &g, &m| {
            if m != 0.0 {
                sum += (p - g).abs() / g;
            }
        });
        let value = Array4::from_elem((1, 1, 1, 1), 100.0 / n_valid * sum);
        let needs = self.needs(pred);
        self.push(value, Op::MaskedMape { pred, gt, mask, n_valid }, needs)
    }

    /// Soft IoU loss `1 − mean_c Σ(p·g)/Σ(p+g−p·g)` aggregated over the
    /// whole batch; channels empty in both tensors count as a perfect 1.
    pub fn soft_iou_loss(&mut self, pred: NodeId, gt: Tensor4) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.dim(), gt.dim(), "iou loss shape mismatch");
        let c = pv.dim().1;
        let mut inter = vec![0.0f64; c];
        let mut union = vec![0.0f64; c];
        for ch in 0..c {
            let ps = pv.slice(s![.., ch, .., ..]);
            let gs = gt.slice(s![.., ch, .., ..]);
            ndarray::Zip::from(&ps).and(&gs).for_each(|&p, &g| {
                inter[ch] += p * g;
                union[ch] += p + g - p * g;
            });
        }
        let mean_iou = inter
            .iter()
            .zip(&union)
            .map(|(&i, &u)| if u == 0.0 { 1.0 } else { i / u })
            .sum::<f64>()
            / c as f64;
        let value = Array4::from_elem((1, 1, 1, 1), 1.0 - mean_iou);
        let needs = self.needs(pred);
        self.push(value, Op::SoftIou { pred, gt, inter, union }, needs)
    }

    /// Reverse-mode sweep from a scalar loss node. Gradients of trainable
    /// parameters accumulate into the parameter set (call
    /// [`ParamSet::zero_grads`] between steps).
    pub fn backward(&mut self, loss: NodeId) {
        assert!(self.training, "backward requires a training graph");
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, dy, &mut grads);
        }
    }

    fn accumulate(grads: &mut [Option<Tensor4>], node: NodeId, g: Tensor4) {
        match &mut grads[node.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn param_grad_add(&mut self, id: ParamId, g: &Tensor4) {
        if let ParamAccess::Train(params) = &mut self.params {
            if params.is_trainable(id) {
                params.grads[id.0] += g;
            }
        }
    }

    fn backward_node(&mut self, idx: usize, dy: Tensor4, grads: &mut [Option<Tensor4>]) {
        // Split borrow: take op out so `self.params` stays reachable.
        let node_ptr: *const Node = &self.nodes[idx];
        let node = unsafe { &*node_ptr };
        match &node.op {
            Op::Input => {}
            Op::Conv { x, weight, bias, geo } => {
                let need_dx = self.needs(*x);
                let xv = self.nodes[x.0].value.view();
                let wv = self.params.get(*weight).clone();
                let mut dw = Array4::zeros(wv.dim());
                let mut db_vec = bias.map(|_| vec![0.0; wv.dim().0]);
                let dx = conv2d_backward(
                    &xv,
                    &wv.view(),
                    &dy.view(),
                    geo,
                    &mut dw,
                    db_vec.as_deref_mut(),
                    need_dx,
                );
                self.param_grad_add(*weight, &dw);
                if let (Some(b), Some(db)) = (bias, db_vec) {
                    let db4 =
                        Array4::from_shape_vec((1, db.len(), 1, 1), db).expect("bias shape");
                    self.param_grad_add(*b, &db4);
                }
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm { x, bn, mean, invstd } => {
                let xv = &self.nodes[x.0].value;
                let (n, c, h, w) = xv.dim();
                let m = (n * h * w) as f64;
                let gamma = channel_view(self.params.get(bn.gamma)).to_owned();
                let mut dgamma = Array4::zeros((1, c, 1, 1));
                let mut dbeta = Array4::zeros((1, c, 1, 1));
                let mut dx = Array4::zeros(xv.dim());
                for ch in 0..c {
                    let (mu, is, g) = (mean[ch], invstd[ch], gamma[ch]);
                    let xs = xv.slice(s![.., ch, .., ..]);
                    let dys = dy.slice(s![.., ch, .., ..]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    ndarray::Zip::from(&xs).and(&dys).for_each(|&x, &d| {
                        sum_dy += d;
                        sum_dy_xhat += d * (x - mu) * is;
                    });
                    dgamma[[0, ch, 0, 0]] = sum_dy_xhat;
                    dbeta[[0, ch, 0, 0]] = sum_dy;
                    let mut dxs = dx.slice_mut(s![.., ch, .., ..]);
                    if self.training {
                        ndarray::Zip::from(&mut dxs).and(&xs).and(&dys).for_each(
                            |o, &x, &d| {
                                let xhat = (x - mu) * is;
                                *o = g * is * (d - sum_dy / m - xhat * sum_dy_xhat / m);
                            },
                        );
                    } else {
                        ndarray::Zip::from(&mut dxs).and(&dys).for_each(|o, &d| {
                            *o = g * is * d;
                        });
                    }
                }
                self.param_grad_add(bn.gamma, &dgamma);
                self.param_grad_add(bn.beta, &dbeta);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    Self::accumulate(grads, *b, dy.clone());
                }
                if self.needs(*a) {
                    Self::accumulate(grads, *a, dy);
                }
            }
            Op::MulConst { x, k } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, mul_broadcast(&dy, k));
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, dy.mapv(|v| v * k));
                }
            }
            Op::ConcatC { xs } => {
                let mut off = 0;
                for x in xs {
                    let c = self.nodes[x.0].value.dim().1;
                    if self.needs(*x) {
                        let dx = dy.slice(s![.., off..off + c, .., ..]).to_owned();
                        Self::accumulate(grads, *x, dx);
                    }
                    off += c;
                }
            }
            Op::Interleave2 { parts } => {
                for (idx, p) in parts.iter().enumerate() {
                    if self.needs(*p) {
                        let (dr, dc) = (idx / 2, idx % 2);
                        let dx = dy.slice(s![.., .., dr..; 2, dc..; 2]).to_owned();
                        Self::accumulate(grads, *p, dx);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let (n, c, _, w) = xv.dim();
                    let (_, _, oh, ow) = dy.dim();
                    let mut dx = Array4::zeros(xv.dim());
                    for i in 0..n {
                        for ch in 0..c {
                            for r in 0..oh {
                                for cc in 0..ow {
                                    let flat = argmax[[i, ch, r, cc]] as usize;
                                    dx[[i, ch, flat / w, flat % w]] += dy[[i, ch, r, cc]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if self.needs(*x) {
                    let mut dx: Tensor4 = dy.slice(s![.., .., 0..; 2, 0..; 2]).to_owned();
                    dx += &dy.slice(s![.., .., 0..; 2, 1..; 2]);
                    dx += &dy.slice(s![.., .., 1..; 2, 0..; 2]);
                    dx += &dy.slice(s![.., .., 1..; 2, 1..; 2]);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SumC { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let c = xv.dim().1;
                    let mut dx = Array4::zeros(xv.dim());
                    for ch in 0..c {
                        dx.slice_mut(s![.., ch, .., ..]).assign(&dy.slice(s![.., 0, .., ..]));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxC { x } => {
                if self.needs(*x) {
                    let yv = &node.value;
                    let (n, c, h, w) = yv.dim();
                    let mut dx = Array4::zeros(yv.dim());
                    for i in 0..n {
                        for r in 0..h {
                            for cc in 0..w {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    dot += dy[[i, ch, r, cc]] * yv[[i, ch, r, cc]];
                                }
                                for ch in 0..c {
                                    dx[[i, ch, r, cc]] =
                                        yv[[i, ch, r, cc]] * (dy[[i, ch, r, cc]] - dot);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::MaskedMape { pred, gt, mask, n_valid } => {
                if self.needs(*pred) {
                    let upstream = dy[[0, 0, 0, 0]];
                    let pv = &self.nodes[pred.0].value;
                    let mut dx = Array4::zeros(pv.dim());
                    ndarray::Zip::from(&mut dx).and(pv).and(gt).and(mask).for_each(
                        |o, &p, &g, &m| {
                            if m != 0.0 {
                                let diff = p - g;
                                let sign = if diff == 0.0 { 0.0 } else { diff.signum() };
                                *o = upstream * 100.0 / n_valid * sign / g;
                            }
                        },
                    );
                    Self::accumulate(grads, *pred, dx);
                }
            }
            Op::SoftIou { pred, gt, inter, union } => {
                if self.needs(*pred) {
                    let upstream = dy[[0, 0, 0, 0]];
                    let pv = &self.nodes[pred.0].value;
                    let c = pv.dim().1;
                    let mut dx = Array4::zeros(pv.dim());
                    for ch in 0..c {
                        if union[ch] == 0.0 {
                            continue;
                        }
                        let (i_c, u_c) = (inter[ch], union[ch]);
                        let gs = gt.slice(s![.., ch, .., ..]);
                        let mut dxs = dx.slice_mut(s![.., ch, .., ..]);
                        ndarray::Zip::from(&mut dxs).and(&gs).for_each(|o, &g| {
                            let d = (g * u_c - i_c * (1.0 - g)) / (u_c * u_c);
                            *o = -upstream * d / c as f64;
                        });
                    }
                    Self::accumulate(grads, *pred, dx);
                }
            }
        }
    }
}

fn mul_broadcast(x: &Tensor4, k: &Tensor4) -> Tensor4 {
    if x.dim() == k.dim() {
        x * k
    } else {
        let (n, c, h, w) = x.dim();
        let (kn, kc, kh, kw) = k.dim();
        assert!(
            (kn == n || kn == 1) && (kc == c || kc == 1) && kh == h && kw == w,
            "mask shape {:?} does not broadcast over {:?}",
            k.dim(),
            x.dim()
        );
        Array4::from_shape_fn((n, c, h, w), |(i, ch, r, cc)| {
            x[[i, ch, r, cc]] * k[[i.min(kn - 1), ch.min(kc - 1), r, cc]]
        })
    }
}

/// Adam optimizer over the trainable parameters of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let m = params.values.iter().map(|v| Array4::zeros(v.dim())).collect();
        let v = params.values.iter().map(|v| Array4::zeros(v.dim())).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update from the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.values.len() {
            if !params.trainable[i] {
                continue;
            }
            let g = &params.grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.learning_rate;
            let eps = self.eps;
            ndarray::Zip::from(&mut params.values[i])
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}
