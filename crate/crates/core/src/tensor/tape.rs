//! Reverse-mode autodiff over NCHW tensors.
//!
//! A [`Tape`] records every op as it executes. Calling [`Tape::backward`]
//! from a scalar node walks the record in reverse and accumulates exact
//! gradients for every leaf created with `requires_grad`. There is no
//! broadcasting anywhere: shapes must match exactly or the op returns a
//! [`TensorError::Shape`].
//!
//! Every op checks its output for NaN or infinity and fails with
//! [`TensorError::NonFinite`] rather than letting poisoned values spread.

use super::ops::{self, ConvDims, ConvTDims, PoolDims};
use super::{shape_err, RunningStat, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Whether batch norm consumes batch statistics (`Train`) or running
/// statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum OpRecord {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvTDims,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n: usize,
        c: usize,
        hw: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        dims: PoolDims,
    },
    ChannelShuffle {
        x: NodeId,
        n: usize,
        c: usize,
        hw: usize,
        groups: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        n: usize,
        ca: usize,
        cb: usize,
        hw: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    WeightedSum {
        x: NodeId,
        coeffs: Vec<f64>,
    },
    Wce {
        logits: NodeId,
        n: usize,
        hw: usize,
        labels: Vec<u8>,
        weights: [f64; 2],
        probs: Vec<f64>,
        total_w: f64,
    },
}

struct Node {
    value: Tensor,
    op: OpRecord,
    grad: Option<Tensor>,
}

/// Gradient tape. Build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are retained after
    /// `backward` only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, OpRecord::Leaf { requires_grad })
    }

    /// Value held at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` seed w.r.t. the leaf at `id`.
    /// `None` for non-leaves, leaves without `requires_grad`, or before
    /// any backward call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: OpRecord) -> NodeId {
        self.nodes.push(Node { value, op, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn finish(&mut self, op: &'static str, value: Tensor, rec: OpRecord) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(value, rec))
    }

    /// Grouped 2d convolution. Weight layout is `[cout, cin/groups, kh, kw]`,
    /// output extent `(H + 2*pad - kh) / stride + 1` with floor division.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4(OP)?;
        let (cout, cin_g, kh, kw) = self.nodes[w.0].value.dims4(OP)?;
        if stride == 0 || groups == 0 {
            return Err(shape_err(OP, "stride and groups must be positive".into()));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err(
                OP,
                format!("channels ({cin} in, {cout} out) not divisible by groups {groups}"),
            ));
        }
        if cin_g != cin / groups {
            return Err(shape_err(
                OP,
                format!("weight expects {cin_g} channels per group, input supplies {}", cin / groups),
            ));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(shape_err(OP, format!("bias shape {bs:?} does not match {cout} output channels")));
            }
        }
        let (ho, wo) = match (ops::conv_out_extent(h, kh, stride, pad), ops::conv_out_extent(wd, kw, stride, pad)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => {
                return Err(shape_err(
                    OP,
                    format!("kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}"),
                ))
            }
        };
        let dims = ConvDims { n, cin, h, w: wd, cout, kh, kw, stride, pad, groups, ho, wo };
        let y = ops::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &dims,
        );
        let t = Tensor::from_vec(vec![n, cout, ho, wo], y).expect("conv2d output size");
        self.finish(OP, t, OpRecord::Conv2d { x, w, b, dims })
    }

    /// Transposed 2d convolution. Weight layout is `[cin, cout, kh, kw]`,
    /// output extent `(H - 1) * stride - 2*pad + kh`.
    pub fn conv2d_transposed(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d_transposed";
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4(OP)?;
        let (w_cin, cout, kh, kw) = self.nodes[w.0].value.dims4(OP)?;
        if stride == 0 {
            return Err(shape_err(OP, "stride must be positive".into()));
        }
        if w_cin != cin {
            return Err(shape_err(
                OP,
                format!("weight expects {w_cin} input channels, input supplies {cin}"),
            ));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(shape_err(OP, format!("bias shape {bs:?} does not match {cout} output channels")));
            }
        }
        let ho = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let wo = ((wd - 1) * stride + kw).checked_sub(2 * pad);
        let (ho, wo) = match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => {
                return Err(shape_err(
                    OP,
                    format!("padding {pad} swallows the whole {kh}x{kw} output extent"),
                ))
            }
        };
        let dims = ConvTDims { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo };
        let y = ops::convt2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &dims,
        );
        let t = Tensor::from_vec(vec![n, cout, ho, wo], y).expect("conv2d_transposed output size");
        self.finish(OP, t, OpRecord::ConvT2d { x, w, b, dims })
    }

    /// Batch normalization over the (N, H, W) axes of each channel with
    /// biased variance. In `Train` mode the batch statistics are used and
    /// the running statistics updated in place as
    /// `running = momentum * running + (1 - momentum) * batch`;
    /// in `Eval` mode the running statistics are read and left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStat,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.nodes[x.0].value.dims4(OP)?;
        let hw = h * w;
        if self.nodes[gamma.0].value.shape() != [c] || self.nodes[beta.0].value.shape() != [c] {
            return Err(shape_err(OP, format!("gamma and beta must both have shape [{c}]")));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(shape_err(
                OP,
                format!("running statistics track {} channels, input has {c}", running.mean.len()),
            ));
        }
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let xd = self.nodes[x.0].value.data();
        let (y, mean, inv_std, train) = match mode {
            Mode::Train => {
                let (y, mean, var, inv_std) = ops::bn_forward_train(xd, n, c, hw, g, bt, eps);
                for ci in 0..c {
                    running.mean[ci] = momentum * running.mean[ci] + (1.0 - momentum) * mean[ci];
                    running.var[ci] = momentum * running.var[ci] + (1.0 - momentum) * var[ci];
                }
                (y, mean, inv_std, true)
            }
            Mode::Eval => {
                let (y, inv_std) = ops::bn_forward_eval(xd, n, c, hw, g, bt, &running.mean, &running.var, eps);
                (y, running.mean.clone(), inv_std, false)
            }
        };
        let t = Tensor::from_vec(vec![n, c, h, w], y).expect("batch_norm output size");
        self.finish(OP, t, OpRecord::BatchNorm { x, gamma, beta, n, c, hw, mean, inv_std, train })
    }

    /// Elementwise `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "relu";
        let v = &self.nodes[x.0].value;
        let y: Vec<f64> = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::from_vec(v.shape().to_vec(), y).expect("relu output size");
        self.finish(OP, t, OpRecord::Relu { x })
    }

    /// Square max pooling; padding behaves as negative infinity and
    /// `pad < k` is required so no window is empty.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "max_pool2d";
        let dims = self.pool_dims(OP, x, k, stride, pad)?;
        let (y, arg) = ops::maxpool_forward(self.nodes[x.0].value.data(), &dims);
        let t = Tensor::from_vec(vec![dims.n, dims.c, dims.ho, dims.wo], y).expect("max_pool2d output size");
        self.finish(OP, t, OpRecord::MaxPool { x, arg })
    }

    /// Square average pooling dividing by `k * k`; padded cells count
    /// as zeros in the numerator.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "avg_pool2d";
        let dims = self.pool_dims(OP, x, k, stride, pad)?;
        let y = ops::avgpool_forward(self.nodes[x.0].value.data(), &dims);
        let t = Tensor::from_vec(vec![dims.n, dims.c, dims.ho, dims.wo], y).expect("avg_pool2d output size");
        self.finish(OP, t, OpRecord::AvgPool { x, dims })
    }

    fn pool_dims(&self, op: &'static str, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<PoolDims, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4(op)?;
        if k == 0 || stride == 0 {
            return Err(shape_err(op, "kernel and stride must be positive".into()));
        }
        if pad >= k {
            return Err(shape_err(op, format!("pad {pad} must be smaller than kernel {k}")));
        }
        let (ho, wo) = match (ops::conv_out_extent(h, k, stride, pad), ops::conv_out_extent(w, k, stride, pad)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => return Err(shape_err(op, format!("window {k} does not fit input {h}x{w} with pad {pad}"))),
        };
        Ok(PoolDims { n, c, h, w, k, stride, pad, ho, wo })
    }

    /// Channel shuffle: reshape channels to `[groups, c/groups]`,
    /// transpose, flatten. Output channel `j` reads input channel
    /// `(j % groups) * (c / groups) + j / groups`.
    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "channel_shuffle";
        let (n, c, h, w) = self.nodes[x.0].value.dims4(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(OP, format!("{c} channels not divisible by {groups} groups")));
        }
        let y = ops::channel_shuffle_apply(self.nodes[x.0].value.data(), n, c, h * w, groups, true);
        let t = Tensor::from_vec(vec![n, c, h, w], y).expect("channel_shuffle output size");
        self.finish(OP, t, OpRecord::ChannelShuffle { x, n, c, hw: h * w, groups })
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "concat";
        let (na, ca, ha, wa) = self.nodes[a.0].value.dims4(OP)?;
        let (nb, cb, hb, wb) = self.nodes[b.0].value.dims4(OP)?;
        if na != nb || ha != hb || wa != wb {
            return Err(shape_err(
                OP,
                format!(
                    "inputs [{na},{ca},{ha},{wa}] and [{nb},{cb},{hb},{wb}] differ outside the channel axis"
                ),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut y = Vec::with_capacity(da.len() + db.len());
        for ni in 0..na {
            y.extend_from_slice(&da[ni * ca * hw..(ni + 1) * ca * hw]);
            y.extend_from_slice(&db[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let t = Tensor::from_vec(vec![na, ca + cb, ha, wa], y).expect("concat output size");
        self.finish(OP, t, OpRecord::Concat { a, b, n: na, ca, cb, hw })
    }

    /// Elementwise addition of two tensors of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "add";
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(shape_err(OP, format!("shapes {sa:?} and {sb:?} differ")));
        }
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(sa.to_vec(), y).expect("add output size");
        self.finish(OP, t, OpRecord::Add { a, b })
    }

    /// Fixed-coefficient dot product collapsing a tensor to a scalar.
    /// Used to scalarize outputs for gradient checking.
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: &[f64]) -> Result<NodeId, TensorError> {
        const OP: &str = "weighted_sum";
        let v = &self.nodes[x.0].value;
        if v.len() != coeffs.len() {
            return Err(shape_err(
                OP,
                format!("{} coefficients against {} elements", coeffs.len(), v.len()),
            ));
        }
        let s: f64 = v.data().iter().zip(coeffs).map(|(a, c)| a * c).sum();
        self.finish(OP, Tensor::scalar(s), OpRecord::WeightedSum { x, coeffs: coeffs.to_vec() })
    }

    /// Weighted two-class cross-entropy over softmaxed logits
    /// `[n, 2, h, w]`, normalized by the total weight of the target
    /// pixels. `labels` holds one target per pixel in row-major order.
    pub fn wce_loss(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        class_weights: [f64; 2],
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "weighted_cross_entropy";
        let (n, c, h, w) = self.nodes[logits.0].value.dims4(OP)?;
        if c != 2 {
            return Err(shape_err(OP, format!("expected 2 logit channels, got {c}")));
        }
        if labels.len() != n * h * w {
            return Err(shape_err(
                OP,
                format!("{} labels against {} pixels", labels.len(), n * h * w),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&t| t > 1) {
            return Err(TensorError::InvalidTarget(bad));
        }
        if !class_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(TensorError::InvalidClassWeights(class_weights[0], class_weights[1]));
        }
        let (loss, probs, total_w) =
            ops::wce_forward(self.nodes[logits.0].value.data(), n, h * w, labels, class_weights);
        self.finish(
            OP,
            Tensor::scalar(loss),
            OpRecord::Wce {
                logits,
                n,
                hw: h * w,
                labels: labels.to_vec(),
                weights: class_weights,
                probs,
                total_w,
            },
        )
    }

    /// Runs reverse-mode accumulation from the scalar at `seed`.
    /// Afterwards every `requires_grad` leaf answers [`Tape::grad`].
    pub fn backward(&mut self, seed: NodeId) -> Result<(), TensorError> {
        if self.nodes[seed.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("seed must be scalar, has {} elements", self.nodes[seed.0].value.len()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);
        for i in (0..=seed.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                OpRecord::Leaf { requires_grad } => {
                    if *requires_grad {
                        let shape = self.nodes[i].value.shape().to_vec();
                        self.nodes[i].grad =
                            Some(Tensor::from_vec(shape, gy).expect("leaf grad size"));
                    }
                    continue;
                }
                OpRecord::Conv2d { x, w, b, dims } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        &gy,
                        b.is_some(),
                        dims,
                    );
                    let (x, w, b) = (*x, *w, *b);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, b, db);
                    }
                }
                OpRecord::ConvT2d { x, w, b, dims } => {
                    let (dx, dw, db) = ops::convt2d_backward(
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        &gy,
                        b.is_some(),
                        dims,
                    );
                    let (x, w, b) = (*x, *w, *b);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, b, db);
                    }
                }
                OpRecord::BatchNorm { x, gamma, beta, n, c, hw, mean, inv_std, train } => {
                    let xd = self.nodes[x.0].value.data();
                    let g = self.nodes[gamma.0].value.data();
                    let (dx, dg, db) = if *train {
                        ops::bn_backward_train(xd, &gy, *n, *c, *hw, g, mean, inv_std)
                    } else {
                        ops::bn_backward_eval(xd, &gy, *n, *c, *hw, g, mean, inv_std)
                    };
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dg);
                    accumulate(&mut grads, beta, db);
                }
                OpRecord::Relu { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    let x = *x;
                    accumulate(&mut grads, x, dx);
                }
                OpRecord::MaxPool { x, arg } => {
                    let dx = ops::maxpool_backward(&gy, arg, self.nodes[x.0].value.len());
                    let x = *x;
                    accumulate(&mut grads, x, dx);
                }
                OpRecord::AvgPool { x, dims } => {
                    let dx = ops::avgpool_backward(&gy, dims);
                    let x = *x;
                    accumulate(&mut grads, x, dx);
                }
                OpRecord::ChannelShuffle { x, n, c, hw, groups } => {
                    let dx = ops::channel_shuffle_apply(&gy, *n, *c, *hw, *groups, false);
                    let x = *x;
                    accumulate(&mut grads, x, dx);
                }
                OpRecord::Concat { a, b, n, ca, cb, hw } => {
                    let (n, ca, cb, hw) = (*n, *ca, *cb, *hw);
                    let mut da = vec![0.0; n * ca * hw];
                    let mut db = vec![0.0; n * cb * hw];
                    for ni in 0..n {
                        let row = ni * (ca + cb) * hw;
                        da[ni * ca * hw..(ni + 1) * ca * hw]
                            .copy_from_slice(&gy[row..row + ca * hw]);
                        db[ni * cb * hw..(ni + 1) * cb * hw]
                            .copy_from_slice(&gy[row + ca * hw..row + (ca + cb) * hw]);
                    }
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                OpRecord::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, gy.clone());
                    accumulate(&mut grads, b, gy);
                }
                OpRecord::WeightedSum { x, coeffs } => {
                    let dx: Vec<f64> = coeffs.iter().map(|c| c * gy[0]).collect();
                    let x = *x;
                    accumulate(&mut grads, x, dx);
                }
                OpRecord::Wce { logits, n, hw, labels, weights, probs, total_w } => {
                    let dl = ops::wce_backward(probs, *n, *hw, labels, *weights, *total_w, gy[0]);
                    let logits = *logits;
                    accumulate(&mut grads, logits, dl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, add: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&add) {
                *a += b;
            }
        }
        slot => *slot = Some(add),
    }
}
