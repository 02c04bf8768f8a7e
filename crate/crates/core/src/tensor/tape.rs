//! Reverse-mode tape.
//!
//! A [`Tape`] is a Wengert list: every op pushes its output tensor plus an
//! op record referencing input slots. [`Tape::backward`] walks the list in
//! reverse, accumulating gradients into every slot that requires them.
//! Iteration order is fixed, so gradients are bit-reproducible for identical
//! tape contents.
//!
//! Tensors enter the tape by value ([`Tape::leaf`] / [`Tape::constant`]);
//! persistent parameters are cloned in each pass and their gradients are read
//! back out through [`Tape::grad`].

use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a slot on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-norm running statistics; owned by the enclosing layer, updated by
/// train-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    /// y = x @ w^T + b; x: [r x i], w: [o x i], b: [o].
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    /// a @ b^T; a: [m x k], b: [n x k].
    MatmulNT { a: Var, b: Var },
    /// a^T @ b; a: [k x m], b: [k x n].
    MatmulTN { a: Var, b: Var },
    Transpose { x: Var },
    /// 3x3 convolution, padding 1, stride 1, no bias term.
    Conv2d { x: Var, w: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        saved_mean: Vec<f32>,
        saved_invstd: Vec<f32>,
    },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    GlobalAvgPool { x: Var },
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    ConcatCols { parts: Vec<Var> },
    SumChunkRows { x: Var, chunk: usize },
    RepeatRow { x: Var, times: usize },
    Reshape { x: Var },
    /// y = x * w broadcast per row; x: [r x c], w: [r x 1].
    RowScale { x: Var, w: Var },
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u32>>,
        probs: Vec<f32>,
    },
    MseLoss { pred: Var, target: Var },
    CosineSim { a: Var, b: Var },
}

struct Slot {
    value: Tensor,
    op: Op,
}

/// Single-pass reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { slots: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.slots.push(Slot { value, op });
        Var(self.slots.len() - 1)
    }

    /// Register a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// Clone a parameter onto the tape with gradients enabled.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.push(c, Op::Leaf)
    }

    /// Clone a parameter onto the tape with gradients disabled (frozen).
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = false;
        c.grad = None;
        self.push(c, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.slots[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.slots[v.0].value.grad.as_deref()
    }

    /// Detached copy of a slot's value.
    pub fn detach(&self, v: Var) -> Tensor {
        let t = &self.slots[v.0].value;
        let mut c = t.clone();
        c.requires_grad = false;
        c.grad = None;
        c
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn requires(&self, v: Var) -> bool {
        self.slots[v.0].value.requires_grad
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires(*v))
    }

    fn out_tensor(&self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        let mut t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        t.requires_grad = requires_grad;
        t
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = self.out_tensor(ta.shape().to_vec(), data, self.any_requires(&[a, b]));
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = self.out_tensor(tx.shape().to_vec(), data, self.requires(x));
        self.push(t, Op::Scale { x, c })
    }

    /// y = x @ w^T + b. x: [r x i], w: [o x i], b: [o] -> [r x o].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (r, i, o) = (xs[0], xs[1], ws[0]);
        if tb.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "linear(bias)",
                lhs: vec![o],
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; r * o];
        kernels::gemm_nt(r, i, o, 1.0, tx.data(), tw.data(), 0.0, &mut data);
        let bias = tb.data();
        for row in data.chunks_exact_mut(o) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = self.out_tensor(vec![r, o], data, self.any_requires(&[x, w, b]));
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// a: [m x k], b: [k x n] -> [m x n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, 1.0, ta.data(), tb.data(), 0.0, &mut data);
        let t = self.out_tensor(vec![m, n], data, self.any_requires(&[a, b]));
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// a: [m x k], b: [n x k] -> a @ b^T: [m x n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_nt(m, k, n, 1.0, ta.data(), tb.data(), 0.0, &mut data);
        let t = self.out_tensor(vec![m, n], data, self.any_requires(&[a, b]));
        Ok(self.push(t, Op::MatmulNT { a, b }))
    }

    /// a: [k x m], b: [k x n] -> a^T @ b: [m x n].
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (k, m, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_tn(m, k, n, 1.0, ta.data(), tb.data(), 0.0, &mut data);
        let t = self.out_tensor(vec![m, n], data, self.any_requires(&[a, b]));
        Ok(self.push(t, Op::MatmulTN { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "rank 2".into(),
                got: s.to_vec(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = tx.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = self.out_tensor(vec![c, r], data, self.requires(x));
        Ok(self.push(t, Op::Transpose { x }))
    }

    /// 3x3 convolution with padding 1 and stride 1.
    /// x: [b x c x h x w] (or [c x h x w]), w: [o x c x 3 x 3].
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape().to_vec();
        let ws = tw.shape().to_vec();
        let (batch, c, h, wd, batched) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2], false),
            4 => (xs[0], xs[1], xs[2], xs[3], true),
            _ => {
                return Err(Error::BadShape {
                    op: "conv2d",
                    expected: "rank 3 or 4 input".into(),
                    got: xs,
                })
            }
        };
        if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let o = ws[0];
        let ck = c * 9;
        let hw = h * wd;
        let mut out = vec![0.0; batch * o * hw];
        let mut cols = vec![0.0; hw * ck];
        let mut tmp = vec![0.0; hw * o];
        for b in 0..batch {
            let img = &tx.data()[b * c * hw..(b + 1) * c * hw];
            kernels::im2col_3x3(img, c, h, wd, &mut cols);
            kernels::gemm_nt(hw, ck, o, 1.0, &cols, tw.data(), 0.0, &mut tmp);
            let dst = &mut out[b * o * hw..(b + 1) * o * hw];
            for p in 0..hw {
                for oc in 0..o {
                    dst[oc * hw + p] = tmp[p * o + oc];
                }
            }
        }
        let shape = if batched { vec![batch, o, h, wd] } else { vec![o, h, wd] };
        let t = self.out_tensor(shape, out, self.any_requires(&[x, w]));
        Ok(self.push(t, Op::Conv2d { x, w }))
    }

    /// Batch normalization over the channel axis of [b x c x h x w] (or
    /// [c x h x w]) input. Train mode normalizes with batch statistics and
    /// updates `stats` in place; eval mode normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape().to_vec();
        let (batch, c, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::BadShape {
                    op: "batchnorm2d",
                    expected: "rank 3 or 4 input".into(),
                    got: xs,
                })
            }
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || stats.mean.len() != c {
            return Err(Error::BadShape {
                op: "batchnorm2d",
                expected: format!("per-channel vectors of length {c}"),
                got: vec![self.value(gamma).numel(), self.value(beta).numel(), stats.mean.len()],
            });
        }
        let n = batch * h * w;
        let hw = h * w;
        let (mean, invstd) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm2d train mode needs at least 2 values per channel, got {n}"
                    )));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                let data = self.value(x).data();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for b in 0..batch {
                        let base = (b * c + ch) * hw;
                        for v in &data[base..base + hw] {
                            acc += *v as f64;
                        }
                    }
                    let mu = acc / n as f64;
                    let mut vacc = 0.0f64;
                    for b in 0..batch {
                        let base = (b * c + ch) * hw;
                        for v in &data[base..base + hw] {
                            let d = *v as f64 - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (vacc / n as f64) as f32;
                }
                // Running stats use the unbiased variance estimate.
                let unbias = n as f32 / (n as f32 - 1.0);
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] =
                        (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, invstd)
            }
            BnMode::Eval => {
                let mean = stats.mean.clone();
                let invstd = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, invstd)
            }
        };
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], invstd[ch], g[ch], bta[ch]);
                for i in base..base + hw {
                    out[i] = (data[i] - mu) * is * ga + be;
                }
            }
        }
        let t = self.out_tensor(xs, out, self.any_requires(&[x, gamma, beta]));
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved_mean: mean,
                saved_invstd: invstd,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape().to_vec();
        let (batch, c, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::BadShape {
                    op: "maxpool2",
                    expected: "rank 3 or 4 input".into(),
                    got: xs,
                })
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadShape {
                op: "maxpool2",
                expected: "even spatial extents".into(),
                got: xs,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = tx.data();
        let mut out = vec![0.0; batch * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..batch * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        let shape = if xs.len() == 4 {
            vec![batch, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        let t = self.out_tensor(shape, out, self.requires(x));
        Ok(self.push(t, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let t = self.out_tensor(tx.shape().to_vec(), data, self.requires(x));
        self.push(t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = self.out_tensor(tx.shape().to_vec(), data, self.requires(x));
        self.push(t, Op::Sigmoid { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "softmax",
                expected: format!("axis < rank {}", shape.len()),
                got: vec![axis],
            });
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = tx.data();
        let mut out = vec![0.0f32; src.len()];
        for ou in 0..outer {
            for inn in 0..inner {
                let base = ou * n * inner + inn;
                let mut mx = f32::NEG_INFINITY;
                for i in 0..n {
                    mx = mx.max(src[base + i * inner]);
                }
                let mut sum = 0.0f64;
                for i in 0..n {
                    let e = ((src[base + i * inner] - mx) as f64).exp();
                    out[base + i * inner] = e as f32;
                    sum += e;
                }
                let inv = (1.0 / sum) as f32;
                for i in 0..n {
                    out[base + i * inner] *= inv;
                }
            }
        }
        let t = self.out_tensor(shape, out, self.requires(x));
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// [b x c x h x w] -> [b x c] spatial average.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.len() != 4 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                expected: "rank 4 input".into(),
                got: xs.to_vec(),
            });
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = tx.data();
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            let mut acc = 0.0f64;
            for v in &src[bc * hw..(bc + 1) * hw] {
                acc += *v as f64;
            }
            out[bc] = (acc / hw as f64) as f32;
        }
        let t = self.out_tensor(vec![b, c], out, self.requires(x));
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    /// Select rows of a [r x c] matrix: out[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                expected: "rank 2 input".into(),
                got: xs.to_vec(),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        if let Some(bad) = idx.iter().find(|i| **i as usize >= r) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let src = tx.data();
        let mut out = vec![0.0; idx.len() * c];
        for (o, i) in out.chunks_exact_mut(c).zip(idx.iter()) {
            o.copy_from_slice(&src[*i as usize * c..(*i as usize + 1) * c]);
        }
        let t = self.out_tensor(vec![idx.len(), c], out, self.requires(x));
        Ok(self.push(t, Op::GatherRows { x, idx }))
    }

    /// Concatenate [r x c_i] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: empty input".into()));
        }
        let r = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut out = vec![0.0; r * total];
        let mut col = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.shape()[1];
            for i in 0..r {
                out[i * total + col..i * total + col + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            col += c;
        }
        let t = self.out_tensor(vec![r, total], out, self.any_requires(parts));
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Sum groups of `chunk` consecutive rows: [r x c] -> [r/chunk x c].
    pub fn sum_chunk_rows(&mut self, x: Var, chunk: usize) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.len() != 2 || chunk == 0 || xs[0] % chunk != 0 {
            return Err(Error::BadShape {
                op: "sum_chunk_rows",
                expected: format!("rank 2 with rows divisible by {chunk}"),
                got: xs.to_vec(),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let groups = r / chunk;
        let src = tx.data();
        let mut out = vec![0.0f32; groups * c];
        for g in 0..groups {
            let dst = &mut out[g * c..(g + 1) * c];
            for i in 0..chunk {
                let row = &src[(g * chunk + i) * c..(g * chunk + i + 1) * c];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let t = self.out_tensor(vec![groups, c], out, self.requires(x));
        Ok(self.push(t, Op::SumChunkRows { x, chunk }))
    }

    /// Tile a [1 x c] row `times` times into [times x c].
    pub fn repeat_row(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.len() != 2 || xs[0] != 1 {
            return Err(Error::BadShape {
                op: "repeat_row",
                expected: "shape [1 x c]".into(),
                got: xs.to_vec(),
            });
        }
        let c = xs[1];
        let mut out = Vec::with_capacity(times * c);
        for _ in 0..times {
            out.extend_from_slice(tx.data());
        }
        let t = self.out_tensor(vec![times, c], out, self.requires(x));
        Ok(self.push(t, Op::RepeatRow { x, times }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", tx.numel()),
                got: shape.to_vec(),
            });
        }
        let t = self.out_tensor(shape.to_vec(), tx.data().to_vec(), self.requires(x));
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Multiply each row of x: [r x c] by the matching entry of w: [r x 1].
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[0] || ws[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let wv = tw.data()[i];
            for j in 0..c {
                out[i * c + j] = tx.data()[i * c + j] * wv;
            }
        }
        let t = self.out_tensor(vec![r, c], out, self.any_requires(&[x, w]));
        Ok(self.push(t, Op::RowScale { x, w }))
    }

    /// Mean cross-entropy of logits [b x k] against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u32>>) -> Result<Var> {
        let tl = self.value(logits);
        let ls = tl.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::BadShape {
                op: "cross_entropy",
                expected: format!("[{} x k] logits", labels.len()),
                got: ls.to_vec(),
            });
        }
        let (b, k) = (ls[0], ls[1]);
        if let Some((i, bad)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= k) {
            return Err(Error::Data {
                path: "<labels>".into(),
                msg: format!("label {bad} out of range for {k} classes at sample {i}"),
            });
        }
        let src = tl.data();
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..k {
                let e = ((row[j] - mx) as f64).exp();
                probs[i * k + j] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..k {
                probs[i * k + j] = (probs[i * k + j] as f64 * inv) as f32;
            }
            loss -= ((row[labels[i] as usize] - mx) as f64 - sum.ln()) / b as f64;
        }
        let t = self.out_tensor(vec![1], vec![loss as f32], self.requires(logits));
        Ok(self.push(t, Op::CrossEntropy { logits, labels, probs }))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let n = tp.numel();
        let mut acc = 0.0f64;
        for (p, t) in tp.data().iter().zip(tt.data()) {
            let d = (*p - *t) as f64;
            acc += d * d;
        }
        let t = self.out_tensor(vec![1], vec![(acc / n as f64) as f32], self.any_requires(&[pred, target]));
        Ok(self.push(t, Op::MseLoss { pred, target }))
    }

    /// Cosine similarity of two flattened tensors. A zero-norm operand makes
    /// the output 0 with zero gradients (logged as a warning by callers that
    /// care).
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            dot += (*x as f64) * (*y as f64);
            na += (*x as f64) * (*x as f64);
            nb += (*y as f64) * (*y as f64);
        }
        let value = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na.sqrt() * nb.sqrt())) as f32
        };
        let t = self.out_tensor(vec![1], vec![value], self.any_requires(&[a, b]));
        Ok(self.push(t, Op::CosineSim { a, b }))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar slot. Populates `grad` on every slot that
    /// requires gradients and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                got: self.value(loss).shape().to_vec(),
            });
        }
        if !self.requires(loss) {
            return Err(Error::InvalidArgument(
                "backward: loss does not require gradients".into(),
            ));
        }
        self.slots[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.slots[i].value.grad.is_none() {
                continue;
            }
            let contribs = self.backward_step(i);
            for (var, contrib) in contribs {
                self.accumulate(var, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, contrib: Vec<f32>) {
        let slot = &mut self.slots[var.0];
        debug_assert_eq!(contrib.len(), slot.value.numel());
        match &mut slot.value.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
            None => slot.value.grad = Some(contrib),
        }
    }

    /// Gradient contributions of slot `i` to its inputs. Inputs that do not
    /// require gradients are skipped.
    fn backward_step(&self, i: usize) -> Vec<(Var, Vec<f32>)> {
        let slot = &self.slots[i];
        let g = slot.value.grad.as_ref().expect("checked by caller");
        let out = &slot.value;
        let mut res: Vec<(Var, Vec<f32>)> = Vec::new();
        let mut emit = |tape: &Tape, v: Var, data: Vec<f32>| {
            if tape.requires(v) {
                res.push((v, data));
            }
        };
        match &slot.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                emit(self, *a, g.clone());
                emit(self, *b, g.clone());
            }
            Op::Scale { x, c } => {
                emit(self, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (r, inp) = (tx.shape()[0], tx.shape()[1]);
                let o = tw.shape()[0];
                if self.requires(*x) {
                    let mut dx = vec![0.0; r * inp];
                    kernels::gemm_nn(r, o, inp, 1.0, g, tw.data(), 0.0, &mut dx);
                    res.push((*x, dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; o * inp];
                    kernels::gemm_tn(o, r, inp, 1.0, g, tx.data(), 0.0, &mut dw);
                    res.push((*w, dw));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks_exact(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, 1.0, g, tb.data(), 0.0, &mut da);
                    res.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, 1.0, ta.data(), g, 0.0, &mut db);
                    res.push((*b, db));
                }
            }
            Op::MatmulNT { a, b } => {
                // out = a @ b^T, a: [m x k], b: [n x k], g: [m x n]
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nn(m, n, k, 1.0, g, tb.data(), 0.0, &mut da);
                    res.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm_tn(n, m, k, 1.0, g, ta.data(), 0.0, &mut db);
                    res.push((*b, db));
                }
            }
            Op::MatmulTN { a, b } => {
                // out = a^T @ b, a: [k x m], b: [k x n], g: [m x n]
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, m) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; k * m];
                    kernels::gemm_nt(k, n, m, 1.0, tb.data(), g, 0.0, &mut da);
                    res.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_nn(k, m, n, 1.0, ta.data(), g, 0.0, &mut db);
                    res.push((*b, db));
                }
            }
            Op::Transpose { x } => {
                if self.requires(*x) {
                    let (c, r) = (out.shape()[0], out.shape()[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = g[i * r + j];
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let xs = tx.shape();
                let (batch, c, h, wd) = match xs.len() {
                    3 => (1, xs[0], xs[1], xs[2]),
                    _ => (xs[0], xs[1], xs[2], xs[3]),
                };
                let o = tw.shape()[0];
                let ck = c * 9;
                let hw = h * wd;
                let mut cols = vec![0.0; hw * ck];
                let mut dy_mat = vec![0.0; hw * o];
                let need_x = self.requires(*x);
                let need_w = self.requires(*w);
                let mut dx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; tw.numel()] } else { Vec::new() };
                let mut dcols = if need_x { vec![0.0; hw * ck] } else { Vec::new() };
                for b in 0..batch {
                    let gout = &g[b * o * hw..(b + 1) * o * hw];
                    for p in 0..hw {
                        for oc in 0..o {
                            dy_mat[p * o + oc] = gout[oc * hw + p];
                        }
                    }
                    if need_w {
                        let img = &tx.data()[b * c * hw..(b + 1) * c * hw];
                        kernels::im2col_3x3(img, c, h, wd, &mut cols);
                        kernels::gemm_tn(o, hw, ck, 1.0, &dy_mat, &cols, 1.0, &mut dw);
                    }
                    if need_x {
                        kernels::gemm_nn(hw, o, ck, 1.0, &dy_mat, tw.data(), 0.0, &mut dcols);
                        kernels::col2im_3x3(&dcols, c, h, wd, &mut dx[b * c * hw..(b + 1) * c * hw]);
                    }
                }
                if need_x {
                    res.push((*x, dx));
                }
                if need_w {
                    res.push((*w, dw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved_mean,
                saved_invstd,
            } => {
                let tx = self.value(*x);
                let xs = tx.shape();
                let (batch, c, hw) = match xs.len() {
                    3 => (1, xs[0], xs[1] * xs[2]),
                    _ => (xs[0], xs[1], xs[2] * xs[3]),
                };
                let n = (batch * hw) as f64;
                let gm = self.value(*gamma).data();
                let src = tx.data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                // Per-channel sums of dy and dy * xhat.
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xh = vec![0.0f64; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let (mu, is) = (saved_mean[ch] as f64, saved_invstd[ch] as f64);
                        let mut sd = 0.0f64;
                        let mut sdx = 0.0f64;
                        for i in base..base + hw {
                            let dy = g[i] as f64;
                            let xh = (src[i] as f64 - mu) * is;
                            sd += dy;
                            sdx += dy * xh;
                        }
                        sum_dy[ch] += sd;
                        sum_dy_xh[ch] += sdx;
                    }
                }
                for ch in 0..c {
                    dgamma[ch] = sum_dy_xh[ch] as f32;
                    dbeta[ch] = sum_dy[ch] as f32;
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0f32; tx.numel()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let (mu, is, ga) =
                                (saved_mean[ch] as f64, saved_invstd[ch] as f64, gm[ch] as f64);
                            match mode {
                                BnMode::Train => {
                                    let mean_dy = sum_dy[ch] / n;
                                    let mean_dy_xh = sum_dy_xh[ch] / n;
                                    for i in base..base + hw {
                                        let dy = g[i] as f64;
                                        let xh = (src[i] as f64 - mu) * is;
                                        dx[i] = (ga * is * (dy - mean_dy - xh * mean_dy_xh)) as f32;
                                    }
                                }
                                BnMode::Eval => {
                                    for i in base..base + hw {
                                        dx[i] = (g[i] as f64 * ga * is) as f32;
                                    }
                                }
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                if self.requires(*gamma) {
                    res.push((*gamma, dgamma));
                }
                if self.requires(*beta) {
                    res.push((*beta, dbeta));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.requires(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (gi, idx) in g.iter().zip(argmax) {
                        dx[*idx as usize] += gi;
                    }
                    res.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let dx = out
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(y, gv)| if *y > 0.0 { *gv } else { 0.0 })
                        .collect();
                    res.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let dx = out.data().iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                    res.push((*x, dx));
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(*x) {
                    let shape = out.shape();
                    let n = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = out.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for ou in 0..outer {
                        for inn in 0..inner {
                            let base = ou * n * inner + inn;
                            let mut dot = 0.0f64;
                            for i in 0..n {
                                let idx = base + i * inner;
                                dot += (g[idx] as f64) * (y[idx] as f64);
                            }
                            for i in 0..n {
                                let idx = base + i * inner;
                                dx[idx] = ((g[idx] as f64 - dot) * y[idx] as f64) as f32;
                            }
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.requires(*x) {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (bc, gv) in g.iter().enumerate() {
                        let v = gv * inv;
                        dx[bc * hw..(bc + 1) * hw].fill(v);
                    }
                    res.push((*x, dx));
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires(*x) {
                    let c = out.shape()[1];
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (row, i) in g.chunks_exact(c).zip(idx.iter()) {
                        let dst = &mut dx[*i as usize * c..(*i as usize + 1) * c];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.shape()[1];
                let r = out.shape()[0];
                let mut col = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if self.requires(*p) {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + col..i * total + col + c]);
                        }
                        res.push((*p, dp));
                    }
                    col += c;
                }
            }
            Op::SumChunkRows { x, chunk } => {
                if self.requires(*x) {
                    let c = out.shape()[1];
                    let groups = out.shape()[0];
                    let mut dx = vec![0.0; groups * chunk * c];
                    for gr in 0..groups {
                        let grow = &g[gr * c..(gr + 1) * c];
                        for i in 0..*chunk {
                            dx[(gr * chunk + i) * c..(gr * chunk + i + 1) * c].copy_from_slice(grow);
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::RepeatRow { x, times } => {
                if self.requires(*x) {
                    let c = out.shape()[1];
                    let mut dx = vec![0.0f32; c];
                    for t in 0..*times {
                        for j in 0..c {
                            dx[j] += g[t * c + j];
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    res.push((*x, g.clone()));
                }
            }
            Op::RowScale { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                if self.requires(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let wv = tw.data()[i];
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] * wv;
                        }
                    }
                    res.push((*x, dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; r];
                    for i in 0..r {
                        let mut acc = 0.0f64;
                        for j in 0..c {
                            acc += (g[i * c + j] as f64) * (tx.data()[i * c + j] as f64);
                        }
                        dw[i] = acc as f32;
                    }
                    res.push((*w, dw));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.requires(*logits) {
                    let k = self.value(*logits).shape()[1];
                    let b = labels.len();
                    let scale = g[0] / b as f32;
                    let mut dl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (i, l) in labels.iter().enumerate() {
                        dl[i * k + *l as usize] -= scale;
                    }
                    res.push((*logits, dl));
                }
            }
            Op::MseLoss { pred, target } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let n = tp.numel() as f32;
                let scale = 2.0 * g[0] / n;
                if self.requires(*pred) {
                    let dp = tp
                        .data()
                        .iter()
                        .zip(tt.data())
                        .map(|(p, t)| (p - t) * scale)
                        .collect();
                    res.push((*pred, dp));
                }
                if self.requires(*target) {
                    let dt = tp
                        .data()
                        .iter()
                        .zip(tt.data())
                        .map(|(p, t)| (t - p) * scale)
                        .collect();
                    res.push((*target, dt));
                }
            }
            Op::CosineSim { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut dot = 0.0f64;
                let mut na2 = 0.0f64;
                let mut nb2 = 0.0f64;
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    dot += (*x as f64) * (*y as f64);
                    na2 += (*x as f64) * (*x as f64);
                    nb2 += (*y as f64) * (*y as f64);
                }
                if na2 == 0.0 || nb2 == 0.0 {
                    // Degenerate; the op's value is the constant 0.
                    if self.requires(*a) {
                        res.push((*a, vec![0.0; ta.numel()]));
                    }
                    if self.requires(*b) {
                        res.push((*b, vec![0.0; tb.numel()]));
                    }
                } else {
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let cosv = dot / (na * nb);
                    let gv = g[0] as f64;
                    if self.requires(*a) {
                        let da = ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .map(|(x, y)| {
                                (gv * ((*y as f64) / (na * nb) - cosv * (*x as f64) / na2)) as f32
                            })
                            .collect();
                        res.push((*a, da));
                    }
                    if self.requires(*b) {
                        let db = tb
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(y, x)| {
                                (gv * ((*x as f64) / (na * nb) - cosv * (*y as f64) / nb2)) as f32
                            })
                            .collect();
                        res.push((*b, db));
                    }
                }
            }
        }
        res
    }
}
