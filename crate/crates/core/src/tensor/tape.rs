use super::conv::{
    batch_to_channel_major, channel_to_batch_major, col2im, conv_out_side,
    conv_transpose_out_side, im2col, pool_out_side, Patch,
};
use super::gemm::gemm;
use super::{dim_err, Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, g: Patch },
    ConvTranspose2d { x: Var, w: Var, g: Patch },
    AddChannelBias { x: Var, b: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    AddRowBias { x: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Tanh { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Bce { p: Var, targets: Vec<T> },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Abs { a: Var },
    Square { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumRows { a: Var },
    GlobalAvgPool { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order. A tape supports exactly one backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const BCE_CLAMP: f64 = 1e-7;
const L2_FLOOR: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.grads.is_some() {
            return Err(TensorError::Lifecycle("cannot record onto a consumed tape"));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf, &[])?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn rank4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [a, b, c, d] => Ok([a, b, c, d]),
            ref s => dim_err(op, format!("expected rank-4 tensor, got {s:?}")),
        }
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape(v) {
            [a, b] => Ok([a, b]),
            ref s => dim_err(op, format!("expected rank-2 tensor, got {s:?}")),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.rank4(x, "conv2d")?;
        let [f, c2, kh, kw] = self.rank4(w, "conv2d")?;
        if c != c2 {
            return dim_err("conv2d", format!("input has {c} channels, kernel expects {c2}"));
        }
        let oh = conv_out_side(h, kh, stride, pad)?;
        let ow = conv_out_side(wd, kw, stride, pad)?;
        let g = Patch { n, c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let cols = im2col(self.value(x).data(), &g);
        let mut out = vec![T::zero(); f * g.cols()];
        gemm(false, false, f, g.cols(), g.rows(), T::one(), self.value(w).data(), &cols, T::zero(), &mut out);
        let out = channel_to_batch_major(&out, n, f, oh * ow);
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, g }, &[x, w])
    }

    /// Transposed convolution of `[N,C,H,W]` with `[C,F,kh,kw]`; the adjoint of [`Tape::conv2d`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.rank4(x, "conv_transpose2d")?;
        let [c2, f, kh, kw] = self.rank4(w, "conv_transpose2d")?;
        if c != c2 {
            return dim_err("conv_transpose2d", format!("input has {c} channels, kernel expects {c2}"));
        }
        let oh = conv_transpose_out_side(h, kh, stride, pad)?;
        let ow = conv_transpose_out_side(wd, kw, stride, pad)?;
        // The output plays the role of a conv input whose unfold grid is h x wd.
        let g = Patch { n, c: f, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
        let xt = batch_to_channel_major(self.value(x).data(), n, c, h * wd);
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        gemm(true, false, g.rows(), g.cols(), c, T::one(), self.value(w).data(), &xt, T::zero(), &mut cols);
        let out = col2im(&cols, &g);
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        self.push("conv_transpose2d", value, Op::ConvTranspose2d { x, w, g }, &[x, w])
    }

    /// Adds `b[C]` to every position of channel `C` in `[N,C,...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return dim_err("add_channel_bias", format!("{xs:?} with bias {:?}", self.shape(b)));
        }
        let (c, spatial) = (xs[1], xs[2..].iter().product::<usize>());
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(spatial).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(xs, out)?;
        self.push("add_channel_bias", value, Op::AddChannelBias { x, b }, &[x, b])
    }

    /// Max over `window x window` cells; ties resolve to the first row-major index.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "maxpool2d")?;
        let oh = pool_out_side(h, window, stride)?;
        let ow = pool_out_side(w, window, stride)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2d", value, Op::MaxPool2d { x, argmax }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.rank2(a, "matmul")?;
        let [k2, n] = self.rank2(b, "matmul")?;
        if k != k2 {
            return dim_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.rank2(a, "transpose")?;
        let av = self.value(a).data();
        let out = Tensor::from_fn(&[n, m], |i| av[(i % m) * n + i / m]);
        self.push("transpose", out, Op::Transpose { a }, &[a])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, o] = self.rank2(x, "add_row_bias")?;
        if self.shape(b) != [o] {
            return dim_err("add_row_bias", format!("bias {:?} for width {o}", self.shape(b)));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv[i % o]);
        self.push("add_row_bias", out, Op::AddRowBias { x, b }, &[x, b])
    }

    /// Affine layer `x · W + b` with `W` stored `[in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return dim_err("leaky_relu", format!("slope {slope} outside [0, 1)"));
        }
        let s = T::from_f64(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push("leaky_relu", out, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh { x }, &[x])
    }

    /// Training-mode batch norm over every axis except 1; also returns the batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::DegenerateVariance("batchnorm2d"));
        }
        let m = T::from_f64((n * spatial) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, chunk) in xv.chunks(spatial).enumerate() {
            mean[i % c] += chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for (i, chunk) in xv.chunks(spatial).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * m / (m - T::one())).collect(),
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.chunks(spatial).enumerate() {
            let ch = i % c;
            for &v in chunk {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true };
        let v = self.push("batchnorm2d", value, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return dim_err("batchnorm2d", "running statistics do not match channel count");
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.chunks(spatial).enumerate() {
            let ch = i % c;
            for &v in chunk {
                let h = (v - running_mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false };
        self.push("batchnorm2d", value, op, &[x, gamma, beta])
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return dim_err("batchnorm2d", format!("expected at least rank 2, got {xs:?}"));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("batchnorm2d", format!("affine params do not match {c} channels"));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    /// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != targets.shape() {
            return dim_err("bce_loss", format!("{:?} vs targets {:?}", self.shape(p), targets.shape()));
        }
        let eps = T::from_f64(BCE_CLAMP);
        let n = T::from_f64(targets.numel() as f64);
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                let p = p.max(eps).min(T::one() - eps);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum::<T>()
            / n;
        let op = Op::Bce { p, targets: targets.data().to_vec() };
        self.push("bce_loss", Tensor::scalar(loss), op, &[p])
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = self.rank2(logits, "softmax_cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return dim_err("softmax_cross_entropy", "targets do not match logits");
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &t) in lv.chunks(k).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            loss += z.ln() + mx - row[t];
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let loss = loss / T::from_f64(n as f64);
        let op = Op::SoftmaxCe { logits, probs, targets: targets.to_vec() };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, op)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        Ok(Tensor::from_fn(self.shape(a), |i| f(av[i], bv[i])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale { a, s }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        self.push("abs", out, Op::Abs { a }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::MeanAll { a }, &[a])
    }

    /// Sums every item along the leading axis: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, _) = t.rows();
        let out = Tensor::from_fn(&[n], |i| t.row(i).iter().copied().sum());
        self.push("sum_rows", out, Op::SumRows { a }, &[a])
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "global_avg_pool")?;
        let xv = self.value(x).data();
        let hw = T::from_f64((h * w) as f64);
        let out = Tensor::from_fn(&[n, c], |i| xv[i * h * w..(i + 1) * h * w].iter().copied().sum::<T>() / hw);
        self.push("global_avg_pool", out, Op::GlobalAvgPool { x }, &[x])
    }

    /// Scales each row of `[N,D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let [_, d] = self.rank2(x, "l2_normalize")?;
        let xv = self.value(x).data();
        let norms: Vec<T> = xv
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::from_f64(L2_FLOOR)))
            .collect();
        let out = Tensor::from_fn(self.shape(x), |i| xv[i] / norms[i / d]);
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::Lifecycle("backward already ran on this tape"));
        }
        if seed.shape() != self.shape(root) {
            return dim_err("backward", "seed gradient shape differs from root");
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed.into_data());
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]. Leaves that require grad
    /// but were unreachable from the loss get zeros; constants get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, g: geo } => {
                let f = nodes[w.0].value.shape()[0];
                let gt = batch_to_channel_major(g, geo.n, f, geo.oh * geo.ow);
                if needs(*w) {
                    let cols = im2col(val(*x), geo);
                    let mut dw = vec![T::zero(); f * geo.rows()];
                    gemm(false, true, f, geo.rows(), geo.cols(), T::one(), &gt, &cols, T::zero(), &mut dw);
                    acc(*w, dw);
                }
                if needs(*x) {
                    let mut dcols = vec![T::zero(); geo.rows() * geo.cols()];
                    gemm(true, false, geo.rows(), geo.cols(), f, T::one(), val(*w), &gt, T::zero(), &mut dcols);
                    acc(*x, col2im(&dcols, geo));
                }
            }
            Op::ConvTranspose2d { x, w, g: geo } => {
                let c = nodes[x.0].value.shape()[1];
                let hw = geo.oh * geo.ow;
                let dcols = im2col(g, geo);
                if needs(*x) {
                    let mut dxt = vec![T::zero(); c * geo.cols()];
                    gemm(false, false, c, geo.cols(), geo.rows(), T::one(), val(*w), &dcols, T::zero(), &mut dxt);
                    acc(*x, channel_to_batch_major(&dxt, geo.n, c, hw));
                }
                if needs(*w) {
                    let xt = batch_to_channel_major(val(*x), geo.n, c, hw);
                    let mut dw = vec![T::zero(); c * geo.rows()];
                    gemm(false, true, c, geo.rows(), geo.cols(), T::one(), &xt, &dcols, T::zero(), &mut dw);
                    acc(*w, dw);
                }
            }
            Op::AddChannelBias { x, b } => {
                if needs(*b) {
                    let s = out.shape();
                    let (c, spatial) = (s[1], s[2..].iter().product::<usize>());
                    let mut db = vec![T::zero(); c];
                    for (k, chunk) in g.chunks(spatial).enumerate() {
                        db[k % c] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, T::one(), g, val(*b), T::zero(), &mut da);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, T::one(), val(*a), g, T::zero(), &mut db);
                    acc(*b, db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                // g is [n, m]
                acc(*a, (0..m * n).map(|i| g[(i % n) * m + i / n]).collect());
            }
            Op::AddRowBias { x, b } => {
                if needs(*b) {
                    let o = nodes[b.0].value.numel();
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *slope }).collect());
            }
            Op::Sigmoid { x } => {
                let y = out.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect());
            }
            Op::Tanh { x } => {
                let y = out.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = out.shape();
                let (c, spatial) = (s[1], s[2..].iter().product::<usize>());
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (k, (gc, hc)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = k % c;
                    for (&gi, &hi) in gc.iter().zip(hc) {
                        dbeta[ch] += gi;
                        dgamma[ch] += gi * hi;
                    }
                }
                if needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    if *train {
                        let m = T::from_f64((s[0] * spatial) as f64);
                        // Σ dxhat = gamma Σ g and Σ dxhat·xhat = gamma Σ g·xhat per channel.
                        for (k, (gc, hc)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                            let ch = k % c;
                            let scale = gv[ch] * inv_std[ch] / m;
                            for (&gi, &hi) in gc.iter().zip(hc) {
                                dx.push(scale * (m * gi - dbeta[ch] - hi * dgamma[ch]));
                            }
                        }
                    } else {
                        for (k, gc) in g.chunks(spatial).enumerate() {
                            let ch = k % c;
                            dx.extend(gc.iter().map(|&gi| gi * gv[ch] * inv_std[ch]));
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Bce { p, targets } => {
                let eps = T::from_f64(BCE_CLAMP);
                let n = T::from_f64(targets.len() as f64);
                let scale = g[0] / n;
                let dp = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        let p = p.max(eps).min(T::one() - eps);
                        scale * (-t / p + (T::one() - t) / (T::one() - p))
                    })
                    .collect();
                acc(*p, dp);
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                let k = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= scale;
                }
                acc(*logits, d);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale { a, s } => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::Abs { a } => {
                let av = val(*a);
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Square { a } => {
                let two = T::from_f64(2.0);
                acc(*a, g.iter().zip(val(*a)).map(|(&gv, &x)| two * x * gv).collect());
            }
            Op::SumAll { a } => acc(*a, vec![g[0]; nodes[a.0].value.numel()]),
            Op::MeanAll { a } => {
                let n = nodes[a.0].value.numel();
                acc(*a, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::SumRows { a } => {
                let (n, w) = nodes[a.0].value.rows();
                let mut d = Vec::with_capacity(n * w);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv, w));
                }
                acc(*a, d);
            }
            Op::GlobalAvgPool { x } => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut d = Vec::with_capacity(nodes[x.0].value.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                acc(*x, d);
            }
            Op::L2Normalize { x, norms } => {
                let d = norms.len();
                let width = out.numel() / d;
                let y = out.data();
                let mut dx = Vec::with_capacity(out.numel());
                for r in 0..d {
                    let yr = &y[r * width..(r + 1) * width];
                    let gr = &g[r * width..(r + 1) * width];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / norms[r]));
                }
                acc(*x, dx);
            }
        }
    }
}
