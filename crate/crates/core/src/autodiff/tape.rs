//! Reverse-mode tape. Each forward op appends a node holding its output value and
//! the information its backward rule needs; `backward` walks the tape in reverse.

use super::conv::{col2im_add, im2col, out_extent, ConvGeometry};
use super::optim::{ParamId, ParamStore};
use super::tensor::{gemm, Real, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm mode. Eval mode normalizes with the supplied running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics from a train-mode batch norm (variance is unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Neg(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, idx: Vec<u32> },
    PickRows { x: Var, cols: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, detail: String) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: {detail}"))
}

/// Splits `[N, C, rest...]` into `(N, C, spatial)`.
fn nc_spatial(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, rest @ ..] if !rest.is_empty() => Some((*n, *c, rest.iter().product())),
        _ => None,
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Parameters placed on this tape, in placement order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape; trainable parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// 2-D convolution: `x [N,C,H,W]`, `w [O,C,kh,kw]`, optional `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let (n, c, h, wd, o, kh, kw) = match (sx.as_slice(), sw.as_slice()) {
            ([n, c, h, wd], [o, c2, kh, kw]) if c == c2 => (*n, *c, *h, *wd, *o, *kh, *kw),
            _ => return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}"))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} filters", self.value(b).shape())));
            }
        }
        let (out_h, out_w) = match (out_extent(h, kh, stride, pad), out_extent(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"),
                ))
            }
        };
        let geom = ConvGeometry { channels: c, height: h, width: wd, kh, kw, stride, pad, out_h, out_w };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * o * cols];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for s in 0..n {
            im2col(&geom, &xd[s * c * h * wd..(s + 1) * c * h * wd], &mut col);
            gemm(o, rows, cols, wdat, false, &col, false, T::zero(), &mut out[s * o * cols..(s + 1) * o * cols]);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, plane) in out.chunks_exact_mut(cols).enumerate() {
                let bias = bd[i % o];
                plane.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        let value = Tensor::new(vec![n, o, out_h, out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]`; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, h, w) = match shape.as_slice() {
            [n, c, h, w] if *h >= 2 && *w >= 2 => (*n, *c, *h, *w),
            _ => return Err(shape_err("max_pool2", format!("input {shape:?}"))),
        };
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // Strict comparison keeps the first maximum in scan order.
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Mean over spatial positions: `[N,C,H,W]` → `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, hw) = match shape.as_slice() {
            [n, c, h, w] if h * w > 0 => (*n, *c, h * w),
            _ => return Err(shape_err("global_avg_pool", format!("input {shape:?}"))),
        };
        let inv = T::one() / T::from_usize(hw).expect("size");
        let out =
            self.value(x).data().chunks_exact(hw).map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), needs))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a per-channel bias `b [C]` to `x [N,C,...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        let (_, c, sp) = nc_spatial(&shape).ok_or_else(|| shape_err("add_bias", format!("input {shape:?}")))?;
        if self.value(b).shape() != [c] {
            return Err(shape_err("add_bias", format!("bias {:?} for {c} channels", self.value(b).shape())));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_exact_mut(sp).enumerate() {
            let bias = bd[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(t.numel()).expect("size");
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), needs))
    }

    fn rows(&self, name: &str, x: Var) -> Result<(usize, usize), AutodiffError> {
        match self.value(x).shape() {
            [n, k] if *k > 0 => Ok((*n, *k)),
            s => Err(shape_err(name, format!("expected [n, k], got {s:?}"))),
        }
    }

    /// Row-wise softmax of `[n, k]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.rows("softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let (m, z) = max_and_sumexp(row);
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::Softmax(x), needs))
    }

    /// Row-wise log-softmax of `[n, k]` logits, stabilized by subtracting the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.rows("log_softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let (m, z) = max_and_sumexp(row);
            let lz = z.ln();
            row.iter_mut().for_each(|v| *v = *v - m - lz);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::LogSoftmax(x), needs))
    }

    /// Selects elements of the flattened `x` at `idx`; output shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[u32]) -> Result<Var, AutodiffError> {
        let xd = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= xd.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {} elements", xd.len())));
        }
        let out = idx.iter().map(|&i| xd[i as usize]).collect();
        let needs = self.needs(&[x]);
        let value = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, needs))
    }

    /// Picks `x[r, cols[r]]` for each row of `x [n, k]`; output shape `[n]`.
    pub fn pick_rows(&mut self, x: Var, cols: &[u32]) -> Result<Var, AutodiffError> {
        let (n, k) = self.rows("pick_rows", x)?;
        if cols.len() != n {
            return Err(shape_err("pick_rows", format!("{} indices for {n} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c as usize >= k) {
            return Err(shape_err("pick_rows", format!("column {bad} out of {k}")));
        }
        let xd = self.value(x).data();
        let out = cols.iter().enumerate().map(|(r, &c)| xd[r * k + c as usize]).collect();
        let needs = self.needs(&[x]);
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::PickRows { x, cols: cols.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Per-channel batch normalization of `x [N,C,...]` with affine `gamma`, `beta` of shape `[C]`.
    /// Train mode normalizes with batch statistics and returns them; eval mode uses the
    /// running statistics in `mode`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>), AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, sp) = nc_spatial(&shape).ok_or_else(|| shape_err("batch_norm", format!("input {shape:?}")))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(shape_err("batch_norm", format!("affine {:?} for {c} channels", self.value(p).shape())));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let xd = self.value(x).data();
        let per_channel = n * sp;
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if per_channel < 2 {
                    return Err(shape_err(
                        "batch_norm",
                        format!("train mode needs >1 value per channel, got {per_channel}"),
                    ));
                }
                let cnt = T::from_usize(per_channel).expect("size");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (i, chunk) in xd.chunks_exact(sp).enumerate() {
                    let ch = i % c;
                    mean[ch] = chunk.iter().fold(mean[ch], |a, &b| a + b);
                }
                mean.iter_mut().for_each(|m| *m = *m / cnt);
                for (i, chunk) in xd.chunks_exact(sp).enumerate() {
                    let ch = i % c;
                    var[ch] = chunk.iter().fold(var[ch], |a, &b| a + (b - mean[ch]) * (b - mean[ch]));
                }
                let unbiased = var.iter().map(|&v| v / T::from_usize(per_channel - 1).expect("size")).collect();
                var.iter_mut().for_each(|v| *v = *v / cnt);
                let stats = BnStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("running stats for {} channels, need {c}", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, chunk) in xd.chunks_exact(sp).enumerate() {
            let ch = i % c;
            for &v in chunk {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: stats.is_some() };
        Ok((self.push(Tensor::new(shape, out)?, op, needs), stats))
    }

    /// Reverse pass from a scalar root. Gradients are returned for leaves and parameters.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, AutodiffError> {
        let rv = self.nodes.get(root.0).ok_or_else(|| AutodiffError::Graph(format!("unknown node {}", root.0)))?;
        if rv.value.numel() != 1 {
            return Err(AutodiffError::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Constant | Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = dy.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, tb.data(), true, T::zero(), &mut da);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, ta.data(), true, g, false, T::zero(), &mut db);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let n = tx.shape()[0];
                let o = tw.shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let mut col = vec![T::zero(); rows * cols];
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); o];
                    for (i, plane) in g.chunks_exact(cols).enumerate() {
                        db[i % o] = plane.iter().fold(db[i % o], |acc, &v| acc + v);
                    }
                    accumulate(grads, b, &[o], db);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * rows];
                    for s in 0..n {
                        im2col(geom, &tx.data()[s * img..(s + 1) * img], &mut col);
                        gemm(o, cols, rows, &g[s * o * cols..(s + 1) * o * cols], false, &col, true, T::one(), &mut dw);
                    }
                    accumulate(grads, *w, tw.shape(), dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); tx.numel()];
                    for s in 0..n {
                        gemm(
                            rows,
                            o,
                            cols,
                            tw.data(),
                            true,
                            &g[s * o * cols..(s + 1) * o * cols],
                            false,
                            T::zero(),
                            &mut col,
                        );
                        col2im_add(geom, &col, &mut dx[s * img..(s + 1) * img]);
                    }
                    accumulate(grads, *x, tx.shape(), dx);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = xd.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let tx = self.value(*x);
                let mut dx = vec![T::zero(); tx.numel()];
                for (&i, &d) in argmax.iter().zip(g) {
                    dx[i as usize] = dx[i as usize] + d;
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let hw = tx.shape()[2] * tx.shape()[3];
                let inv = T::one() / T::from_usize(hw).expect("size");
                let mut dx = Vec::with_capacity(tx.numel());
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, dy.shape(), g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.shape(), g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.shape(), g.iter().map(|&d| -d).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, dy.shape(), g.iter().zip(bd).map(|(&d, &v)| d * v).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.shape(), g.iter().zip(ad).map(|(&d, &v)| d * v).collect());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.shape(), g.to_vec());
                }
                if self.wants(*b) {
                    let (_, c, sp) = nc_spatial(dy.shape()).expect("checked in forward");
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.chunks_exact(sp).enumerate() {
                        db[i % c] = chunk.iter().fold(db[i % c], |acc, &v| acc + v);
                    }
                    accumulate(grads, *b, &[c], db);
                }
            }
            Op::Neg(x) => accumulate(grads, *x, dy.shape(), g.iter().map(|&d| -d).collect()),
            Op::Sigmoid(x) => {
                let s = node.value.data();
                let dx = g.iter().zip(s).map(|(&d, &v)| d * v * (T::one() - v)).collect();
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                accumulate(grads, *x, dy.shape(), g.iter().zip(xd).map(|(&d, &v)| d / v).collect());
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let two = T::one() + T::one();
                accumulate(grads, *x, dy.shape(), g.iter().zip(xd).map(|(&d, &v)| two * v * d).collect());
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, tx.shape(), vec![g[0]; tx.numel()]);
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let d = g[0] / T::from_usize(tx.numel()).expect("size");
                accumulate(grads, *x, tx.shape(), vec![d; tx.numel()]);
            }
            Op::Softmax(x) => {
                let k = dy.shape()[1];
                let s = node.value.data();
                let mut dx = Vec::with_capacity(s.len());
                for (sr, gr) in s.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot = sr.iter().zip(gr).fold(T::zero(), |a, (&p, &d)| a + p * d);
                    dx.extend(sr.iter().zip(gr).map(|(&p, &d)| p * (d - dot)));
                }
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::LogSoftmax(x) => {
                let k = dy.shape()[1];
                let ls = node.value.data();
                let mut dx = Vec::with_capacity(ls.len());
                for (lr, gr) in ls.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let total = gr.iter().fold(T::zero(), |a, &d| a + d);
                    dx.extend(lr.iter().zip(gr).map(|(&l, &d)| d - l.exp() * total));
                }
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Gather { x, idx } => {
                let tx = self.value(*x);
                let mut dx = vec![T::zero(); tx.numel()];
                for (&i, &d) in idx.iter().zip(g) {
                    dx[i as usize] = dx[i as usize] + d;
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::PickRows { x, cols } => {
                let tx = self.value(*x);
                let k = tx.shape()[1];
                let mut dx = vec![T::zero(); tx.numel()];
                for (r, (&c, &d)) in cols.iter().zip(g).enumerate() {
                    dx[r * k + c as usize] = d;
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (_, c, sp) = nc_spatial(dy.shape()).expect("checked in forward");
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, (gc, hc)) in g.chunks_exact(sp).zip(xhat.chunks_exact(sp)).enumerate() {
                    let ch = i % c;
                    for (&d, &h) in gc.iter().zip(hc) {
                        sum_dy[ch] = sum_dy[ch] + d;
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + d * h;
                    }
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &[c], sum_dy_xhat.clone());
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &[c], sum_dy.clone());
                }
                if self.wants(*x) {
                    let gm = self.value(*gamma).data();
                    let m = T::from_usize(g.len() / c).expect("size");
                    let mut dx = Vec::with_capacity(g.len());
                    for (i, (gc, hc)) in g.chunks_exact(sp).zip(xhat.chunks_exact(sp)).enumerate() {
                        let ch = i % c;
                        let scale = gm[ch] * inv_std[ch];
                        for (&d, &h) in gc.iter().zip(hc) {
                            dx.push(if *train {
                                scale * (d - sum_dy[ch] / m - h * sum_dy_xhat[ch] / m)
                            } else {
                                scale * d
                            });
                        }
                    }
                    accumulate(grads, *x, dy.shape(), dx);
                }
            }
            Op::Reshape(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, tx.shape(), g.to_vec());
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn max_and_sumexp<T: Real>(row: &[T]) -> (T, T) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    (m, z)
}
