use super::{gemm, shape_err, NnError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, centered: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Mse { pred: Var, target: Vec<T> },
    WeightedSum(Vec<(T, Var)>),
    ScaleGradient { x: Var, factor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(), NnError> {
    if cfg!(debug_assertions) && !t.all_finite() {
        return Err(NnError::NonFinite(op));
    }
    Ok(())
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant data; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Snapshot of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// `y = x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); batch * out];
        let bias = &self.value(b).data;
        for row in y.chunks_mut(out) {
            row.copy_from_slice(bias);
        }
        gemm(batch, inp, out, T::one(), (&self.value(x).data, inp, 1), (&self.value(w).data, 1, inp), T::one(), &mut y, out, 1);
        let t = Tensor { shape: vec![batch, out], data: y };
        check_finite(&t, "linear")?;
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]` plus `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || ws[2] != ws[3] || bs[0] != ws[0] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}, stride {stride}")));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (kk, p) = (geom.patch(), geom.positions());
        let in_len = geom.in_c * geom.in_h * geom.in_w;
        let out_len = geom.out_c * p;
        let mut cols = vec![T::zero(); geom.batch * kk * p];
        let mut y = vec![T::zero(); geom.batch * out_len];
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        for n in 0..geom.batch {
            let col = &mut cols[n * kk * p..(n + 1) * kk * p];
            im2col(&xv[n * in_len..(n + 1) * in_len], &geom, col);
            let out = &mut y[n * out_len..(n + 1) * out_len];
            for (o, plane) in out.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = bv[o]);
            }
            gemm(geom.out_c, kk, p, T::one(), (wv, kk, 1), (col, p, 1), T::one(), out, p, 1);
        }
        let t = Tensor { shape: vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], data: y };
        check_finite(&t, "conv2d")?;
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Per-feature normalisation of `x: [B, F]`. In train mode the batch
    /// statistics are used and the running statistics in `store` are updated.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &mut ParamStore<T>,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err("batch_norm", format!("x {xs:?}, gamma {:?}", self.shape(gamma))));
        }
        let (batch, f) = (xs[0], xs[1]);
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let rg = self.node(x).requires_grad || self.node(gamma).requires_grad || self.node(beta).requires_grad;
        let mut y = vec![T::zero(); batch * f];
        match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(NnError::BatchTooSmall(batch));
                }
                let nb = T::from_f64(batch as f64);
                let mut mean = vec![T::zero(); f];
                let mut var = vec![T::zero(); f];
                for row in xv.chunks(f) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nb);
                for row in xv.chunks(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nb);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); batch * f];
                for (i, (xr, hr)) in xv.chunks(f).zip(xhat.chunks_mut(f)).enumerate() {
                    for j in 0..f {
                        hr[j] = (xr[j] - mean[j]) * inv_std[j];
                        y[i * f + j] = gv[j] * hr[j] + bv[j];
                    }
                }
                let unbias = nb / (nb - T::one());
                let rm = &mut store.get_mut(running.0).value.data;
                for j in 0..f {
                    rm[j] = (T::one() - momentum) * rm[j] + momentum * mean[j];
                }
                let rv = &mut store.get_mut(running.1).value.data;
                for j in 0..f {
                    rv[j] = (T::one() - momentum) * rv[j] + momentum * var[j] * unbias;
                }
                let t = Tensor { shape: xs, data: y };
                check_finite(&t, "batch_norm")?;
                Ok(self.push(t, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg))
            }
            Mode::Eval => {
                let rm = &store.get(running.0).value.data;
                let rv = &store.get(running.1).value.data;
                let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut centered = vec![T::zero(); batch * f];
                for (i, xr) in xv.chunks(f).enumerate() {
                    for j in 0..f {
                        let c = xr[j] - rm[j];
                        centered[i * f + j] = c;
                        y[i * f + j] = gv[j] * c * inv_std[j] + bv[j];
                    }
                }
                let t = Tensor { shape: xs, data: y };
                check_finite(&t, "batch_norm")?;
                Ok(self.push(t, Op::BatchNormEval { x, gamma, beta, centered, inv_std }, rg))
            }
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| f(v)).collect() };
        let rg = self.node(x).requires_grad;
        self.push(t, op, rg)
    }

    /// Hash of the active/inactive pattern of every ReLU input on the tape.
    pub fn relu_signature(&self) -> u64 {
        let mut h = twox_hash::XxHash64::with_seed(0);
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                let bits: Vec<u8> = self.nodes[x.0].value.data.iter().map(|&v| u8::from(v > T::zero())).collect();
                std::hash::Hasher::write(&mut h, &bits);
            }
        }
        std::hash::Hasher::finish(&h)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Concatenates `[B, F_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let batch = parts.first().map(|&p| self.shape(p)[0]).ok_or_else(|| shape_err("concat", "no inputs"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != batch {
                return Err(shape_err("concat", format!("part shape {s:?}, batch {batch}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(batch * total);
        for i in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(Tensor { shape: vec![batch, total], data: y }, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let t = Tensor { shape, data: self.value(x).data.clone() };
        let rg = self.node(x).requires_grad;
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NnError> {
        if self.shape(pred) != target.shape.as_slice() {
            return Err(shape_err("mse", format!("pred {:?}, target {:?}", self.shape(pred), target.shape)));
        }
        let pv = &self.value(pred).data;
        let n = T::from_f64(pv.len() as f64);
        let s: T = pv.iter().zip(&target.data).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let rg = self.node(pred).requires_grad;
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target: target.data.clone() }, rg))
    }

    /// `sum_i c_i x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var, NnError> {
        let shape = terms.first().map(|&(_, v)| self.shape(v).to_vec()).ok_or_else(|| shape_err("weighted_sum", "no terms"))?;
        let mut y = vec![T::zero(); shape.iter().product()];
        for &(c, v) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err("weighted_sum", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            for (o, &x) in y.iter_mut().zip(&self.value(v).data) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(_, v)| self.node(v).requires_grad);
        Ok(self.push(Tensor { shape, data: y }, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn scale_gradient(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).clone();
        let rg = self.node(x).requires_grad;
        self.push(t, Op::ScaleGradient { x, factor }, rg)
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.node(v).requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, &b) in store.get_mut(*id).grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, inp) = (xs[0], xs[1]);
                let out = self.shape(*w)[0];
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                self.accumulate(grads, *x, |gx| {
                    gemm(batch, out, inp, T::one(), (g, out, 1), (wv, inp, 1), T::one(), gx, inp, 1);
                });
                self.accumulate(grads, *w, |gw| {
                    gemm(out, batch, inp, T::one(), (g, 1, out), (xv, inp, 1), T::one(), gw, inp, 1);
                });
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (kk, p) = (geom.patch(), geom.positions());
                let out_len = geom.out_c * p;
                let in_len = geom.in_c * geom.in_h * geom.in_w;
                let wv = &self.value(*w).data;
                self.accumulate(grads, *w, |gw| {
                    for n in 0..geom.batch {
                        let gy = &g[n * out_len..(n + 1) * out_len];
                        let col = &cols[n * kk * p..(n + 1) * kk * p];
                        gemm(geom.out_c, p, kk, T::one(), (gy, p, 1), (col, 1, p), T::one(), gw, kk, 1);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for n in 0..geom.batch {
                        for (o, plane) in g[n * out_len..(n + 1) * out_len].chunks(p).enumerate() {
                            gb[o] += plane.iter().copied().sum::<T>();
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dcols = vec![T::zero(); kk * p];
                    for n in 0..geom.batch {
                        let gy = &g[n * out_len..(n + 1) * out_len];
                        gemm(kk, geom.out_c, p, T::one(), (wv, 1, kk), (gy, p, 1), T::zero(), &mut dcols, p, 1);
                        col2im_add(&dcols, geom, &mut gx[n * in_len..(n + 1) * in_len]);
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let f = inv_std.len();
                let batch = g.len() / f;
                let gv = &self.value(*gamma).data;
                let mut sum_g = vec![T::zero(); f];
                let mut sum_gh = vec![T::zero(); f];
                for (gr, hr) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        sum_g[j] += gr[j];
                        sum_gh[j] += gr[j] * hr[j];
                    }
                }
                self.accumulate(grads, *gamma, |gg| gg.iter_mut().zip(&sum_gh).for_each(|(a, &b)| *a += b));
                self.accumulate(grads, *beta, |gb| gb.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b));
                self.accumulate(grads, *x, |gx| {
                    let nb = T::from_f64(batch as f64);
                    for (i, (gr, hr)) in g.chunks(f).zip(xhat.chunks(f)).enumerate() {
                        for j in 0..f {
                            gx[i * f + j] += gv[j] * inv_std[j] / nb * (nb * gr[j] - sum_g[j] - hr[j] * sum_gh[j]);
                        }
                    }
                });
            }
            Op::BatchNormEval { x, gamma, beta, centered, inv_std } => {
                let f = inv_std.len();
                let gv = &self.value(*gamma).data;
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, cr) in g.chunks(f).zip(centered.chunks(f)) {
                        for j in 0..f {
                            gg[j] += gr[j] * cr[j] * inv_std[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(f) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (i, gr) in g.chunks(f).enumerate() {
                        for j in 0..f {
                            gx[i * f + j] += gr[j] * gv[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |gx| {
                    for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((a, &gi), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += gi * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((a, &gi), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += gi * y * (T::one() - y);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for (i, row) in gp.chunks_mut(w).enumerate() {
                            for (a, &b) in row.iter_mut().zip(&g[i * total + offset..i * total + offset + w]) {
                                *a += b;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
            }
            Op::Mse { pred, target } => {
                let pv = &self.value(*pred).data;
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(pv.len() as f64);
                self.accumulate(grads, *pred, |gp| {
                    for ((a, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *a += scale * (p - t);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(c, v) in terms {
                    self.accumulate(grads, v, |gv| gv.iter_mut().zip(g).for_each(|(a, &b)| *a += c * b));
                }
            }
            Op::ScaleGradient { x, factor } => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += *factor * b));
            }
        }
    }
}
