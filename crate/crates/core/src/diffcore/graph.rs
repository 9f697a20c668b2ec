use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruption used by the gradient-check negative tests.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiply every linear-layer weight gradient by the given factor.
    ScaleLinearWeightGrad(f64),
}

/// Row-broadcast description: `b` matches `a` except along `axis`, where it has size 1.
#[derive(Clone, Copy, Debug)]
struct Broadcast {
    len: usize,
    inner: usize,
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        (i / (self.len * self.inner)) * self.inner + i % self.inner
    }

    fn resolve(a: &[usize], b: &[usize]) -> Option<Option<Broadcast>> {
        if a == b {
            return Some(None);
        }
        if b.len() > a.len() {
            return None;
        }
        let mut padded = vec![1usize; a.len() - b.len()];
        padded.extend_from_slice(b);
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != padded[i]).collect();
        match diff.as_slice() {
            [axis] if padded[*axis] == 1 => Some(Some(Broadcast {
                len: a[*axis],
                inner: a[axis + 1..].iter().product(),
            })),
            // shapes agree after padding, only the rank differs
            [] => Some(None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Mul { a: Var, b: Var, bc: Option<Broadcast> },
    Add { a: Var, b: Var, bc: Option<Broadcast> },
    Sub { a: Var, b: Var },
    Div { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Abs { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Square { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Concat { a: Var, b: Var },
    SliceLast { x: Var, start: usize },
    Reshape { x: Var },
    Bilinear { grid: Var, coords: Var },
    FilterValid { x: Var, dims: [usize; 3], kernel: Vec<T> },
    External { x: Var, grad: Vec<T> },
    WeightedSum { terms: Vec<(Var, T)> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Eagerly evaluated operation record. Nodes are appended in forward order and
/// [`Graph::backward`] walks them in exact reverse.
#[derive(Clone, Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn leading(shape: &[usize]) -> usize {
    if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Learnable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(op, value, rg)
    }

    /// `y = x·W + b` for `x: N×Din`, `W: Din×Dout`, `b: Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[1]] {
            return Err(DiffError::ShapeMismatch {
                op: "linear bias",
                lhs: ws.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        T::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Elementwise `max(x, slope·x)` for `slope ∈ [0, 1)`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > T::zero() { v } else { v * slope })
    }

    /// Row-wise normalization over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let d = last_dim(&xs);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = leading(&xs);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
            rg,
        ))
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Option<Broadcast>), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if let Some(bc) = Broadcast::resolve(sa, sb) {
            return Ok((a, b, bc));
        }
        if let Some(bc) = Broadcast::resolve(sb, sa) {
            return Ok((b, a, bc));
        }
        Err(DiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        bc: Option<Broadcast>,
        f: impl Fn(T, T) -> T,
    ) -> Tensor<T> {
        let av = self.value(a);
        let bd = self.value(b).data();
        let data = match bc {
            None => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(bc) => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[bc.index(i)]))
                .collect(),
        };
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    /// Elementwise product; one operand may broadcast along a single axis.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (a, b, bc) = self.broadcast_pair("hadamard", a, b)?;
        let value = self.binary_broadcast(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b, bc }, value, rg))
    }

    /// Elementwise sum; one operand may broadcast along a single axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (a, b, bc) = self.broadcast_pair("add", a, b)?;
        let value = self.binary_broadcast(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b, bc }, value, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.binary_broadcast(a, b, None, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub { a, b }, value, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        let value = self.binary_broadcast(a, b, None, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div { a, b }, value, rg))
    }

    /// `scale·x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine { x, scale }, |v| v * scale + shift)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square { x }, |v| v * v)
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Op::Mean { x }, Tensor::scalar(s), rg)
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (last_dim(&sa), last_dim(&sb));
        let rows = leading(&sa);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b }, value, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        let d = last_dim(&sx);
        if sx.is_empty() || start + len > d {
            return Err(DiffError::InvalidArgument(format!(
                "slice {start}..{} out of range for shape {sx:?}",
                start + len
            )));
        }
        let rows = leading(&sx);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceLast { x, start }, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    /// Samples `grid: Q×Gh×Gw` at `coords: N×2` (`(x, y)` in grid units), giving `N×Q`.
    ///
    /// Coordinates outside the grid are clamped to the border; the clamped
    /// region has zero coordinate gradient.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> Result<Var, DiffError> {
        let (gs, cs) = (self.shape(grid).to_vec(), self.shape(coords).to_vec());
        if gs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: gs,
                rhs: cs,
            });
        }
        let (q, gh, gw) = (gs[0], gs[1], gs[2]);
        let n = cs[0];
        let gd = self.value(grid).data();
        let cd = self.value(coords).data();
        let plane = gh * gw;
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            let sx = axis_weights(cd[2 * i], gw);
            let sy = axis_weights(cd[2 * i + 1], gh);
            let (w00, w01) = ((T::one() - sy.frac) * (T::one() - sx.frac), (T::one() - sy.frac) * sx.frac);
            let (w10, w11) = (sy.frac * (T::one() - sx.frac), sy.frac * sx.frac);
            let (o00, o01) = (sy.lo * gw + sx.lo, sy.lo * gw + sx.hi);
            let (o10, o11) = (sy.hi * gw + sx.lo, sy.hi * gw + sx.hi);
            let row = &mut out[i * q..(i + 1) * q];
            for (c, slot) in row.iter_mut().enumerate() {
                let p = &gd[c * plane..(c + 1) * plane];
                *slot = w00 * p[o00] + w01 * p[o01] + w10 * p[o10] + w11 * p[o11];
            }
        }
        let value = Tensor::new(vec![n, q], out)?;
        let rg = self.rg(grid) || self.rg(coords);
        Ok(self.push(Op::Bilinear { grid, coords }, value, rg))
    }

    /// Separable "valid" filtering of an `H×W×C` tensor with a 1-D kernel applied
    /// along both spatial axes. Output is `(H−L+1)×(W−L+1)×C`.
    pub fn filter_valid(&mut self, x: Var, kernel: &[T]) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        let l = kernel.len();
        if sx.len() != 3 || l == 0 || sx[0] < l || sx[1] < l {
            return Err(DiffError::InvalidArgument(format!(
                "filter of length {l} does not fit tensor of shape {sx:?}"
            )));
        }
        let dims = [sx[0], sx[1], sx[2]];
        let out = filter_valid_forward(self.value(x).data(), dims, kernel);
        let value = Tensor::new(vec![dims[0] - l + 1, dims[1] - l + 1, dims[2]], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::FilterValid {
                x,
                dims,
                kernel: kernel.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Scalar node whose value and input-gradient come from outside the graph.
    pub fn external(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var, DiffError> {
        if grad.len() != self.value(x).numel() {
            return Err(DiffError::InvalidArgument(format!(
                "external gradient has {} values, input has {}",
                grad.len(),
                self.value(x).numel()
            )));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::External { x, grad }, Tensor::scalar(value), rg))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, DiffError> {
        let mut s = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(DiffError::NonScalar {
                    shape: t.shape().to_vec(),
                });
            }
            s = s + w * t.data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Gradients accumulate into every node's
    /// `grad` buffer; leaves keep theirs for the caller to read.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let lv = &mut self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(DiffError::NonScalar {
                shape: lv.shape().to_vec(),
            });
        }
        lv.set_grad(Some(vec![T::one()]));
        let fault = self.fault;
        for i in (0..=loss.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.value.grad() else { continue };
            backward_node(before, node, g, fault);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisSample<T> {
    lo: usize,
    hi: usize,
    frac: T,
    inside: bool,
}

#[inline]
fn axis_weights<T: Scalar>(c: T, size: usize) -> AxisSample<T> {
    if size <= 1 {
        return AxisSample {
            lo: 0,
            hi: 0,
            frac: T::zero(),
            inside: false,
        };
    }
    let max = T::from_usize(size - 1).unwrap();
    let inside = c >= T::zero() && c <= max;
    let cc = if c.is_nan() { T::zero() } else { c.max(T::zero()).min(max) };
    let lo = cc.floor().to_usize().unwrap_or(0).min(size - 2);
    let frac = cc - T::from_usize(lo).unwrap();
    AxisSample {
        lo,
        hi: lo + 1,
        frac,
        inside,
    }
}

fn filter_valid_forward<T: Scalar>(x: &[T], [h, w, c]: [usize; 3], k: &[T]) -> Vec<T> {
    let l = k.len();
    let (oh, ow) = (h - l + 1, w - l + 1);
    let mut tmp = vec![T::zero(); h * ow * c];
    for y in 0..h {
        for xo in 0..ow {
            for ch in 0..c {
                let mut s = T::zero();
                for (j, &kj) in k.iter().enumerate() {
                    s = s + kj * x[(y * w + xo + j) * c + ch];
                }
                tmp[(y * ow + xo) * c + ch] = s;
            }
        }
    }
    let mut out = vec![T::zero(); oh * ow * c];
    for yo in 0..oh {
        for (i, &ki) in k.iter().enumerate() {
            let src = &tmp[(yo + i) * ow * c..(yo + i + 1) * ow * c];
            let dst = &mut out[yo * ow * c..(yo + 1) * ow * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + ki * s;
            }
        }
    }
    out
}

fn filter_valid_adjoint<T: Scalar>(g: &[T], [h, w, c]: [usize; 3], k: &[T]) -> Vec<T> {
    let l = k.len();
    let (oh, ow) = (h - l + 1, w - l + 1);
    let mut dtmp = vec![T::zero(); h * ow * c];
    for yo in 0..oh {
        for (i, &ki) in k.iter().enumerate() {
            let src = &g[yo * ow * c..(yo + 1) * ow * c];
            let dst = &mut dtmp[(yo + i) * ow * c..(yo + i + 1) * ow * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + ki * s;
            }
        }
    }
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xo in 0..ow {
            for ch in 0..c {
                let gv = dtmp[(y * ow + xo) * c + ch];
                for (j, &kj) in k.iter().enumerate() {
                    let idx = (y * w + xo + j) * c + ch;
                    dx[idx] = dx[idx] + kj * gv;
                }
            }
        }
    }
    dx
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, contrib: &[T]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = node.value.grad_mut_or_zero();
    for (b, &c) in buf.iter_mut().zip(contrib) {
        *b = *b + c;
    }
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T], fault: Option<Fault>) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (n, din) = (nodes[x.0].value.dim(0), nodes[x.0].value.dim(1));
            let dout = nodes[w.0].value.dim(1);
            if needs(nodes, *x) {
                let mut dx = vec![T::zero(); n * din];
                T::gemm(n, dout, din, g, false, nodes[w.0].value.data(), true, T::zero(), &mut dx);
                accumulate(nodes, *x, &dx);
            }
            if needs(nodes, *w) {
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(din, n, dout, nodes[x.0].value.data(), true, g, false, T::zero(), &mut dw);
                if let Some(Fault::ScaleLinearWeightGrad(f)) = fault {
                    let f = T::lit(f);
                    dw.iter_mut().for_each(|v| *v = *v * f);
                }
                accumulate(nodes, *w, &dw);
            }
            if needs(nodes, *b) {
                let mut db = vec![T::zero(); dout];
                for row in g.chunks_exact(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                accumulate(nodes, *b, &db);
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xd = nodes[x.0].value.data();
            let dx: Vec<T> = xd
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                .collect();
            accumulate(nodes, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[gamma.0].value.numel();
            let rows = rstd.len();
            let gm = nodes[gamma.0].value.data().to_vec();
            let dt = T::from_usize(d).unwrap();
            if needs(nodes, *x) {
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * hr[j];
                    }
                    m1 = m1 / dt;
                    m2 = m2 / dt;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                    }
                }
                accumulate(nodes, *x, &dx);
            }
            let mut dg = vec![T::zero(); d];
            let mut dbt = vec![T::zero(); d];
            for r in 0..rows {
                for j in 0..d {
                    dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                    dbt[j] = dbt[j] + g[r * d + j];
                }
            }
            accumulate(nodes, *gamma, &dg);
            accumulate(nodes, *beta, &dbt);
        }
        Op::Mul { a, b, bc } => {
            let ad = nodes[a.0].value.data();
            let bd = nodes[b.0].value.data();
            let bi = |i: usize| bc.map_or(i, |bc| bc.index(i));
            let da: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * bd[bi(i)]).collect();
            let mut db = vec![T::zero(); bd.len()];
            for (i, &gv) in g.iter().enumerate() {
                db[bi(i)] = db[bi(i)] + gv * ad[i];
            }
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Add { a, b, bc } => {
            accumulate(nodes, *a, g);
            match bc {
                None => accumulate(nodes, *b, g),
                Some(bc) => {
                    let mut db = vec![T::zero(); nodes[b.0].value.numel()];
                    for (i, &gv) in g.iter().enumerate() {
                        db[bc.index(i)] = db[bc.index(i)] + gv;
                    }
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, *a, g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            accumulate(nodes, *b, &neg);
        }
        Op::Div { a, b } => {
            let bd = nodes[b.0].value.data();
            let da: Vec<T> = g.iter().zip(bd).map(|(&gv, &bv)| gv / bv).collect();
            let db: Vec<T> = g
                .iter()
                .zip(bd)
                .zip(y)
                .map(|((&gv, &bv), &yv)| -gv * yv / bv)
                .collect();
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Affine { x, scale } => {
            let dx: Vec<T> = g.iter().map(|&v| v * *scale).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Abs { x } => {
            let xd = nodes[x.0].value.data();
            let dx: Vec<T> = xd
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Tanh { x } => {
            let dx: Vec<T> = y.iter().zip(g).map(|(&t, &gv)| gv * (T::one() - t * t)).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Sigmoid { x } => {
            let dx: Vec<T> = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Square { x } => {
            let xd = nodes[x.0].value.data();
            let two = T::lit(2.0);
            let dx: Vec<T> = xd.iter().zip(g).map(|(&v, &gv)| two * v * gv).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Sum { x } => {
            let dx = vec![g[0]; nodes[x.0].value.numel()];
            accumulate(nodes, *x, &dx);
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel();
            let dx = vec![g[0] / T::from_usize(n.max(1)).unwrap(); n];
            accumulate(nodes, *x, &dx);
        }
        Op::Concat { a, b } => {
            let da_w = last_dim(nodes[a.0].value.shape());
            let db_w = last_dim(nodes[b.0].value.shape());
            let width = da_w + db_w;
            let rows = if width == 0 { 0 } else { g.len() / width };
            let mut da = Vec::with_capacity(rows * da_w);
            let mut db = Vec::with_capacity(rows * db_w);
            for r in 0..rows {
                da.extend_from_slice(&g[r * width..r * width + da_w]);
                db.extend_from_slice(&g[r * width + da_w..(r + 1) * width]);
            }
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::SliceLast { x, start } => {
            let d = last_dim(nodes[x.0].value.shape());
            let len = last_dim(node.value.shape());
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            if len > 0 {
                for (r, row) in g.chunks_exact(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Reshape { x } => accumulate(nodes, *x, g),
        Op::Bilinear { grid, coords } => {
            let gs = nodes[grid.0].value.shape().to_vec();
            let (q, gh, gw) = (gs[0], gs[1], gs[2]);
            let plane = gh * gw;
            let n = nodes[coords.0].value.dim(0);
            let cd = nodes[coords.0].value.data();
            let gd = nodes[grid.0].value.data();
            let want_grid = needs(nodes, *grid);
            let want_coords = needs(nodes, *coords);
            let mut dgrid = if want_grid { vec![T::zero(); q * plane] } else { Vec::new() };
            let mut dcoords = vec![T::zero(); if want_coords { n * 2 } else { 0 }];
            for i in 0..n {
                let sx = axis_weights(cd[2 * i], gw);
                let sy = axis_weights(cd[2 * i + 1], gh);
                let (o00, o01) = (sy.lo * gw + sx.lo, sy.lo * gw + sx.hi);
                let (o10, o11) = (sy.hi * gw + sx.lo, sy.hi * gw + sx.hi);
                let gr = &g[i * q..(i + 1) * q];
                if want_grid {
                    let (w00, w01) = ((T::one() - sy.frac) * (T::one() - sx.frac), (T::one() - sy.frac) * sx.frac);
                    let (w10, w11) = (sy.frac * (T::one() - sx.frac), sy.frac * sx.frac);
                    for (c, &gv) in gr.iter().enumerate() {
                        let p = &mut dgrid[c * plane..(c + 1) * plane];
                        p[o00] = p[o00] + gv * w00;
                        p[o01] = p[o01] + gv * w01;
                        p[o10] = p[o10] + gv * w10;
                        p[o11] = p[o11] + gv * w11;
                    }
                }
                if want_coords {
                    let mut dxs = T::zero();
                    let mut dys = T::zero();
                    for (c, &gv) in gr.iter().enumerate() {
                        let p = &gd[c * plane..(c + 1) * plane];
                        let (v00, v01, v10, v11) = (p[o00], p[o01], p[o10], p[o11]);
                        dxs = dxs + gv * ((T::one() - sy.frac) * (v01 - v00) + sy.frac * (v11 - v10));
                        dys = dys + gv * ((T::one() - sx.frac) * (v10 - v00) + sx.frac * (v11 - v01));
                    }
                    if sx.inside {
                        dcoords[2 * i] = dxs;
                    }
                    if sy.inside {
                        dcoords[2 * i + 1] = dys;
                    }
                }
            }
            if want_grid {
                accumulate(nodes, *grid, &dgrid);
            }
            if want_coords {
                accumulate(nodes, *coords, &dcoords);
            }
        }
        Op::FilterValid { x, dims, kernel } => {
            let dx = filter_valid_adjoint(g, *dims, kernel);
            accumulate(nodes, *x, &dx);
        }
        Op::External { x, grad } => {
            let dx: Vec<T> = grad.iter().map(|&v| v * g[0]).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::WeightedSum { terms } => {
            for &(v, w) in terms {
                accumulate(nodes, v, &[g[0] * w]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w0 = g.input(t(&[2, 2], &[0.0; 4]));
        let b1 = g.input(t(&[2], &[3.0, 4.0]));
        let y = g.linear(x, w0, b1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[4, 3]));
        let w = g.input(Tensor::zeros(&[2, 5]));
        let b = g.input(Tensor::zeros(&[5]));
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[4, 3]") && err.contains("[2, 5]"), "{err}");
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);
        let x = g.input(t(&[2], &[-5.0, 5.0]));
        let y = g.leaky_relu(x, 0.0);
        assert_eq!(g.value(y).data(), &[0.0, 5.0]);
    }

    #[test]
    fn layer_norm_constant_and_normalized_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let gm = g.input(t(&[3], &[1.0; 3]));
        let bt = g.input(t(&[3], &[0.0; 3]));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = g.input(t(&[1, 2], &[-1.0, 1.0]));
        let gm = g.input(t(&[2], &[1.0; 2]));
        let bt = g.input(t(&[2], &[0.0; 2]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip([-1.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn hadamard_values_and_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[2.0, 3.0]));
        let b = g.input(t(&[2], &[0.5, 2.0]));
        let y = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 6.0]);

        let m = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let ones = g.input(t(&[3], &[1.0; 3]));
        let y = g.hadamard(m, ones).unwrap();
        assert_eq!(g.value(y).data(), g.value(m).data());

        let col = g.input(t(&[2, 1], &[2.0, 10.0]));
        let y = g.hadamard(col, m).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);

        let bad = g.input(t(&[2], &[1.0, 1.0]));
        assert!(g.hadamard(m, bad).is_err());
    }

    #[test]
    fn bilinear_exact_at_integers_and_midpoint() {
        let mut g = Graph::<f64>::new();
        let grid = g.input(t(&[1, 3, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let coords = g.input(t(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 0.0, 2.0]));
        let y = g.bilinear_sample(grid, coords).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 8.0, 6.0]);

        let ramp = g.input(t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let c = g.input(t(&[1, 2], &[0.5, 0.5]));
        let y = g.bilinear_sample(ramp, c).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);

        let far = g.input(t(&[2, 2], &[-3.0, 0.0, 9.0, 9.0]));
        let y = g.bilinear_sample(ramp, far).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[1.0]));
        let b = g.input(t(&[2], &[2.0, 3.0]));
        let y = g.concat(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = g.input(Tensor::zeros(&[2, 0]));
        let y = g.concat(a, e).unwrap();
        assert_eq!(g.value(y), g.value(a));
        let bad = g.input(Tensor::zeros(&[3, 1]));
        assert!(g.concat(a, bad).is_err());
    }

    #[test]
    fn reductions_and_elementwise() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.reduce_mean(x);
        assert_eq!(g.scalar_value(m), 2.0);
        let s = g.reduce_sum(x);
        assert_eq!(g.scalar_value(s), 6.0);
        let z = g.input(t(&[1], &[0.0]));
        let th = g.tanh(z);
        assert_eq!(g.scalar_value(th), 0.0);
        let sg = g.sigmoid(z);
        assert_eq!(g.scalar_value(sg), 0.5);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(DiffError::NonScalar { .. })));
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let build = |g: &mut Graph<f64>, x: Var| {
            let a = g.square(x);
            let a = g.reduce_sum(a);
            let b = g.tanh(x);
            let b = g.reduce_mean(b);
            (a, b)
        };
        let xv = t(&[3], &[0.3, -1.2, 2.0]);
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let (a, b) = build(&mut g, x);
        let s = g.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
        g.backward(s).unwrap();
        let joint = g.grad(x).unwrap().to_vec();

        let mut parts = vec![0.0; 3];
        for pick in 0..2 {
            let mut g = Graph::new();
            let x = g.param(xv.clone());
            let (a, b) = build(&mut g, x);
            g.backward(if pick == 0 { a } else { b }).unwrap();
            for (p, v) in parts.iter_mut().zip(g.grad(x).unwrap()) {
                *p += v;
            }
        }
        for (j, p) in joint.iter().zip(&parts) {
            assert!((j - p).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_valid_box_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let y = g.filter_valid(x, &[1.0, 1.0]).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.param(Tensor::from_f64(&[2, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
            let w = g.param(Tensor::from_f64(&[3, 2], &[0.7, -0.1, 0.2, 0.3, -0.5, 0.9]).unwrap());
            let b = g.param(Tensor::from_f64(&[2], &[0.01, -0.02]).unwrap());
            let y = g.linear(x, w, b).unwrap();
            let y = g.tanh(y);
            let l = g.reduce_mean(y);
            g.backward(l).unwrap();
            (g.scalar_value(l).to_bits(), g.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
