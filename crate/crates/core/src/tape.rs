//! Reverse-mode automatic differentiation over a computation tape.
//!
//! Every operation is executed eagerly and records enough on the tape to
//! replay adjoints in reverse. Handles ([`Var`]) are indices into the tape;
//! tensors live inside it. A tape is built per forward pass: parameters are
//! registered as named leaves each time, and after [`Tape::backward`] their
//! gradients are read back by name with [`Tape::named_grads`].
//!
//! Gradients accumulate: calling `backward` twice on the same tape doubles
//! every leaf gradient. Training loops build a fresh tape per step, which is
//! the idiomatic way to "zero" gradients of intermediate nodes.

use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor, TensorError};
use indexmap::IndexMap;

/// Variance-stabilizing epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, kernels: Var, stride: usize, padding: usize },
    AddSame { a: Var, b: Var },
    AddLastAxisBias { a: Var, bias: Var },
    AddChannelBias { a: Var, bias: Var },
    MulSame { a: Var, b: Var },
    ScaleConst { a: Var, c: T },
    ScaleByVar { a: Var, s: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Arctan { a: Var },
    Sqrt { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, scale: Var, shift: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    Reshape { a: Var },
    Transpose2d { a: Var },
    GatherRows { a: Var, indices: Vec<usize> },
    MeanAll { a: Var },
    SumAll { a: Var },
    Gap2d { a: Var },
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    name: Option<String>,
}

/// Computation tape: ordered record of executed operations with the handles
/// needed to replay adjoints.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, name: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf; gradient participation follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a non-differentiable constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named parameter leaf (always differentiable). The same
    /// name may be registered more than once per tape; [`Tape::named_grads`]
    /// sums the contributions.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let mut copy = t.clone();
        copy.requires_grad = true;
        copy.grad = None;
        let v = self.push(copy, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` target with respect to `v`, if it was
    /// computed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Sums leaf gradients per registered parameter name, in registration
    /// order. Parameters that received no gradient are reported as zeros.
    pub fn named_grads(&self) -> IndexMap<String, Vec<T>> {
        let mut out: IndexMap<String, Vec<T>> = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.name else { continue };
            let slot = out
                .entry(name.clone())
                .or_insert_with(|| vec![T::ZERO; node.value.numel()]);
            if let Some(g) = &self.grads[i] {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += *gi;
                }
            }
        }
        out
    }

    // ---- forward operations -------------------------------------------------

    /// 2-D matrix product: `a` is m×k, `b` is k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape(format!(
                "matmul expects m x k by k x n, got {} by {}",
                fmt_shape(sa),
                fmt_shape(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, requires_grad: needs, grad: None },
            Op::MatMul { a, b },
            needs,
        ))
    }

    /// 2-D cross-correlation with zero padding. Input is C_in×H×W, kernels
    /// are C_out×C_in×kh×kw; realizes both the 1x1 and 3x3 adapter
    /// convolutions.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (si, sk) = (self.shape(input), self.shape(kernels));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(TensorError::Shape(format!(
                "conv2d expects C_in x H x W with C_out x C_in x kh x kw, got {} with {}",
                fmt_shape(si),
                fmt_shape(sk)
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Shape(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let xs = self.data(input);
        let ks = self.data(kernels);
        let mut out = vec![T::ZERO; c_out * oh * ow];
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xs[(ic * h + iy as usize) * w + ix as usize]
                                    * ks[((oc * c_in + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernels);
        Ok(self.push(
            Tensor { shape: vec![c_out, oh, ow], data: out, requires_grad: needs, grad: None },
            Op::Conv2d { input, kernels, stride, padding },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "add expects equal shapes, got {} and {}",
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b))
            )));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::AddSame { a, b },
            needs,
        ))
    }

    /// Adds a vector along the last axis of `a` (the linear-layer bias).
    pub fn add_last_axis_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::Shape(format!(
                "bias of shape {} does not match last axis of {}",
                fmt_shape(sb),
                fmt_shape(sa)
            )));
        }
        let n = sb[0];
        let bs = self.data(bias).to_vec();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bs[i % n])
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::AddLastAxisBias { a, bias },
            needs,
        ))
    }

    /// Adds a per-channel bias to a C×H×W map.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 3 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(TensorError::Shape(format!(
                "channel bias of shape {} does not match map {}",
                fmt_shape(sb),
                fmt_shape(sa)
            )));
        }
        let hw = sa[1] * sa[2];
        let bs = self.data(bias).to_vec();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bs[i / hw])
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::AddChannelBias { a, bias },
            needs,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "mul expects equal shapes, got {} and {}",
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b))
            )));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::MulSame { a, b },
            needs,
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.data(a).iter().map(|x| *x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::ScaleConst { a, c },
            needs,
        )
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape(format!(
                "scale_by expects a single-element scaler, got {}",
                fmt_shape(self.shape(s))
            )));
        }
        let sv = self.data(s)[0];
        let data: Vec<T> = self.data(a).iter().map(|x| *x * sv).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::ScaleByVar { a, s },
            needs,
        ))
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.data(a).iter().map(|x| gelu_forward(*x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: needs, grad: None }, Op::Gelu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.data(a).iter().map(|x| sigmoid_forward(*x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::Sigmoid { a },
            needs,
        )
    }

    pub fn arctan(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.data(a).iter().map(|x| x.atan()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: needs, grad: None }, Op::Arctan { a }, needs)
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.data(a).iter().any(|x| *x < T::ZERO) {
            return Err(TensorError::Numeric("sqrt of a negative element".into()));
        }
        let data: Vec<T> = self.data(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data, requires_grad: needs, grad: None }, Op::Sqrt { a }, needs))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidArgument(format!(
                "softmax axis {} out of range for shape {}",
                axis,
                fmt_shape(&sa)
            )));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let xs = self.data(a);
        let mut data = vec![T::ZERO; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = xs[idx(0)];
                for j in 1..len {
                    m = m.max(xs[idx(j)]);
                }
                let mut z = T::ZERO;
                for j in 0..len {
                    let e = (xs[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[idx(j)] /= z;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape: sa, data, requires_grad: needs, grad: None },
            Op::Softmax { a, axis },
            needs,
        ))
    }

    /// Layer normalization over the last axis with learnable scale/shift and
    /// epsilon 1e-6 inside the variance square root.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| {
            TensorError::Shape("layer_norm requires at least one axis".into())
        })?;
        if self.shape(scale) != [d] || self.shape(shift) != [d] {
            return Err(TensorError::Shape(format!(
                "layer_norm over width {} got scale {} and shift {}",
                d,
                fmt_shape(self.shape(scale)),
                fmt_shape(self.shape(shift))
            )));
        }
        let rows = self.value(x).numel() / d;
        let xs = self.data(x);
        let gs = self.data(scale);
        let bs = self.data(shift);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let mut data = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for v in row {
                mean += *v;
            }
            mean /= dn;
            let mut var = T::ZERO;
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = T::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * gs[j] + bs[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            Tensor { shape: sx, data, requires_grad: needs, grad: None },
            Op::LayerNorm { x, scale, shift },
            needs,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument(format!(
                "concat axis {} out of range for shape {}",
                axis,
                fmt_shape(&first)
            )));
        }
        let mut total = 0usize;
        for p in parts {
            let sp = self.shape(*p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::Shape(format!(
                    "concat along axis {} got incompatible shapes {} and {}",
                    axis,
                    fmt_shape(&first),
                    fmt_shape(sp)
                )));
            }
            total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![T::ZERO; shape.iter().product()];
        let mut offset = 0usize;
        for p in parts {
            let len_p = self.shape(*p)[axis];
            let src = self.data(*p);
            for o in 0..outer {
                let dst_base = (o * total + offset) * inner;
                let src_base = o * len_p * inner;
                data[dst_base..dst_base + len_p * inner]
                    .copy_from_slice(&src[src_base..src_base + len_p * inner]);
            }
            offset += len_p;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::Concat { parts: parts.to_vec(), axis },
            needs,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(TensorError::Shape(format!(
                "slice [{start}, {}) along axis {axis} out of range for {}",
                start + len,
                fmt_shape(&sa)
            )));
        }
        let (outer, full, inner) = axis_split(&sa, axis);
        let src = self.data(a);
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape, data, requires_grad: needs, grad: None },
            Op::Slice { a, axis, start, len },
            needs,
        ))
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::Shape(format!(
                "reshape {} -> {} changes element count",
                fmt_shape(self.shape(a)),
                fmt_shape(shape)
            )));
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape: shape.to_vec(), data, requires_grad: needs, grad: None },
            Op::Reshape { a },
            needs,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::Shape(format!(
                "transpose expects a 2-D tensor, got {}",
                fmt_shape(sa)
            )));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape: vec![n, m], data, requires_grad: needs, grad: None },
            Op::Transpose2d { a },
            needs,
        ))
    }

    /// Gathers rows of a 2-D tensor; duplicate indices are allowed (their
    /// adjoints accumulate into the shared source row).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::Shape(format!(
                "gather_rows expects a 2-D tensor, got {}",
                fmt_shape(sa)
            )));
        }
        let (m, n) = (sa[0], sa[1]);
        if let Some(bad) = indices.iter().find(|i| **i >= m) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let src = self.data(a);
        let mut data = vec![T::ZERO; indices.len() * n];
        for (r, idx) in indices.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&src[idx * n..(idx + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape: vec![indices.len(), n], data, requires_grad: needs, grad: None },
            Op::GatherRows { a, indices: indices.to_vec() },
            needs,
        ))
    }

    /// Mean over all elements, as a single-element tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let mut acc = T::ZERO;
        for v in self.data(a) {
            acc += *v;
        }
        let needs = self.needs(a);
        self.push(
            Tensor { shape: vec![1], data: vec![acc / n], requires_grad: needs, grad: None },
            Op::MeanAll { a },
            needs,
        )
    }

    /// Sum over all elements, as a single-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for v in self.data(a) {
            acc += *v;
        }
        let needs = self.needs(a);
        self.push(
            Tensor { shape: vec![1], data: vec![acc], requires_grad: needs, grad: None },
            Op::SumAll { a },
            needs,
        )
    }

    /// Global average pooling: C×H×W → per-channel means of length C.
    pub fn gap2d(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 3 {
            return Err(TensorError::Shape(format!(
                "gap2d expects C x H x W, got {}",
                fmt_shape(sa)
            )));
        }
        let (c, hw) = (sa[0], sa[1] * sa[2]);
        let src = self.data(a);
        let denom = T::from_f64(hw as f64);
        let mut data = vec![T::ZERO; c];
        for ch in 0..c {
            let mut acc = T::ZERO;
            for v in &src[ch * hw..(ch + 1) * hw] {
                acc += *v;
            }
            data[ch] = acc / denom;
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape: vec![c], data, requires_grad: needs, grad: None },
            Op::Gap2d { a },
            needs,
        ))
    }

    /// Mean squared error over all elements of equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::Shape(format!(
                "mse expects equal shapes, got {} and {}",
                fmt_shape(self.shape(pred)),
                fmt_shape(self.shape(target))
            )));
        }
        let n = T::from_f64(self.value(pred).numel() as f64);
        let mut acc = T::ZERO;
        for (p, t) in self.data(pred).iter().zip(self.data(target)) {
            let d = *p - *t;
            acc += d * d;
        }
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![acc / n], requires_grad: needs, grad: None },
            Op::Mse { pred, target },
            needs,
        ))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    /// `logits` is m×C, `labels` has length m.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let sl = self.shape(logits);
        if sl.len() != 2 {
            return Err(TensorError::Shape(format!(
                "cross_entropy expects m x C logits, got {}",
                fmt_shape(sl)
            )));
        }
        let (m, c) = (sl[0], sl[1]);
        if labels.len() != m {
            return Err(TensorError::Shape(format!(
                "cross_entropy got {} labels for {} logit rows",
                labels.len(),
                m
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(TensorError::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let xs = self.data(logits);
        let mut acc = T::ZERO;
        for (r, label) in labels.iter().enumerate() {
            let row = &xs[r * c..(r + 1) * c];
            let mut mx = row[0];
            for v in row {
                mx = mx.max(*v);
            }
            let mut z = T::ZERO;
            for v in row {
                z += (*v - mx).exp();
            }
            acc += z.ln() + mx - row[*label];
        }
        let loss = acc / T::from_f64(m as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![loss], requires_grad: needs, grad: None },
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            needs,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a single-element `loss`. Leaf gradients accumulate
    /// on the tape across repeated calls; within the calling code they are
    /// read out with [`Tape::grad`] or [`Tape::named_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward target must be a single element, got {}",
                fmt_shape(self.shape(loss))
            )));
        }
        // Leaf gradients persist and accumulate across calls; interior
        // adjoints are per-pass scratch and must start clean.
        for i in 0..self.grads.len() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        self.add_grad(loss.0, &[T::ONE]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backward_node(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, idx: usize, delta: &[T]) {
        let slot = self.grads[idx]
            .get_or_insert_with(|| vec![T::ZERO; self.nodes[idx].value.numel()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += *d;
        }
    }

    fn backward_node(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = g . B^T
                    let bs = self.data(*b);
                    let mut da = vec![T::ZERO; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                da[i * k + l] += gij * bs[l * n + j];
                            }
                        }
                    }
                    self.add_grad(a.0, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let as_ = self.data(*a).to_vec();
                    let mut db = vec![T::ZERO; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = as_[i * k + l];
                            for j in 0..n {
                                db[l * n + j] += ail * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b.0, &db);
                }
            }
            Op::Conv2d { input, kernels, stride, padding } => {
                let si = self.shape(*input).to_vec();
                let sk = self.shape(*kernels).to_vec();
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                let need_in = self.needs(*input);
                let need_k = self.needs(*kernels);
                let xs = self.data(*input).to_vec();
                let ks = self.data(*kernels).to_vec();
                let mut dx = vec![T::ZERO; xs.len()];
                let mut dk = vec![T::ZERO; ks.len()];
                for oc in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(oc * oh + oy) * ow + ox];
                            for ic in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ic * h + iy as usize) * w + ix as usize;
                                        let ki = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                        if need_in {
                                            dx[xi] += go * ks[ki];
                                        }
                                        if need_k {
                                            dk[ki] += go * xs[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_in {
                    self.add_grad(input.0, &dx);
                }
                if need_k {
                    self.add_grad(kernels.0, &dk);
                }
            }
            Op::AddSame { a, b } => {
                if self.needs(*a) {
                    self.add_grad(a.0, g);
                }
                if self.needs(*b) {
                    self.add_grad(b.0, g);
                }
            }
            Op::AddLastAxisBias { a, bias } => {
                if self.needs(*a) {
                    self.add_grad(a.0, g);
                }
                if self.needs(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![T::ZERO; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += *gi;
                    }
                    self.add_grad(bias.0, &db);
                }
            }
            Op::AddChannelBias { a, bias } => {
                if self.needs(*a) {
                    self.add_grad(a.0, g);
                }
                if self.needs(*bias) {
                    let sa = self.shape(*a);
                    let hw = sa[1] * sa[2];
                    let mut db = vec![T::ZERO; sa[0]];
                    for (i, gi) in g.iter().enumerate() {
                        db[i / hw] += *gi;
                    }
                    self.add_grad(bias.0, &db);
                }
            }
            Op::MulSame { a, b } => {
                if self.needs(*a) {
                    let da: Vec<T> = g.iter().zip(self.data(*b)).map(|(gi, y)| *gi * *y).collect();
                    self.add_grad(a.0, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = g.iter().zip(self.data(*a)).map(|(gi, x)| *gi * *x).collect();
                    self.add_grad(b.0, &db);
                }
            }
            Op::ScaleConst { a, c } => {
                if self.needs(*a) {
                    let da: Vec<T> = g.iter().map(|gi| *gi * *c).collect();
                    self.add_grad(a.0, &da);
                }
            }
            Op::ScaleByVar { a, s } => {
                let sv = self.data(*s)[0];
                if self.needs(*a) {
                    let da: Vec<T> = g.iter().map(|gi| *gi * sv).collect();
                    self.add_grad(a.0, &da);
                }
                if self.needs(*s) {
                    let mut ds = T::ZERO;
                    for (gi, x) in g.iter().zip(self.data(*a)) {
                        ds += *gi * *x;
                    }
                    self.add_grad(s.0, &[ds]);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(gi, x)| *gi * gelu_grad(*x))
                        .collect();
                    self.add_grad(a.0, &da);
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[idx].value.data)
                        .map(|(gi, s)| *gi * *s * (T::ONE - *s))
                        .collect();
                    self.add_grad(a.0, &da);
                }
            }
            Op::Arctan { a } => {
                if self.needs(*a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(gi, x)| *gi / (T::ONE + *x * *x))
                        .collect();
                    self.add_grad(a.0, &da);
                }
            }
            Op::Sqrt { a } => {
                if self.needs(*a) {
                    let half = T::from_f64(0.5);
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[idx].value.data)
                        .map(|(gi, y)| *gi * half / *y)
                        .collect();
                    self.add_grad(a.0, &da);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(*a) {
                    let shape = self.shape(*a).to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let ys = &self.nodes[idx].value.data;
                    let mut da = vec![T::ZERO; ys.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = T::ZERO;
                            for j in 0..len {
                                dot += g[at(j)] * ys[at(j)];
                            }
                            for j in 0..len {
                                da[at(j)] = ys[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    self.add_grad(a.0, &da);
                }
            }
            Op::LayerNorm { x, scale, shift } => {
                let sx = self.shape(*x).to_vec();
                let d = *sx.last().unwrap();
                let rows = self.value(*x).numel() / d;
                let xs = self.data(*x).to_vec();
                let gs = self.data(*scale).to_vec();
                let eps = T::from_f64(LAYER_NORM_EPS);
                let dn = T::from_f64(d as f64);
                let need_x = self.needs(*x);
                let need_scale = self.needs(*scale);
                let need_shift = self.needs(*shift);
                let mut dx = vec![T::ZERO; xs.len()];
                let mut dscale = vec![T::ZERO; d];
                let mut dshift = vec![T::ZERO; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for v in row {
                        mean += *v;
                    }
                    mean /= dn;
                    let mut var = T::ZERO;
                    for v in row {
                        let c = *v - mean;
                        var += c * c;
                    }
                    var /= dn;
                    let inv = T::ONE / (var + eps).sqrt();
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gs[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if need_scale {
                            dscale[j] += grow[j] * xhat;
                        }
                        if need_shift {
                            dshift[j] += grow[j];
                        }
                    }
                    if need_x {
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = grow[j] * gs[j];
                            dx[r * d + j] =
                                inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                        }
                    }
                }
                if need_x {
                    self.add_grad(x.0, &dx);
                }
                if need_scale {
                    self.add_grad(scale.0, &dscale);
                }
                if need_shift {
                    self.add_grad(shift.0, &dshift);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[idx].value.shape.clone();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0usize;
                for p in parts {
                    let len_p = self.shape(*p)[*axis];
                    if self.needs(*p) {
                        let mut dp = vec![T::ZERO; self.value(*p).numel()];
                        for o in 0..outer {
                            let src_base = (o * total + offset) * inner;
                            let dst_base = o * len_p * inner;
                            dp[dst_base..dst_base + len_p * inner]
                                .copy_from_slice(&g[src_base..src_base + len_p * inner]);
                        }
                        self.add_grad(p.0, &dp);
                    }
                    offset += len_p;
                }
            }
            Op::Slice { a, axis, start, len } => {
                if self.needs(*a) {
                    let sa = self.shape(*a).to_vec();
                    let (outer, full, inner) = axis_split(&sa, *axis);
                    let mut da = vec![T::ZERO; self.value(*a).numel()];
                    for o in 0..outer {
                        let dst_base = (o * full + start) * inner;
                        let src_base = o * len * inner;
                        for t in 0..len * inner {
                            da[dst_base + t] += g[src_base + t];
                        }
                    }
                    self.add_grad(a.0, &da);
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    self.add_grad(a.0, g);
                }
            }
            Op::Transpose2d { a } => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![T::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    self.add_grad(a.0, &da);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.needs(*a) {
                    let n = self.shape(*a)[1];
                    let mut da = vec![T::ZERO; self.value(*a).numel()];
                    for (r, idx_src) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[idx_src * n + j] += g[r * n + j];
                        }
                    }
                    self.add_grad(a.0, &da);
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let gi = g[0] / T::from_f64(n as f64);
                    self.add_grad(a.0, &vec![gi; n]);
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    self.add_grad(a.0, &vec![g[0]; n]);
                }
            }
            Op::Gap2d { a } => {
                if self.needs(*a) {
                    let sa = self.shape(*a).to_vec();
                    let hw = sa[1] * sa[2];
                    let denom = T::from_f64(hw as f64);
                    let mut da = vec![T::ZERO; self.value(*a).numel()];
                    for (ch, item) in da.iter_mut().enumerate() {
                        *item = g[ch / hw] / denom;
                    }
                    self.add_grad(a.0, &da);
                }
            }
            Op::Mse { pred, target } => {
                let n = T::from_f64(self.value(*pred).numel() as f64);
                let two = T::from_f64(2.0);
                if self.needs(*pred) {
                    let dp: Vec<T> = self
                        .data(*pred)
                        .iter()
                        .zip(self.data(*target))
                        .map(|(p, t)| g[0] * two * (*p - *t) / n)
                        .collect();
                    self.add_grad(pred.0, &dp);
                }
                if self.needs(*target) {
                    let dt: Vec<T> = self
                        .data(*pred)
                        .iter()
                        .zip(self.data(*target))
                        .map(|(p, t)| -(g[0] * two * (*p - *t) / n))
                        .collect();
                    self.add_grad(target.0, &dt);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let sl = self.shape(*logits).to_vec();
                    let (m, c) = (sl[0], sl[1]);
                    let xs = self.data(*logits);
                    let mut dl = vec![T::ZERO; m * c];
                    let mn = T::from_f64(m as f64);
                    for (r, label) in labels.iter().enumerate() {
                        let row = &xs[r * c..(r + 1) * c];
                        let mut mx = row[0];
                        for v in row {
                            mx = mx.max(*v);
                        }
                        let mut z = T::ZERO;
                        for v in row {
                            z += (*v - mx).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == *label { T::ONE } else { T::ZERO };
                            dl[r * c + j] = g[0] * (p - onehot) / mn;
                        }
                    }
                    self.add_grad(logits.0, &dl);
                }
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // i-k-j loop order keeps the inner accumulation over contiguous rows of b.
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

/// Splits a shape at `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

fn sigmoid_forward<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
