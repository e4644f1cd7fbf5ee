use super::conv::ConvDims;
use super::{axis_split, Conv2dGeometry, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Elu,
    Exp,
    Log,
    Softplus,
    LogSigmoid,
    Square,
}

enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(UnaryKind, Var),
    ClampMin(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Shift { input: Var, axis: usize, amount: isize },
    Reshape(Var),
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    LogSumExp { input: Var, axis: usize },
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: Conv2dGeometry },
    ConvTranspose2d { input: Var, kernel: Var, geom: Conv2dGeometry },
    WeightNorm { v: Var, g: Var },
    LogisticBin { mean: Var, log_scale: Var, centers: Vec<T>, half_width: T },
    CustomScalar { jacobians: Vec<(Var, Tensor<T>)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation graph.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf. Untouched leaves hold zeros; `None` is
    /// returned for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// How an operand indexes into a broadcast result.
enum BMap {
    Same,
    Scalar,
    Suffix(usize),
    General(Vec<usize>),
}

impl BMap {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        let numel: usize = inp.iter().product();
        if out == inp {
            return BMap::Same;
        }
        if numel == 1 {
            return BMap::Scalar;
        }
        if inp.len() <= out.len() && out[out.len() - inp.len()..] == *inp {
            return BMap::Suffix(numel);
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for d in (0..inp.len()).rev() {
            let od = rank - inp.len() + d;
            if inp[d] != 1 {
                strides[od] = s;
            }
            s *= inp[d];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut lin = 0usize;
        for _ in 0..total {
            map.push(lin);
            for d in (0..rank).rev() {
                idx[d] += 1;
                lin += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                lin -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        BMap::General(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Scalar => 0,
            BMap::Suffix(n) => i % n,
            BMap::General(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let ma = BMap::new(&out, sa);
        let mb = BMap::new(&out, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out.iter().product();
        let data = (0..numel).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect();
        Ok((Tensor { shape: out, data }, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = *x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = *x + c);
        self.push(t, Op::Offset(a), &[a])
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let src = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(bad) = src.data().iter().find(|&&x| x <= T::zero() || x.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
        }
        let f: fn(T) -> T = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => |x: T| x.tanh(),
            UnaryKind::Elu => |x: T| if x > T::zero() { x } else { x.exp_m1() },
            UnaryKind::Exp => |x: T| x.exp(),
            UnaryKind::Log => |x: T| x.ln(),
            UnaryKind::Softplus => softplus,
            UnaryKind::LogSigmoid => |x: T| -softplus(-x),
            UnaryKind::Square => |x: T| x * x,
        };
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        Ok(self.push(t, Op::Unary(kind, a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a).expect("tanh is total")
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Elu, a).expect("elu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a).expect("softplus is total")
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::LogSigmoid, a).expect("log-sigmoid is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a).expect("square is total")
    }

    /// `max(a, lo)` elementwise; clamped entries receive no gradient.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = T::of(lo);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.max(lo));
        self.push(t, Op::ClampMin(a, lo), &[a])
    }

    /// `concat(elu(x), elu(-x))` along the last axis.
    pub fn concat_elu(&mut self, a: Var) -> Result<Var> {
        let pos = self.elu(a);
        let na = self.neg(a);
        let neg = self.elu(na);
        let axis = self.shape(a).len() - 1;
        self.concat(&[pos, neg], axis)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor { shape, data };
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(t, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Moves contents `amount` positions toward higher indices along `axis`,
    /// filling vacated positions with zeros and dropping what falls off.
    pub fn shift(&mut self, a: Var, axis: usize, amount: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("shift axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..n {
                let j = i as isize - amount;
                if j >= 0 && (j as usize) < n {
                    let dst = (o * n + i) * inner;
                    let s = (o * n + j as usize) * inner;
                    data[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Shift { input: a, axis, amount }, &[a]))
    }

    /// Inserts a zero row at the top of a `[B,H,W,C]` map and drops the bottom row.
    pub fn down_shift(&mut self, a: Var) -> Result<Var> {
        self.shift(a, 1, 1)
    }

    /// Inserts a zero column at the left of a `[B,H,W,C]` map and drops the last column.
    pub fn right_shift(&mut self, a: Var) -> Result<Var> {
        self.shift(a, 2, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(t, Op::SumAxis { input: a, axis }, &[a]))
    }

    /// Sums all elements into a scalar of shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Max-subtracted `log(sum(exp(a)))` along `axis`, which is removed.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("logsumexp axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| src[(o * n + i) * inner + j];
                let m = (0..n).map(at).fold(T::neg_infinity(), T::max);
                data[o * inner + j] = if m == T::neg_infinity() || m.is_infinite() {
                    m
                } else {
                    m + (0..n).map(|i| (at(i) - m).exp()).sum::<T>().ln()
                };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(t, Op::LogSumExp { input: a, axis }, &[a]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x W + b` for `x: [B,n]`, `W: [n,m]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let (sw, sb) = (self.shape(w), self.shape(b));
        if sb != [sw[1]] {
            return Err(Error::shape("dense bias", sw, sb));
        }
        self.add(xw, b)
    }

    /// Cross-correlation of `[B,H,W,Cin]` with a `[kh,kw,Cin,Cout]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: Conv2dGeometry) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", self.shape(input), &ks));
        }
        let dims = ConvDims::resolve(self.shape(input), (ks[0], ks[1], ks[2]), geom)
            .map_err(|_| Error::shape("conv2d", self.shape(input), &ks))?;
        let cout = ks[3];
        let cols = dims.im2col(self.value(input).data());
        let rows = dims.rows();
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(false, false, rows, dims.patch_len(), cout, &cols, self.value(kernel).data(), T::zero(), &mut out);
        let t = Tensor {
            shape: vec![dims.batch, dims.out_h, dims.out_w, cout],
            data: out,
        };
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernel and geometry. The kernel
    /// is `[kh,kw,Cout,Cin]` (large side first) and `out_hw` is the spatial size
    /// of the conv input this operation is the adjoint of.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        geom: Conv2dGeometry,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(input).to_vec();
        if ks.len() != 4 || xs.len() != 4 || xs[3] != ks[3] {
            return Err(Error::shape("conv_transpose2d", &xs, &ks));
        }
        let big = [xs[0], out_hw.0, out_hw.1, ks[2]];
        let dims = ConvDims::resolve(&big, (ks[0], ks[1], ks[2]), geom)
            .map_err(|_| Error::shape("conv_transpose2d", &xs, &ks))?;
        if dims.out_h != xs[1] || dims.out_w != xs[2] {
            return Err(Error::shape("conv_transpose2d", &xs, &big));
        }
        let rows = dims.rows();
        let mut cols = vec![T::zero(); rows * dims.patch_len()];
        T::gemm(false, true, rows, ks[3], dims.patch_len(), self.value(input).data(), self.value(kernel).data(), T::zero(), &mut cols);
        let mut out = vec![T::zero(); big.iter().product()];
        dims.col2im(&cols, &mut out);
        let t = Tensor {
            shape: big.to_vec(),
            data: out,
        };
        Ok(self.push(t, Op::ConvTranspose2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Weight normalization: `w[.., o] = g[o] * v[.., o] / ||v[.., o]||`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (sv, sg) = (self.shape(v).to_vec(), self.shape(g).to_vec());
        let cols = *sv.last().unwrap_or(&0);
        if sg != [cols] || cols == 0 {
            return Err(Error::shape("weight_norm", &sv, &sg));
        }
        let vd = self.value(v).data();
        let gd = self.value(g).data();
        let norms = column_norms(vd, cols);
        let data = vd
            .iter()
            .enumerate()
            .map(|(i, &x)| gd[i % cols] * x / norms[i % cols])
            .collect();
        let t = Tensor { shape: sv, data };
        Ok(self.push(t, Op::WeightNorm { v, g }, &[v, g]))
    }

    /// Log-mass of discretized logistic bins. `centers` holds bin centres in
    /// `[-1, 1]`; the lowest and highest bins are open towards infinity.
    pub fn logistic_bin_log_prob(
        &mut self,
        mean: Var,
        log_scale: Var,
        centers: &Tensor<T>,
        half_width: f64,
    ) -> Result<Var> {
        let shape = self.shape(mean).to_vec();
        if self.shape(log_scale) != shape.as_slice() || centers.shape() != shape.as_slice() {
            return Err(Error::shape("logistic_bin", &shape, self.shape(log_scale)));
        }
        let hw = T::of(half_width);
        let (md, sd) = (self.value(mean).data(), self.value(log_scale).data());
        let data = centers
            .data()
            .iter()
            .zip(md.iter().zip(sd))
            .map(|(&c, (&mu, &ls))| logistic_bin(c, mu, ls, hw).0)
            .collect();
        let t = Tensor { shape, data };
        Ok(self.push(
            t,
            Op::LogisticBin {
                mean,
                log_scale,
                centers: centers.data().to_vec(),
                half_width: hw,
            },
            &[mean, log_scale],
        ))
    }

    /// Copies `a` into an untracked node; gradients stop here.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    /// A scalar node whose value and partial derivatives are supplied by the
    /// caller (e.g. a log-partition estimate and its moment-based gradient).
    pub fn custom_scalar(&mut self, value: f64, jacobians: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, j) in &jacobians {
            if self.shape(*v) != j.shape() {
                return Err(Error::shape("custom_scalar", self.shape(*v), j.shape()));
            }
        }
        let inputs: Vec<Var> = jacobians.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(T::of(value)), Op::CustomScalar { jacobians }, &inputs))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor { shape, data },
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    if self.wants(v) {
                        let map = BMap::new(out_shape, self.shape(v));
                        let acc = accumulate(grads, v, self.value(v).len());
                        for (i, &gi) in g.iter().enumerate() {
                            acc[map.at(i)] += s * gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ma = BMap::new(out_shape, self.shape(a));
                let mb = BMap::new(out_shape, self.shape(b));
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let acc = accumulate(grads, a, da.len());
                    for (i, &gi) in g.iter().enumerate() {
                        acc[ma.at(i)] += gi * db[mb.at(i)];
                    }
                }
                if self.wants(b) {
                    let acc = accumulate(grads, b, db.len());
                    for (i, &gi) in g.iter().enumerate() {
                        acc[mb.at(i)] += gi * da[ma.at(i)];
                    }
                }
            }
            Op::Scale(a, c) => {
                let acc = accumulate(grads, *a, g.len());
                for (d, &gi) in acc.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let acc = accumulate(grads, *a, g.len());
                for (d, &gi) in acc.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let acc = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryKind::Tanh => T::one() - y[i] * y[i],
                        UnaryKind::Elu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                y[i] + T::one()
                            }
                        }
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => T::one() / x[i],
                        UnaryKind::Softplus => sigmoid(x[i]),
                        UnaryKind::LogSigmoid => sigmoid(-x[i]),
                        UnaryKind::Square => (T::one() + T::one()) * x[i],
                    };
                    acc[i] += g[i] * d;
                }
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                let acc = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] >= *lo {
                        acc[i] += g[i];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let acc = accumulate(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, &s) in acc[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = axis_split(in_shape, *axis);
                let len = out_shape[*axis];
                let acc = accumulate(grads, *input, outer * n * inner);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    for (d, &s) in acc[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
            Op::Shift { input, axis, amount } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let acc = accumulate(grads, *input, g.len());
                for o in 0..outer {
                    for i in 0..n {
                        let j = i as isize - amount;
                        if j >= 0 && (j as usize) < n {
                            let src = (o * n + i) * inner;
                            let dst = (o * n + j as usize) * inner;
                            for k in 0..inner {
                                acc[dst + k] += g[src + k];
                            }
                        }
                    }
                }
            }
            Op::SumAxis { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let acc = accumulate(grads, *input, outer * n * inner);
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            acc[(o * n + i) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                let acc = accumulate(grads, *a, len);
                for d in acc.iter_mut() {
                    *d += g[0];
                }
            }
            Op::LogSumExp { input, axis } => {
                let x = self.value(*input).data();
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let y = node.value.data();
                let acc = accumulate(grads, *input, x.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let yo = y[o * inner + j];
                        if yo == T::neg_infinity() {
                            continue;
                        }
                        for i in 0..n {
                            let k = (o * n + i) * inner + j;
                            acc[k] += g[o * inner + j] * (x[k] - yo).exp();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let acc = accumulate(grads, a, m * k);
                    T::gemm(false, true, m, n, k, g, self.value(b).data(), T::one(), acc);
                }
                if self.wants(b) {
                    let acc = accumulate(grads, b, k * n);
                    T::gemm(true, false, k, m, n, self.value(a).data(), g, T::one(), acc);
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let ks = self.shape(*kernel);
                let dims = ConvDims::resolve(self.shape(*input), (ks[0], ks[1], ks[2]), *geom)
                    .expect("geometry validated in forward");
                let cout = ks[3];
                let rows = dims.rows();
                let plen = dims.patch_len();
                if self.wants(*kernel) {
                    let cols = dims.im2col(self.value(*input).data());
                    let acc = accumulate(grads, *kernel, plen * cout);
                    T::gemm(true, false, plen, rows, cout, &cols, g, T::one(), acc);
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * plen];
                    T::gemm(false, true, rows, cout, plen, g, self.value(*kernel).data(), T::zero(), &mut dcols);
                    let len = self.value(*input).len();
                    let acc = accumulate(grads, *input, len);
                    dims.col2im(&dcols, acc);
                }
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let ks = self.shape(*kernel);
                let dims = ConvDims::resolve(out_shape, (ks[0], ks[1], ks[2]), *geom)
                    .expect("geometry validated in forward");
                let cin = ks[3];
                let rows = dims.rows();
                let plen = dims.patch_len();
                let dcols = dims.im2col(g);
                if self.wants(*input) {
                    let acc = accumulate(grads, *input, rows * cin);
                    T::gemm(false, false, rows, plen, cin, &dcols, self.value(*kernel).data(), T::one(), acc);
                }
                if self.wants(*kernel) {
                    let acc = accumulate(grads, *kernel, plen * cin);
                    T::gemm(true, false, plen, rows, cin, &dcols, self.value(*input).data(), T::one(), acc);
                }
            }
            Op::WeightNorm { v, g: gain } => {
                let vd = self.value(*v).data();
                let gd = self.value(*gain).data();
                let cols = gd.len();
                let norms = column_norms(vd, cols);
                // dot[o] = sum_r dw[r,o] * vhat[r,o]
                let mut dot = vec![T::zero(); cols];
                for (i, (&gi, &x)) in g.iter().zip(vd).enumerate() {
                    dot[i % cols] += gi * x / norms[i % cols];
                }
                if self.wants(*gain) {
                    let acc = accumulate(grads, *gain, cols);
                    for (d, &s) in acc.iter_mut().zip(&dot) {
                        *d += s;
                    }
                }
                if self.wants(*v) {
                    let acc = accumulate(grads, *v, vd.len());
                    for (i, (&gi, &x)) in g.iter().zip(vd).enumerate() {
                        let o = i % cols;
                        let vhat = x / norms[o];
                        acc[i] += gd[o] / norms[o] * (gi - dot[o] * vhat);
                    }
                }
            }
            Op::LogisticBin {
                mean,
                log_scale,
                centers,
                half_width,
            } => {
                let md = self.value(*mean).data();
                let sd = self.value(*log_scale).data();
                let mut dmu = vec![T::zero(); g.len()];
                let mut dls = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    let (_, gm, gs) = logistic_bin(centers[i], md[i], sd[i], *half_width);
                    dmu[i] = g[i] * gm;
                    dls[i] = g[i] * gs;
                }
                for (v, d) in [(*mean, dmu), (*log_scale, dls)] {
                    if self.wants(v) {
                        let acc = accumulate(grads, v, d.len());
                        for (a, x) in acc.iter_mut().zip(d) {
                            *a += x;
                        }
                    }
                }
            }
            Op::CustomScalar { jacobians } => {
                for (v, j) in jacobians {
                    if self.wants(*v) {
                        let acc = accumulate(grads, *v, j.len());
                        for (a, &x) in acc.iter_mut().zip(j.data()) {
                            *a += g[0] * x;
                        }
                    }
                }
            }
        }
    }
}

fn column_norms<T: Real>(v: &[T], cols: usize) -> Vec<T> {
    let mut sq = vec![T::zero(); cols];
    for (i, &x) in v.iter().enumerate() {
        sq[i % cols] += x * x;
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

/// Log-mass of one logistic bin and its partials w.r.t. mean and log-scale.
///
/// Interior bins use `log(s(p) - s(m)) = log s(p) + log s(-m) + log(1 - e^{-(p-m)})`
/// with `p, m` the standardized upper and lower bin edges, which stays finite
/// for any separation.
pub(crate) fn logistic_bin<T: Real>(center: T, mean: T, log_scale: T, half_width: T) -> (T, T, T) {
    let inv = (-log_scale).exp();
    let plus = (center + half_width - mean) * inv;
    let minus = (center - half_width - mean) * inv;
    let log_sig = |x: T| -softplus(-x);
    let edge = half_width * T::of(0.5);
    if center - edge <= -T::one() {
        // lowest bin: P = s(plus)
        let dp = sigmoid(-plus);
        (log_sig(plus), -inv * dp, -plus * dp)
    } else if center + edge >= T::one() {
        // highest bin: P = 1 - s(minus)
        let dm = -sigmoid(minus);
        (log_sig(-minus), -inv * dm, -minus * dm)
    } else {
        let gap = plus - minus;
        let lp = log_sig(plus) + log_sig(-minus) + (-(-gap).exp_m1()).ln();
        let tail = T::one() / gap.exp_m1();
        let dp = sigmoid(-plus) + tail;
        let dm = -sigmoid(minus) - tail;
        (lp, -inv * (dp + dm), -(plus * dp + minus * dm))
    }
}
