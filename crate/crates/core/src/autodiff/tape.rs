use super::conv::{self, ConvGeom, Padding};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Log {
        x: Var,
    },
    ClampMin {
        x: Var,
        floor: T,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Pow {
        x: Var,
        p: T,
    },
    Abs {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Sum {
        x: Var,
        reduced: Vec<bool>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax",
            Op::Log { .. } => "log",
            Op::ClampMin { .. } => "clamp_min",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Pow { .. } => "pow",
            Op::Abs { .. } => "abs",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Sum { .. } => "sum",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear record of executed operations. Values are computed eagerly;
/// [`Tape::backward`] replays the record in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value, saved buffer and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(node))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    // ---- convolution ------------------------------------------------------

    /// Cross-correlation of an `N×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(x, kernel, bias, stride, Padding::uniform(padding))
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ks,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (ho, wo) = match (
            conv::out_extent(xs[2], pad.top, pad.bottom, ks[2], stride),
            conv::out_extent(xs[3], pad.left, pad.right, ks[3], stride),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!(
                        "kernel {ks:?} with stride {stride} and padding {pad:?} does not fit input {xs:?}"
                    ),
                })
            }
        };
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho,
            wo,
        };
        let keep_cols = self.requires_grad(kernel);
        let (out, cols) = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            keep_cols,
        );
        let value = Tensor::new(&[geom.n, geom.o, ho, wo], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv {
                x,
                k: kernel,
                b: bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    // ---- elementwise ------------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} outside [0,1)")));
        }
        let s = T::lit(slope);
        self.unary(x, Op::LeakyRelu { x, slope: s }, |v| if v > T::zero() { v } else { v * s })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let node = self.nodes.len();
        if let Some((index, &value)) = self.value(x).data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
            return Err(Error::NonPositiveLog {
                node,
                input_op: self.nodes[x.0].op.name(),
                index,
                value: value.to_f64().unwrap_or(f64::NAN),
            });
        }
        self.unary(x, Op::Log { x }, |v| v.ln())
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let f = T::lit(floor);
        self.unary(x, Op::ClampMin { x, floor: f }, |v| if v > f { v } else { f })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    /// `x^p`; non-integer `p` expects positive inputs.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        let pt = T::lit(p);
        self.unary(x, Op::Pow { x, p: pt }, |v| v.powf(pt))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(f(va[ia], vb[ib])));
            out
        };
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::Binary { kind, a, b }, &[a, b])
    }

    // ---- reductions and layout --------------------------------------------

    /// Sums over `axes`; reduced dims are kept with extent 1 when `keep_dims`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::InvalidArgument(format!("axis {ax} out of range for shape {shape:?}")));
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let mut out = vec![T::zero(); kept.iter().product()];
        let src = self.value(x).data();
        for_each_reduce(&shape, &reduced, |i, o| out[o] = out[o] + src[i]);
        let out_shape: Vec<usize> = if keep_dims {
            kept
        } else {
            shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Sum { x, reduced }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes, keep_dims)?;
        self.scale(s, 1.0 / count.max(1) as f64)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n.max(1) as f64)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for c in 0..len {
                    max = max.max(src[base + c * inner]);
                }
                let mut total = T::zero();
                for c in 0..len {
                    let e = (src[base + c * inner] - max).exp();
                    out[base + c * inner] = e;
                    total = total + e;
                }
                for c in 0..len {
                    out[base + c * inner] = out[base + c * inner] / total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Bilinear upsampling of the two trailing dims (half-pixel centres,
    /// edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(Error::InvalidShape {
                op: "upsample_bilinear",
                detail: format!("shape {shape:?}, factor {factor}"),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (ty, tx) = (interp_table(h, factor), interp_table(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::lit(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::lit(wx);
                    let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                    dst[oy * ow + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Upsample { x, factor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Collapses every dim after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of the single-element `loss` with respect to every
    /// recorded value that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("loss must have one element, shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backward_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom, cols } => {
                let g = conv::backward(
                    geom,
                    dy,
                    self.value(*k).data(),
                    cols.as_deref(),
                    self.requires_grad(*x),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = g.dkernel {
                    self.accumulate(grads, *k, dk);
                }
                if let (Some(b), Some(db)) = (b, g.dbias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for c in 0..*len {
                            dot = dot + dy[base + c * inner] * y[base + c * inner];
                        }
                        for c in 0..*len {
                            let j = base + c * inner;
                            dx[j] = y[j] * (dy[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(dy).map(|(&v, &g)| g / v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > *floor { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Binary { kind, a, b } => self.backward_binary(*kind, *a, *b, node.value.shape(), dy, grads),
            Op::Scale { x, c } => {
                let dx = dy.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::Pow { x, p } => {
                let xv = self.value(*x).data();
                let pm1 = *p - T::one();
                let dx = xv.iter().zip(dy).map(|(&v, &g)| g * *p * v.powf(pm1)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = y.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x, reduced } => {
                let shape = self.shape(*x);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for_each_reduce(shape, reduced, |i, o| dx[i] = dy[o]);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes: usize = shape[..shape.len() - 2].iter().product();
                let (ty, tx) = (interp_table(h, *factor), interp_table(w, *factor));
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let g = &dy[p * oh * ow..(p + 1) * oh * ow];
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        let wy = T::lit(wy);
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let wx = T::lit(wx);
                            let v = g[oy * ow + ox];
                            let top = v * (T::one() - wy);
                            let bot = v * wy;
                            plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - wx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + top * wx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - wx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + bot * wx;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
        }
    }

    fn backward_binary(&self, kind: BinKind, a: Var, b: Var, out_shape: &[usize], dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let partials = |x: T, y: T| -> (T, T) {
            match kind {
                BinKind::Add => (T::one(), T::one()),
                BinKind::Sub => (T::one(), -T::one()),
                BinKind::Mul => (y, x),
                BinKind::Div => (T::one() / y, -x / (y * y)),
            }
        };
        let mut da = need_a.then(|| vec![T::zero(); va.len()]);
        let mut db = need_b.then(|| vec![T::zero(); vb.len()]);
        if sa == sb {
            for i in 0..dy.len() {
                let (pa, pb) = partials(va[i], vb[i]);
                if let Some(da) = da.as_mut() {
                    da[i] = dy[i] * pa;
                }
                if let Some(db) = db.as_mut() {
                    db[i] = dy[i] * pb;
                }
            }
        } else {
            for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                let (pa, pb) = partials(va[ia], vb[ib]);
                if let Some(da) = da.as_mut() {
                    da[ia] = da[ia] + dy[o] * pa;
                }
                if let Some(db) = db.as_mut() {
                    db[ib] = db[ib] + dy[o] * pb;
                }
            });
        }
        if let Some(da) = da {
            self.accumulate(grads, a, da);
        }
        if let Some(db) = db {
            self.accumulate(grads, b, db);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
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

/// Per output coordinate: (low source index, high source index, weight of high).
fn interp_table(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(size - 1);
            let hi = (lo + 1).min(size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Row-major strides of `shape` aligned to `out`, zero on broadcast dims.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position in row-major order with the matching flat
/// offsets into both (broadcast) operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let (stra, strb) = (aligned_strides(sa, out), aligned_strides(sb, out));
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += stra[d];
            ib += strb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= stra[d] * out[d];
            ib -= strb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Visits every input position in row-major order with its flat offset in
/// the reduced (keep-dims) output.
fn for_each_reduce(shape: &[usize], reduced: &[bool], mut f: impl FnMut(usize, usize)) {
    let kept: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    for_each_broadcast(shape, shape, &kept, |i, _, o| f(i, o));
}
