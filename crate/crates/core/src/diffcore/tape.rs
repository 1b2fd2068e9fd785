//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state to
//! run its backward rule. `backward` walks the tape in reverse once; a tape has
//! to be `reset` before it can record and differentiate again.

use std::collections::HashMap;

use super::error::{DiffError, Result};
use super::gemm::{gemm, MatRef};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Half-open cell window `[y0, y1) × [x0, x1)` on one feature level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub level: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    WindowMax {
        maps: Vec<Var>,
        src: Vec<(usize, usize)>,
    },
    Bilinear {
        x: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    Focal {
        x: Var,
        target: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    CrossEntropy {
        x: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    nan_guard: bool,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that checks every forward value for NaN/Inf.
    pub fn with_nan_guard() -> Self {
        Self {
            nan_guard: true,
            ..Self::default()
        }
    }

    pub fn set_nan_guard(&mut self, on: bool) {
        self.nan_guard = on;
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        if self.nan_guard && value.values().iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn node_out(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let needs = self.ng(inputs);
        let t = Tensor::new(shape, values)?;
        self.push(t, op, needs, name)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Leaf that accumulates gradient on the tape only (not tied to a parameter).
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "input")
    }

    /// Leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let p = store.get(id);
        let mut t = p.tensor().clone();
        t.clear_grad();
        let v = self.push(t, Op::Leaf, p.trainable(), "param")?;
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let mut t = self.nodes[v.0].value.clone();
        t.clear_grad();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, &[sa, sb]));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let vals: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.node_out(shape, vals, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; ties route gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    fn bcast_check(&self, name: &'static str, x: Var, b: Var) -> Result<usize> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(mismatch(name, &[sx, sb]));
        }
        Ok(self.value(b).numel())
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.bcast_check("add_bcast", x, b)?;
        let bv = self.values(b);
        let vals: Vec<f64> = self.values(x).iter().enumerate().map(|(i, v)| v + bv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::AddBcast(x, b), &[x, b], "add_bcast")
    }

    /// `x ⊙ b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.bcast_check("mul_bcast", x, b)?;
        let bv = self.values(b);
        let vals: Vec<f64> = self.values(x).iter().enumerate().map(|(i, v)| v * bv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::MulBcast(x, b), &[x, b], "mul_bcast")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let vals = self.values(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::Scale(x, s), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let vals = self.values(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::AddScalar(x), &[x], "add_scalar")
    }

    /// Matrix product. `a` is `[m, k]` or `[batch, m, k]`; `b` must have the same
    /// rank and be `[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes: `b` is `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || mismatch("matmul", &[&sa, &sb]);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(err());
        }
        let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
        let (bb, bk, n) = match (sb.len(), trans_b) {
            (2, false) => (1, sb[0], sb[1]),
            (2, true) => (1, sb[1], sb[0]),
            (_, false) => (sb[0], sb[1], sb[2]),
            (_, true) => (sb[0], sb[2], sb[1]),
        };
        if bb != batch || bk != k {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.values(a), self.values(b));
            for i in 0..batch {
                let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let bm = if trans_b {
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], n, k).t()
                } else {
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n)
                };
                gemm(am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        self.node_out(shape, out, op, &[a, b], "matmul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vals = self.values(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let vals = self.values(x).iter().map(|v| sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::Sigmoid(x), &[x], "sigmoid")
    }

    fn last_dim(&self, x: Var) -> usize {
        self.shape(x).last().copied().unwrap_or(1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x);
        let mut vals = self.values(x).to_vec();
        for row in vals.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::Softmax(x), &[x], "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.last_dim(x);
        let mut vals = self.values(x).to_vec();
        let mut rstd = Vec::with_capacity(vals.len() / n);
        for row in vals.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        self.node_out(shape, vals, Op::LayerNorm { x, rstd }, &[x], "layer_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values(x).iter().sum();
        self.node_out(Vec::new(), vec![s], Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.values(x).iter().sum::<f64>() / n;
        self.node_out(Vec::new(), vec![s], Op::Mean(x), &[x], "mean")
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("mean_last", &[&shape]));
        }
        let n = *shape.last().unwrap();
        let vals = self
            .values(x)
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.node_out(shape[..shape.len() - 1].to_vec(), vals, Op::MeanLast(x), &[x], "mean_last")
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| mismatch("concat", &[]))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(mismatch("concat", &shapes));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut vals = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                vals.extend_from_slice(&self.values(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.node_out(shape, vals, Op::Concat(parts.to_vec()), parts, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(mismatch("reshape", &[self.shape(x), shape]));
        }
        let vals = self.values(x).to_vec();
        self.node_out(shape.to_vec(), vals, Op::Reshape(x), &[x], "reshape")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap_or(&1);
        if len == 0 || start + len > w || shape.is_empty() {
            return Err(mismatch("slice_last", &[&shape, &[start, len]]));
        }
        let vals = self
            .values(x)
            .chunks(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        self.node_out(out, vals, Op::SliceLast { x, start }, &[x], "slice_last")
    }

    /// Selects rows along the first axis (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(mismatch("gather_rows", &[&shape, &[rows.len()]]));
        }
        let stride: usize = shape[1..].iter().product();
        let mut vals = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            vals.extend_from_slice(&self.values(x)[r * stride..(r + 1) * stride]);
        }
        let mut out = shape;
        out[0] = rows.len();
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.node_out(out, vals, op, &[x], "gather_rows")
    }

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, k, k]` weights and `[O]`
    /// bias, square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let bad = || mismatch("conv2d", &[&sx, &sw, &sb]);
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sb != [sw[0]] || stride == 0 {
            return Err(bad());
        }
        let (c, h, wd, o, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(bad());
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.values(x), &geom);
        let mut out = vec![0.0; o * ho * wo];
        let bias = self.values(b);
        for (oc, row) in out.chunks_mut(ho * wo).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[oc]);
        }
        gemm(
            MatRef::new(self.values(w), o, c * k * k),
            MatRef::new(&cols, c * k * k, ho * wo),
            1.0,
            &mut out,
        );
        let op = Op::Conv2d { x, w, b, geom, cols };
        self.node_out(vec![o, ho, wo], out, op, &[x, w, b], "conv2d")
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", &[&s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.values(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = xv[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.node_out(vec![c, 2 * h, 2 * w], out, Op::Upsample2x(x), &[x], "upsample2x")
    }

    /// Per-channel maximum over cell windows drawn from a list of `[C, H, W]`
    /// maps that share `C`. Output is `[windows, C]`.
    pub fn window_max(&mut self, maps: &[Var], windows: &[Window]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = maps.iter().map(|m| self.shape(*m).to_vec()).collect();
        let bad = || DiffError::ShapeMismatch {
            op: "window_max",
            shapes: shapes.clone(),
        };
        if maps.is_empty() || windows.is_empty() || shapes.iter().any(|s| s.len() != 3 || s[0] != shapes[0][0]) {
            return Err(bad());
        }
        let c = shapes[0][0];
        let mut out = Vec::with_capacity(windows.len() * c);
        let mut src = Vec::with_capacity(windows.len() * c);
        for win in windows {
            let s = shapes.get(win.level).ok_or_else(bad)?;
            let (h, w) = (s[1], s[2]);
            if win.y0 >= win.y1 || win.x0 >= win.x1 || win.y1 > h || win.x1 > w {
                return Err(bad());
            }
            let mv = self.values(maps[win.level]);
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for y in win.y0..win.y1 {
                    for x in win.x0..win.x1 {
                        let idx = (ci * h + y) * w + x;
                        if mv[idx] > best {
                            best = mv[idx];
                            arg = idx;
                        }
                    }
                }
                out.push(best);
                src.push((win.level, arg));
            }
        }
        let op = Op::WindowMax {
            maps: maps.to_vec(),
            src,
        };
        self.node_out(vec![windows.len(), c], out, op, maps, "window_max")
    }

    /// Bilinear samples of a `[C, H, W]` map at continuous index coordinates
    /// `(x, y)` where cell `(i, j)` sits at `(j, i)`. Coordinates are clamped to
    /// the map. Output is `[points, C]`.
    pub fn bilinear_sample(&mut self, map: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 3 || points.is_empty() {
            return Err(mismatch("bilinear_sample", &[&s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let taps: Vec<[(usize, f64); 4]> = points.iter().map(|&(x, y)| bilinear_taps(x, y, h, w)).collect();
        let mv = self.values(map);
        let mut out = Vec::with_capacity(points.len() * c);
        for t in &taps {
            for ci in 0..c {
                let base = ci * h * w;
                out.push(t.iter().map(|(i, wt)| mv[base + i] * wt).sum());
            }
        }
        let op = Op::Bilinear { x: map, taps };
        self.node_out(vec![points.len(), c], out, op, &[map], "bilinear_sample")
    }

    /// Elementwise smooth-L1 distance to a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64], beta: f64) -> Result<Var> {
        if target.len() != self.value(x).numel() || beta <= 0.0 {
            return Err(mismatch("smooth_l1", &[self.shape(x), &[target.len()]]));
        }
        let vals = self
            .values(x)
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let op = Op::SmoothL1 {
            x,
            target: target.to_vec(),
            beta,
        };
        self.node_out(shape, vals, op, &[x], "smooth_l1")
    }

    /// Summed sigmoid focal loss of logits against 0/1 targets.
    pub fn sigmoid_focal(&mut self, x: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        if target.len() != self.value(x).numel() {
            return Err(mismatch("sigmoid_focal", &[self.shape(x), &[target.len()]]));
        }
        let total = self
            .values(x)
            .iter()
            .zip(target)
            .map(|(&z, &t)| focal_term(z, t, alpha, gamma).0)
            .sum();
        let op = Op::Focal {
            x,
            target: target.to_vec(),
            alpha,
            gamma,
        };
        self.node_out(Vec::new(), vec![total], op, &[x], "sigmoid_focal")
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(mismatch("cross_entropy", &[&s, &[labels.len()]]));
        }
        let c = s[1];
        let mut probs = self.values(x).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            x,
            labels: labels.to_vec(),
            probs,
        };
        self.node_out(Vec::new(), vec![loss], op, &[x], "cross_entropy")
    }

    /// Single-head scaled dot-product attention over the last two axes:
    /// `softmax(q·kᵀ/√d)·v` with `q` `[B, Tq, d]`, `k`/`v` `[B, Tk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.last_dim(q) as f64;
        let scores = self.matmul_nt(q, k)?;
        let scores = self.scale(scores, 1.0 / d.sqrt())?;
        let weights = self.softmax(scores)?;
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar root. Gradients of trainable parameters are
    /// accumulated into `store`.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let root_t = &self.nodes[root.0].value;
        if !root_t.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: root_t.shape().to_vec(),
            });
        }
        self.backward_done = true;
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].value.set_grad(vec![1.0])?;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].value.set_grad(g)?;
        }
        for node in &self.nodes {
            if let (Some(id), true) = (node.param, node.needs_grad) {
                match node.value.grad() {
                    Some(g) => store.accumulate_grad(id, g),
                    None => store.accumulate_grad(id, &vec![0.0; node.value.numel()]),
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: &[f64]) {
        let n = &mut self.nodes[v.0];
        if n.needs_grad {
            n.value.accumulate_grad(delta);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out = self.nodes[i].value.values();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.values(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.values(*a)).map(|(g, x)| g * x).collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                let (av, bv) = (self.values(*a), self.values(*b));
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for j in 0..g.len() {
                    let pick_a = if is_min { av[j] <= bv[j] } else { av[j] >= bv[j] };
                    if pick_a {
                        da[j] = g[j];
                    } else {
                        db[j] = g[j];
                    }
                }
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::AddBcast(x, b) => {
                self.acc(*x, g);
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    g.iter().enumerate().for_each(|(j, v)| db[j % n] += v);
                    self.acc(*b, &db);
                }
            }
            Op::MulBcast(x, b) => {
                let n = self.value(*b).numel();
                let (xv, bv) = (self.values(*x), self.values(*b));
                let dx: Vec<f64> = g.iter().enumerate().map(|(j, v)| v * bv[j % n]).collect();
                let mut db = vec![0.0; n];
                g.iter().zip(xv).enumerate().for_each(|(j, (v, xx))| db[j % n] += v * xx);
                self.acc(*x, &dx);
                self.acc(*b, &db);
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.acc(*x, &dx);
            }
            Op::AddScalar(x) => self.acc(*x, g),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.wants(*a) {
                    let bv = self.values(*b);
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gm = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let bt = if *trans_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::new(bs, k, n).t()
                        };
                        gemm(gm, bt, 0.0, &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.acc(*a, &da);
                }
                if self.wants(*b) {
                    let av = self.values(*a);
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gm = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let am = MatRef::new(&av[bi * m * k..(bi + 1) * m * k], m, k);
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(gm.t(), am, 0.0, dst);
                        } else {
                            gemm(am.t(), gm, 0.0, dst);
                        }
                    }
                    self.acc(*b, &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g.iter().zip(out).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                self.acc(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(*x, &dx);
            }
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*x, &dx);
            }
            Op::LayerNorm { x, rstd } => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                let nf = n as f64;
                let mut dx = vec![0.0; g.len()];
                for (r, ((dr, gr), yr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.acc(*x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.acc(*x, &dx);
            }
            Op::MeanLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                let dx: Vec<f64> = g.iter().flat_map(|v| std::iter::repeat_n(v / n as f64, n)).collect();
                self.acc(*x, &dx);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(*p, &dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => self.acc(*x, g),
            Op::SliceLast { x, start } => {
                let w = *self.shape(*x).last().unwrap();
                let len = *self.nodes[i].value.shape().last().unwrap();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    dx[r * w + start..r * w + start + len].copy_from_slice(gr);
                }
                self.acc(*x, &dx);
            }
            Op::GatherRows { x, rows } => {
                let stride = g.len() / rows.len();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for t in 0..stride {
                        dx[r * stride + t] += g[j * stride + t];
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                let gm = MatRef::new(g, geom.o, hw);
                if self.wants(*w) {
                    let mut dw = vec![0.0; geom.o * ckk];
                    gemm(gm, MatRef::new(cols, ckk, hw).t(), 0.0, &mut dw);
                    self.acc(*w, &dw);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.chunks(hw).map(|r| r.iter().sum()).collect();
                    self.acc(*b, &db);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(MatRef::new(self.values(*w), geom.o, ckk).t(), gm, 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    self.acc(*x, &dx);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(*x, &dx);
            }
            Op::WindowMax { maps, src } => {
                let mut dms: Vec<Option<Vec<f64>>> = maps
                    .iter()
                    .map(|m| self.wants(*m).then(|| vec![0.0; self.value(*m).numel()]))
                    .collect();
                for (gv, (lvl, idx)) in g.iter().zip(src) {
                    if let Some(d) = &mut dms[*lvl] {
                        d[*idx] += gv;
                    }
                }
                for (m, d) in maps.iter().zip(dms) {
                    if let Some(d) = d {
                        self.acc(*m, &d);
                    }
                }
            }
            Op::Bilinear { x, taps } => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let mut dx = vec![0.0; c * hw];
                for (p, t) in taps.iter().enumerate() {
                    for ci in 0..c {
                        let gv = g[p * c + ci];
                        for (idx, wt) in t {
                            dx[ci * hw + idx] += gv * wt;
                        }
                    }
                }
                self.acc(*x, &dx);
            }
            Op::SmoothL1 { x, target, beta } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.values(*x).iter().zip(target))
                    .map(|(g, (p, t))| {
                        let d = p - t;
                        if d.abs() < *beta {
                            g * d / beta
                        } else {
                            g * d.signum()
                        }
                    })
                    .collect();
                self.acc(*x, &dx);
            }
            Op::Focal { x, target, alpha, gamma } => {
                let dx: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| g[0] * focal_term(z, t, *alpha, *gamma).1)
                    .collect();
                self.acc(*x, &dx);
            }
            Op::CrossEntropy { x, labels, probs } => {
                let c = self.shape(*x)[1];
                let scale = g[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                self.acc(*x, &dx);
            }
        }
    }
}

/// Value and derivative (w.r.t. the logit) of one sigmoid focal term.
pub(crate) fn focal_term(z: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    // t interpolates between the negative (0) and positive (1) cases.
    let p = sigmoid(z);
    let pos = {
        let w = (1.0 - p).powf(gamma);
        let logp = log_sigmoid(z);
        let val = -alpha * w * logp;
        // d/dz [-(1-p)^γ log p] = γ(1-p)^γ p log p - (1-p)^{γ+1}
        let d = alpha * (gamma * w * p * logp - w * (1.0 - p));
        (val, d)
    };
    let neg = {
        let w = p.powf(gamma);
        let log1mp = log_sigmoid(-z);
        let val = -(1.0 - alpha) * w * log1mp;
        // d/dz [-p^γ log(1-p)] = -γ p^γ (1-p) log(1-p) + p^{γ+1}
        let d = (1.0 - alpha) * (-gamma * w * (1.0 - p) * log1mp + w * p);
        (val, d)
    };
    (t * pos.0 + (1.0 - t) * neg.0, t * pos.1 + (1.0 - t) * neg.1)
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * hw];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = x[(ci * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
