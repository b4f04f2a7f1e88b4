use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use super::DiffError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Geometry of a square-kernel 2-D convolution over `[C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    /// Zero padding before the first row/column.
    pub pad_lo: usize,
    /// Zero padding after the last row/column.
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self {
            stride,
            pad_lo,
            pad_hi,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        let padded = input + self.pad_lo + self.pad_hi;
        assert!(padded >= kernel, "kernel {kernel} larger than padded input {padded}");
        (padded - kernel) / self.stride + 1
    }

    /// Output positions `o` for which `o * stride + k - pad_lo` lands inside `0..input`.
    fn valid_range(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let offset = k as isize - self.pad_lo as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = ((input as isize - offset + s - 1) / s).clamp(0, output as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine(usize, f64),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Abs(usize),
    Sigmoid(usize),
    Min(usize, usize),
    Max(usize, usize),
    Clamp(usize, f64, f64),
    Select {
        mask: Vec<bool>,
        on_true: usize,
        on_false: usize,
    },
    Sum(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Splat {
        voxels: usize,
        active: Vec<bool>,
        dims: [usize; 3],
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only recording of a computation. Values are computed eagerly as
/// operations are recorded; [`Graph::backward`] replays the trace in reverse.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂root/∂v`; zero for values the root does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable from a different recording");
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn broadcast_shape(op: &str, a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.shape() == b.shape() || b.numel() == 1 {
        a.shape().to_vec()
    } else if a.numel() == 1 {
        b.shape().to_vec()
    } else {
        panic!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape());
    }
}

fn zip_with(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(op, a, b);
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (sa, sb) = (ad.len() == 1 && n != 1, bd.len() == 1 && n != 1);
    let data = (0..n)
        .map(|i| f(ad[if sa { 0 } else { i }], bd[if sb { 0 } else { i }]))
        .collect();
    Tensor::new(shape, data)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, v: Var) -> bool {
        v.graph == self.id && v.index < self.len()
    }

    fn check(&self, v: Var) -> usize {
        assert!(
            self.contains(v),
            "variable does not belong to this recording"
        );
        v.index
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let i = self.check(x);
        let value = self.nodes.borrow()[i].value.map(f);
        let rg = self.needs(&[i]);
        self.push(value, op(i), rg)
    }

    fn binary(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Var {
        let (i, j) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            zip_with(name, &nodes[i].value, &nodes[j].value, f)
        };
        let rg = self.needs(&[i, j]);
        self.push(value, op(i, j), rg)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Constant copy of `x`'s current value.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> Tensor {
        let i = self.check(x);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn value_ref(&self, x: Var) -> Ref<'_, Tensor> {
        let i = self.check(x);
        Ref::map(self.nodes.borrow(), |n| &n[i].value)
    }

    pub fn item(&self, x: Var) -> f64 {
        self.value_ref(x).item()
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.value_ref(x).shape().to_vec()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value_ref(b).data().iter().find(|v| **v == 0.0) {
            return Err(DiffError::Domain { op: "div", value: bad });
        }
        Ok(self.binary("div", a, b, |x, y| x / y, Op::Div))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, |i| Op::Affine(i, scale))
    }

    pub fn scale(&self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value_ref(x).data().iter().find(|v| **v <= 0.0) {
            return Err(DiffError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(x, f64::ln, Op::Log))
    }

    /// `x^exponent` for a constant exponent.
    pub fn powf(&self, x: Var, exponent: f64) -> Result<Var, DiffError> {
        let integral = exponent.fract() == 0.0;
        if let Some(&bad) = self
            .value_ref(x)
            .data()
            .iter()
            .find(|v| (**v < 0.0 && !integral) || (**v == 0.0 && exponent < 0.0))
        {
            return Err(DiffError::Domain { op: "pow", value: bad });
        }
        Ok(self.unary(x, |v| v.powf(exponent), |i| Op::Powf(i, exponent)))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn min(&self, a: Var, b: Var) -> Var {
        self.binary("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min)
    }

    pub fn max(&self, a: Var, b: Var) -> Var {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds reversed: {lo} > {hi}");
        self.unary(x, |v| v.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    /// Elementwise `if lhs > rhs { on_true } else { on_false }`. The comparison
    /// operands receive no gradient.
    pub fn select_gt(&self, lhs: Var, rhs: Var, on_true: Var, on_false: Var) -> Var {
        let (l, r, t, f) = (
            self.check(lhs),
            self.check(rhs),
            self.check(on_true),
            self.check(on_false),
        );
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let cond = zip_with("select", &nodes[l].value, &nodes[r].value, |a, b| {
                if a > b {
                    1.0
                } else {
                    0.0
                }
            });
            let branches = zip_with("select", &nodes[t].value, &nodes[f].value, |_, _| 0.0);
            assert!(
                cond.numel() == branches.numel() || cond.numel() == 1,
                "select: condition and branch shapes differ"
            );
            let mask: Vec<bool> = (0..branches.numel())
                .map(|i| cond.data()[if cond.numel() == 1 { 0 } else { i }] > 0.5)
                .collect();
            let pick = |src: &Tensor, i: usize| src.data()[if src.numel() == 1 { 0 } else { i }];
            let data = mask
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    if m {
                        pick(&nodes[t].value, i)
                    } else {
                        pick(&nodes[f].value, i)
                    }
                })
                .collect();
            (Tensor::new(branches.shape().to_vec(), data), mask)
        };
        let rg = self.needs(&[t, f]);
        self.push(
            value,
            Op::Select {
                mask,
                on_true: t,
                on_false: f,
            },
            rg,
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let i = self.check(x);
        let total = self.nodes.borrow()[i].value.data().iter().sum();
        let rg = self.needs(&[i]);
        self.push(Tensor::scalar(total), Op::Sum(i), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value_ref(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let i = self.check(x);
        let value = self.nodes.borrow()[i].value.clone().reshaped(shape);
        let rg = self.needs(&[i]);
        self.push(value, Op::Reshape(i), rg)
    }

    /// `max(x, slope * x)`.
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let scaled = self.scale(x, slope);
        self.max(x, scaled)
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&self, x: Var) -> Var {
        let peak = self
            .value_ref(x)
            .data()
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let shifted = self.affine(x, 1.0, -peak);
        let e = self.exp(shifted);
        let total = self.sum(e);
        // The shifted maximum contributes exp(0) = 1, so the sum is >= 1.
        self.div(e, total).expect("softmax normaliser is at least one")
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (i, j) = (self.check(a), self.check(b));
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[i].value, &nodes[j].value);
            assert!(
                av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[0],
                "matmul: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            );
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (av.data(), bv.data());
            for r in 0..m {
                for p in 0..k {
                    let x = ad[r * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &bd[p * n..(p + 1) * n];
                    for (o, &y) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                        *o += x * y;
                    }
                }
            }
            (Tensor::new(vec![m, n], out), m, k, n)
        };
        let rg = self.needs(&[i, j]);
        self.push(value, Op::MatMul { a: i, b: j, m, k, n }, rg)
    }

    /// 2-D cross-correlation of `input [C, H, W]` with `weight [O, C, K, K]`,
    /// plus an optional per-channel `bias [O]`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Var {
        let (xi, wi) = (self.check(input), self.check(weight));
        let bi = bias.map(|b| self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[xi].value, &nodes[wi].value);
            assert_eq!(x.shape().len(), 3, "conv2d input must be [C, H, W]");
            assert_eq!(w.shape().len(), 4, "conv2d weight must be [O, C, K, K]");
            assert_eq!(x.shape()[0], w.shape()[1], "conv2d channel mismatch");
            assert_eq!(w.shape()[2], w.shape()[3], "conv2d kernel must be square");
            let b = bi.map(|b| nodes[b].value.data().to_vec());
            conv_forward(x, w, b.as_deref(), geom)
        };
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let rg = self.needs(&ids);
        self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            rg,
        )
    }

    /// Trilinear splat of `voxels [N, 4]` rows `(vx, vy, vz, vf)` into a
    /// `[Gz, Gy, Gx]` grid. Rows with `active[i] == false` contribute nothing
    /// and receive zero gradient.
    pub fn splat(&self, voxels: Var, active: Vec<bool>, dims: [usize; 3]) -> Var {
        let vi = self.check(voxels);
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[vi].value;
            assert!(
                v.shape().len() == 2 && v.shape()[1] == 4 && v.shape()[0] == active.len(),
                "splat expects [N, 4] voxels with one mask entry per row"
            );
            let [gz, gy, gx] = dims;
            let mut out = vec![0.0; gz * gy * gx];
            for (row, _) in v.data().chunks_exact(4).zip(&active).filter(|(_, a)| **a) {
                for c in trilinear_corners(row[0], row[1], row[2], dims) {
                    out[c.index] += row[3] * c.weight;
                }
            }
            Tensor::new(vec![gz, gy, gx], out)
        };
        let rg = self.needs(&[vi]);
        self.push(value, Op::Splat { voxels: vi, active, dims }, rg)
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        if !self.contains(root) {
            return Err(DiffError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let r = root.index;
        if nodes[r].value.numel() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: nodes[r].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// One of the eight grid nodes touched by a trilinear splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    /// Flat index into a `[Gz, Gy, Gx]` grid.
    pub index: usize,
    pub weight: f64,
    /// Partial derivatives of `weight` with respect to `(vx, vy, vz)`.
    pub dweight: [f64; 3],
}

/// In-bounds trilinear corners of the continuous point `(vx, vy, vz)`.
pub fn trilinear_corners(vx: f64, vy: f64, vz: f64, dims: [usize; 3]) -> Vec<Corner> {
    let [gz, gy, gx] = dims;
    let axis = |v: f64| {
        let base = v.floor();
        (base as i64, v - base)
    };
    let (x0, fx) = axis(vx);
    let (y0, fy) = axis(vy);
    let (z0, fz) = axis(vz);
    let mut corners = Vec::with_capacity(8);
    for dz in 0..2i64 {
        let z = z0 + dz;
        if z < 0 || z >= gz as i64 {
            continue;
        }
        let (wz, dwz) = if dz == 0 { (1.0 - fz, -1.0) } else { (fz, 1.0) };
        for dy in 0..2i64 {
            let y = y0 + dy;
            if y < 0 || y >= gy as i64 {
                continue;
            }
            let (wy, dwy) = if dy == 0 { (1.0 - fy, -1.0) } else { (fy, 1.0) };
            for dx in 0..2i64 {
                let x = x0 + dx;
                if x < 0 || x >= gx as i64 {
                    continue;
                }
                let (wx, dwx) = if dx == 0 { (1.0 - fx, -1.0) } else { (fx, 1.0) };
                corners.push(Corner {
                    index: (z as usize * gy + y as usize) * gx + x as usize,
                    weight: wx * wy * wz,
                    dweight: [dwx * wy * wz, wx * dwy * wz, wx * wy * dwz],
                });
            }
        }
    }
    corners
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, geom: ConvGeom) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (geom.output_len(h, k), geom.output_len(wd, k));
    let s = geom.stride;
    let mut out = vec![0.0; c_out * ho * wo];
    let (xd, wdata) = (x.data(), w.data());
    for o in 0..c_out {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..c_in {
            let src = &xd[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                let (oy_lo, oy_hi) = geom.valid_range(ky, h, ho);
                for kx in 0..k {
                    let wv = wdata[((o * c_in + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = geom.valid_range(kx, wd, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geom.pad_lo;
                        let row = &src[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * row[ox * s + kx - geom.pad_lo];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.numel();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

/// Adds `g[i] * local(i)` into the gradient of operand `j`, summing when `j`
/// was broadcast from a single element.
fn acc_elementwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if let Some(dst) = accumulate(grads, nodes, j) {
        if dst.len() == 1 && g.len() != 1 {
            dst[0] += g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum::<f64>();
        } else {
            for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += gi * local(i);
            }
        }
    }
}

fn at(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            acc_elementwise(grads, nodes, *a, g, |_| 1.0);
            acc_elementwise(grads, nodes, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            acc_elementwise(grads, nodes, *a, g, |_| 1.0);
            acc_elementwise(grads, nodes, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc_elementwise(grads, nodes, *a, g, |k| at(bv, k));
            acc_elementwise(grads, nodes, *b, g, |k| at(av, k));
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc_elementwise(grads, nodes, *a, g, |k| 1.0 / at(bv, k));
            acc_elementwise(grads, nodes, *b, g, |k| {
                let d = at(bv, k);
                -at(av, k) / (d * d)
            });
        }
        Op::Neg(a) => acc_elementwise(grads, nodes, *a, g, |_| -1.0),
        Op::Affine(a, s) => acc_elementwise(grads, nodes, *a, g, |_| *s),
        Op::Exp(a) => acc_elementwise(grads, nodes, *a, g, |k| out.data()[k]),
        Op::Log(a) => {
            let x = &nodes[*a].value;
            acc_elementwise(grads, nodes, *a, g, |k| 1.0 / x.data()[k]);
        }
        Op::Powf(a, c) => {
            let x = &nodes[*a].value;
            acc_elementwise(grads, nodes, *a, g, |k| {
                if *c == 0.0 {
                    0.0
                } else {
                    c * x.data()[k].powf(c - 1.0)
                }
            });
        }
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            acc_elementwise(grads, nodes, *a, g, |k| {
                let v = x.data()[k];
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Sigmoid(a) => acc_elementwise(grads, nodes, *a, g, |k| {
            let s = out.data()[k];
            s * (1.0 - s)
        }),
        Op::Min(a, b) | Op::Max(a, b) => {
            let first_wins: Box<dyn Fn(f64, f64) -> bool> = match nodes[i].op {
                Op::Min(..) => Box::new(|x, y| x <= y),
                _ => Box::new(|x, y| x >= y),
            };
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let n = g.len();
            let mask: Vec<bool> = (0..n).map(|k| first_wins(at(av, k), at(bv, k))).collect();
            acc_elementwise(grads, nodes, *a, g, |k| if mask[k] { 1.0 } else { 0.0 });
            acc_elementwise(grads, nodes, *b, g, |k| if mask[k] { 0.0 } else { 1.0 });
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[*a].value;
            acc_elementwise(grads, nodes, *a, g, |k| {
                let v = x.data()[k];
                if v >= *lo && v <= *hi {
                    1.0
                } else {
                    0.0
                }
            });
        }
        Op::Select {
            mask,
            on_true,
            on_false,
        } => {
            acc_elementwise(grads, nodes, *on_true, g, |k| if mask[k] { 1.0 } else { 0.0 });
            acc_elementwise(grads, nodes, *on_false, g, |k| if mask[k] { 0.0 } else { 1.0 });
        }
        Op::Sum(a) => {
            if let Some(dst) = accumulate(grads, nodes, *a) {
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Reshape(a) => {
            if let Some(dst) = accumulate(grads, nodes, *a) {
                dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].requires_grad {
                let bd = nodes[*b].value.data().to_vec();
                let dst = accumulate(grads, nodes, *a).unwrap();
                for r in 0..m {
                    for p in 0..k {
                        let row = &bd[p * n..(p + 1) * n];
                        dst[r * k + p] += g[r * n..(r + 1) * n]
                            .iter()
                            .zip(row)
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
            if nodes[*b].requires_grad {
                let ad = nodes[*a].value.data();
                let dst = accumulate(grads, nodes, *b).unwrap();
                for r in 0..m {
                    for p in 0..k {
                        let x = ad[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (d, gi) in dst[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += x * gi;
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => conv_backward(nodes, *input, *weight, *bias, *geom, out.shape(), g, grads),
        Op::Splat {
            voxels,
            active,
            dims,
        } => {
            if let Some(dst) = accumulate(grads, nodes, *voxels) {
                let v = nodes[*voxels].value.data();
                for (r, row) in v.chunks_exact(4).enumerate() {
                    if !active[r] {
                        continue;
                    }
                    for c in trilinear_corners(row[0], row[1], row[2], *dims) {
                        let go = g[c.index];
                        dst[4 * r] += go * row[3] * c.dweight[0];
                        dst[4 * r + 1] += go * row[3] * c.dweight[1];
                        dst[4 * r + 2] += go * row[3] * c.dweight[2];
                        dst[4 * r + 3] += go * c.weight;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    nodes: &[Node],
    input: usize,
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeom,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let x = &nodes[input].value;
    let w = &nodes[weight].value;
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let s = geom.stride;
    let plane = |o: usize| &g[o * ho * wo..(o + 1) * ho * wo];

    if let Some(b) = bias {
        if let Some(dst) = accumulate(grads, nodes, b) {
            for (o, d) in dst.iter_mut().enumerate().take(c_out) {
                *d += plane(o).iter().sum::<f64>();
            }
        }
    }
    if nodes[weight].requires_grad {
        let xd = x.data();
        let dst = accumulate(grads, nodes, weight).unwrap();
        for o in 0..c_out {
            let gp = plane(o);
            for c in 0..c_in {
                let src = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = geom.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = geom.valid_range(kx, wd, wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - geom.pad_lo;
                            let row = &src[iy * wd..(iy + 1) * wd];
                            let grow = &gp[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * row[ox * s + kx - geom.pad_lo];
                            }
                        }
                        dst[((o * c_in + c) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    if nodes[input].requires_grad {
        let wdata = w.data();
        let dst = accumulate(grads, nodes, input).unwrap();
        for o in 0..c_out {
            let gp = plane(o);
            for c in 0..c_in {
                let dplane = &mut dst[c * h * wd..(c + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = geom.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = wdata[((o * c_in + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = geom.valid_range(kx, wd, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - geom.pad_lo;
                            let grow = &gp[oy * wo..(oy + 1) * wo];
                            let drow = &mut dplane[iy * wd..(iy + 1) * wd];
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx - geom.pad_lo] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
