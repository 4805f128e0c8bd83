//! Define-by-run computation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Per-axis interpolation taps: output index -> (low, high, weight of high).
#[derive(Clone, Debug)]
struct AxisTaps(Vec<(usize, usize, f64)>);

impl AxisTaps {
    /// Half-pixel (align-corners = false) sampling, clamped at the borders.
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                let frac = if hi == lo { 0.0 } else { src - lo as f64 };
                (lo, hi, frac)
            })
            .collect();
        AxisTaps(taps)
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Resize {
        input: Var,
        rows: AxisTaps,
        cols: AxisTaps,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Log {
        input: Var,
        floor: f64,
    },
    ClampMin {
        input: Var,
        floor: f64,
    },
    Pow {
        input: Var,
        exponent: f64,
    },
    Sum(Var),
    Mean(Var),
    NormRows(Var),
    Take {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitives as they are evaluated; see module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Dimension(format!("{what} expects an NCHW tensor, got {s:?}"))),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ky as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn make(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Adds a leaf; it participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let needs = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.push(value, Op::Leaf, needs, "leaf")
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// 2-D convolution of an NCHW input with an OIKK kernel and optional
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, in_ch, h, w) = dims4(self.value(input), "conv2d input")?;
        let (out_ch, w_in, kh, kw) = dims4(self.value(weight), "conv2d weight")?;
        if w_in != in_ch {
            return Err(Error::Dimension(format!(
                "conv2d input has {in_ch} channels but weight expects {w_in}"
            )));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [out_ch] {
                return Err(Error::Dimension(format!(
                    "conv2d bias shape {:?} does not match {out_ch} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            k,
            stride,
            padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; batch * rows * ncols];
        let mut out = vec![0.0; batch * out_ch * ncols];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for b in 0..batch {
            let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
            im2col(&x[b * in_ch * h * w..(b + 1) * in_ch * h * w], &geom, col);
            let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
            gemm(out_ch, rows, ncols, wt, Layout::Normal, col, Layout::Normal, 0.0, dst);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[o]);
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = self.make(vec![batch, out_ch, geom.oh, geom.ow], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            needs,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs, "sigmoid")
    }

    /// Bilinear resize of an NCHW tensor using half-pixel sampling.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension(format!(
                "bilinear resize target must be non-empty, got {out_h}x{out_w}"
            )));
        }
        let (n, c, h, w) = dims4(self.value(x), "resize_bilinear")?;
        let rows = AxisTaps::new(h, out_h);
        let cols = AxisTaps::new(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for (oy, &(y0, y1, fy)) in rows.0.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.0.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = self.make(vec![n, c, out_h, out_w], out);
        let needs = self.needs(x);
        self.push(value, Op::Resize { input: x, rows, cols }, needs, "resize_bilinear")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = self.make(self.value(a).shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.affine(b, -1.0, 0.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = self.make(self.value(a).shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs, "mul")
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Affine { input: x, scale }, needs, "affine")
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n, _, h, w) = dims4(self.value(first), "concat")?;
        let mut total = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = dims4(self.value(v), "concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Dimension(format!(
                    "concat expects matching N, H, W; got {:?} and {:?}",
                    self.value(first).shape(),
                    self.value(v).shape()
                )));
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = self.make(vec![n, total, h, w], out);
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
            "concat",
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = self.make(t.shape().to_vec(), out);
        let needs = self.needs(x);
        self.push(value, Op::Softmax { input: x, axis }, needs, "softmax")
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(floor).ln()).collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Log { input: x, floor }, needs, "log")
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(floor)).collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::ClampMin { input: x, floor }, needs, "clamp_min")
    }

    /// Elementwise power with a fixed exponent.
    pub fn powf(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.powf(exponent)).collect();
        let value = self.make(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Pow { input: x, exponent }, needs, "pow")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs, "mean")
    }

    /// Euclidean norm over the last axis; the result has one entry per row.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().expect("non-empty shape");
        let data: Vec<f64> = t
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rows = data.len();
        let value = self.make(vec![rows], data);
        let needs = self.needs(x);
        self.push(value, Op::NormRows(x), needs, "norm_rows")
    }

    /// Gathers flat elements: `out[i] = x[indices[i]]`, reshaped to `shape`.
    pub fn take(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Dimension(format!(
                "take index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(value, Op::Take { input: x, indices }, needs, "take")
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [_, d] = shape[..] else {
            return Err(Error::Dimension(format!("take_rows expects 2-D, got {shape:?}")));
        };
        let indices = rows.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
        self.take(x, indices, vec![rows.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs, "reshape")
    }

    /// Reverse sweep from a one-element `loss`; gradients land in [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_plane = geom.in_ch * geom.h * geom.w;
                let out_plane = geom.out_ch * ncols;
                acc(*weight, &mut |dw| {
                    for b in 0..geom.batch {
                        let gb = &g[b * out_plane..(b + 1) * out_plane];
                        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                        gemm(geom.out_ch, ncols, rows, gb, Layout::Normal, col, Layout::Transposed, 1.0, dw);
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |db| {
                        for b in 0..geom.batch {
                            let gb = &g[b * out_plane..(b + 1) * out_plane];
                            for (o, chunk) in gb.chunks(ncols).enumerate() {
                                db[o] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let wt = self.nodes[weight.0].value.data();
                acc(*input, &mut |dx| {
                    let mut dcol = vec![0.0; rows * ncols];
                    for b in 0..geom.batch {
                        let gb = &g[b * out_plane..(b + 1) * out_plane];
                        gemm(rows, geom.out_ch, ncols, wt, Layout::Transposed, gb, Layout::Normal, 0.0, &mut dcol);
                        col2im_add(&dcol, geom, &mut dx[b * in_plane..(b + 1) * in_plane]);
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |dx| {
                for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                    if o > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |dx| {
                for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * o * (1.0 - o);
                }
            }),
            Op::Resize { input, rows, cols } => {
                let shape = self.nodes[input.0].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (rows.0.len(), cols.0.len());
                acc(*input, &mut |dx| {
                    for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for (oy, &(y0, y1, fy)) in rows.0.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in cols.0.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |dx| {
                    for ((d, gi), o) in dx.iter_mut().zip(g).zip(bv) {
                        *d += gi * o;
                    }
                });
                acc(*b, &mut |dx| {
                    for ((d, gi), o) in dx.iter_mut().zip(g).zip(av) {
                        *d += gi * o;
                    }
                });
            }
            Op::Affine { input, scale } => acc(*input, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi);
            }),
            Op::Concat { inputs } => {
                let shape = node.value.shape();
                let (n, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.nodes[v.0].value.shape()[1];
                    acc(v, &mut |dx| {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            let dst = &mut dx[b * c * plane..(b + 1) * c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += c;
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*input, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Log { input, floor } => {
                let xv = self.nodes[input.0].value.data();
                acc(*input, &mut |dx| {
                    for ((d, gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                        if x > *floor {
                            *d += gi / x;
                        }
                    }
                });
            }
            Op::ClampMin { input, floor } => {
                let xv = self.nodes[input.0].value.data();
                acc(*input, &mut |dx| {
                    for ((d, gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                        if x > *floor {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Pow { input, exponent } => {
                let xv = self.nodes[input.0].value.data();
                acc(*input, &mut |dx| {
                    for ((d, gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * exponent * x.powf(exponent - 1.0);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::NormRows(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = xv.len() / out.len();
                acc(*x, &mut |dx| {
                    for (r, (&norm, &gr)) in out.iter().zip(g).enumerate() {
                        if norm > 0.0 {
                            for c in r * d..(r + 1) * d {
                                dx[c] += gr * xv[c] / norm;
                            }
                        }
                    }
                });
            }
            Op::Take { input, indices } => acc(*input, &mut |dx| {
                for (&i, gi) in indices.iter().zip(g) {
                    dx[i] += gi;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)),
        }
    }
}
