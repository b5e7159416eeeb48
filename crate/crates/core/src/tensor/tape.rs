use std::borrow::Cow;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the supplied running statistics.
    Infer,
}

/// Per-feature batch statistics seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeometry,
        out_ch: usize,
        cols: Vec<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPoolPoints {
        x: Var,
        argmax: Vec<usize>,
    },
    Huber {
        pred: Var,
        residual: Vec<f64>,
        delta: f64,
    },
    SumSquares(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    RigidApply {
        x: Var,
        rot: [f64; 9],
    },
    Project {
        x: Var,
        fx: f64,
        fy: f64,
        z_min: f64,
    },
    DepthPenalty {
        x: Var,
        z_min: f64,
    },
    BBox {
        x: Var,
        arg: [usize; 4],
    },
    Chamfer2 {
        pred: Var,
        target: Vec<[f64; 2]>,
        nearest: Vec<usize>,
        nearest_rev: Vec<usize>,
    },
    Chamfer3 {
        pred: Var,
        label: Vec<[f64; 3]>,
        nearest_rev: Vec<usize>,
        unit: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// Parameters are borrowed for `'p`, so binding a large [`super::ParamSet`]
/// costs nothing.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when the loss does not
    /// depend on it through any differentiable path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref other => Err(shape_err(op, other, &[0, 0])),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("add_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::AddConst(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat"))?;
        let (rows, _) = matrix_dims("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            if r != rows {
                return Err(shape_err("concat", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            rows,
        };
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            op,
            needs,
        ))
    }

    /// `x W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, inp) = matrix_dims("dense", self.value(x))?;
        let (wi, out) = matrix_dims("dense", self.value(w))?;
        if wi != inp {
            return Err(shape_err("dense", self.value(x).shape(), self.value(w).shape()));
        }
        if self.value(b).shape() != [out] {
            return Err(shape_err("dense bias", self.value(b).shape(), &[out]));
        }
        let y = kernels::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            inp,
            out,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, out],
                data: y,
            },
            Op::Dense { x, w, b },
            needs,
        ))
    }

    /// Zero-padded 2D convolution, `x: [N, C, H, W]`, `k: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = match *self.value(x).shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d input", self.value(x).shape(), &[0, 0, 0, 0])),
        };
        let (o, kc, kh, kw) = match *self.value(k).shape() {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => return Err(shape_err("conv2d kernel", self.value(k).shape(), &[0, 0, 0, 0])),
        };
        if kc != c || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", self.value(x).shape(), self.value(k).shape()));
        }
        if self.value(b).shape() != [o] {
            return Err(shape_err("conv2d bias", self.value(b).shape(), &[o]));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
        };
        let (patch, positions) = (geom.patch(), geom.positions());
        let img = c * h * w;
        let xd = self.value(x).data();
        let (kd, bd) = (self.value(k).data(), self.value(b).data());
        let mut cols = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * o * positions);
        for i in 0..n {
            let col = kernels::im2col(&xd[i * img..(i + 1) * img], &geom);
            out.extend(kernels::conv_forward(&col, kd, bd, o, patch, positions));
            cols.push(col);
        }
        let needs = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, o, geom.out_height(), geom.out_width()],
                data: out,
            },
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                out_ch: o,
                cols,
            },
            needs,
        ))
    }

    /// Batch normalization over the rows of `x: [N, F]`.
    ///
    /// In `Train` mode the batch statistics are used and returned so the
    /// caller can update its running averages; in `Infer` mode the supplied
    /// `running` statistics are used and nothing is mutated.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, f) = matrix_dims("batchnorm", self.value(x))?;
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(shape_err("batchnorm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n == 0 {
                    return Err(Error::EmptyInput("batchnorm batch"));
                }
                let mut mean = vec![0.0; f];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(&xd[r * f..(r + 1) * f]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(&xd[r * f..(r + 1) * f]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Infer => {
                let (m, v) = running.ok_or_else(|| Error::config("batchnorm", "infer mode needs running statistics"))?;
                if m.len() != f || v.len() != f {
                    return Err(shape_err("batchnorm running stats", &[m.len()], &[f]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * f];
        let mut y = vec![0.0; n * f];
        for r in 0..n {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                y[r * f + j] = g[j] * h + be[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            Tensor {
                shape: vec![n, f],
                data: y,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
            needs,
        );
        Ok((var_out, stats))
    }

    /// Max over the point axis: `[B, K, F] -> [B, F]`.
    pub fn maxpool_points(&mut self, x: Var) -> Result<Var> {
        let (b, k, f) = match *self.value(x).shape() {
            [b, k, f] => (b, k, f),
            _ => return Err(shape_err("maxpool_points", self.value(x).shape(), &[0, 0, 0])),
        };
        if k == 0 {
            return Err(Error::EmptyInput("maxpool over zero points"));
        }
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * f];
        let mut argmax = vec![0usize; b * f];
        for bi in 0..b {
            for ki in 0..k {
                let row = &xd[(bi * k + ki) * f..(bi * k + ki + 1) * f];
                for j in 0..f {
                    if row[j] > out[bi * f + j] {
                        out[bi * f + j] = row[j];
                        argmax[bi * f + j] = ki;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, f],
                data: out,
            },
            Op::MaxPoolPoints { x, argmax },
            needs,
        ))
    }

    /// Summed Huber loss of `pred` against a constant target.
    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("huber", p.shape(), &[target.len()]));
        }
        let residual: Vec<f64> = p.data().iter().zip(target).map(|(a, b)| a - b).collect();
        let loss = residual.iter().map(|&r| huber_value(r, delta)).sum();
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Huber {
                pred,
                residual,
                delta,
            },
            needs,
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), needs)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce", pv.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Applies a fixed rotation and translation to the rows of `x: [K, 3]`.
    pub fn rigid_apply(&mut self, x: Var, rot: &[f64; 9], trans: &[f64; 3]) -> Result<Var> {
        let (k, c) = matrix_dims("rigid_apply", self.value(x))?;
        if c != 3 {
            return Err(shape_err("rigid_apply", self.value(x).shape(), &[k, 3]));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; k * 3];
        for i in 0..k {
            let p = &xd[i * 3..i * 3 + 3];
            for r in 0..3 {
                out[i * 3 + r] = rot[r * 3] * p[0] + rot[r * 3 + 1] * p[1] + rot[r * 3 + 2] * p[2] + trans[r];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![k, 3],
                data: out,
            },
            Op::RigidApply { x, rot: *rot },
            needs,
        ))
    }

    /// Pinhole projection of `x: [K, 3]` to `[K, 2]` with depth clamped
    /// below at `z_min`. The clamp has zero gradient; pair it with
    /// [`Tape::depth_penalty`].
    pub fn project(&mut self, x: Var, fx: f64, fy: f64, cx: f64, cy: f64, z_min: f64) -> Result<Var> {
        let (k, c) = matrix_dims("project", self.value(x))?;
        if c != 3 {
            return Err(shape_err("project", self.value(x).shape(), &[k, 3]));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; k * 2];
        for i in 0..k {
            let z = xd[i * 3 + 2].max(z_min);
            out[i * 2] = fx * xd[i * 3] / z + cx;
            out[i * 2 + 1] = fy * xd[i * 3 + 1] / z + cy;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![k, 2],
                data: out,
            },
            Op::Project { x, fx, fy, z_min },
            needs,
        ))
    }

    /// `sum_k max(0, z_min - z_k)^2` over the rows of `x: [K, 3]`.
    pub fn depth_penalty(&mut self, x: Var, z_min: f64) -> Result<Var> {
        let (_, c) = matrix_dims("depth_penalty", self.value(x))?;
        if c != 3 {
            return Err(shape_err("depth_penalty", self.value(x).shape(), &[0, 3]));
        }
        let s = self
            .value(x)
            .data()
            .chunks_exact(3)
            .map(|p| (z_min - p[2]).max(0.0).powi(2))
            .sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::DepthPenalty { x, z_min }, needs))
    }

    /// Tight box `(u_mid, v_mid, w, h)` of `x: [K, 2]`. Gradients flow to
    /// the extremal points only (first index wins ties).
    pub fn tight_bbox(&mut self, x: Var) -> Result<Var> {
        let (k, c) = matrix_dims("tight_bbox", self.value(x))?;
        if c != 2 {
            return Err(shape_err("tight_bbox", self.value(x).shape(), &[k, 2]));
        }
        if k == 0 {
            return Err(Error::EmptyInput("tight_bbox"));
        }
        let xd = self.value(x).data();
        let mut arg = [0usize; 4];
        for i in 1..k {
            if xd[i * 2] < xd[arg[0] * 2] {
                arg[0] = i;
            }
            if xd[i * 2] > xd[arg[1] * 2] {
                arg[1] = i;
            }
            if xd[i * 2 + 1] < xd[arg[2] * 2 + 1] {
                arg[2] = i;
            }
            if xd[i * 2 + 1] > xd[arg[3] * 2 + 1] {
                arg[3] = i;
            }
        }
        let (u0, u1) = (xd[arg[0] * 2], xd[arg[1] * 2]);
        let (v0, v1) = (xd[arg[2] * 2 + 1], xd[arg[3] * 2 + 1]);
        let value = Tensor::vector(vec![0.5 * (u0 + u1), 0.5 * (v0 + v1), u1 - u0, v1 - v0]);
        let needs = self.needs(x);
        Ok(self.push(value, Op::BBox { x, arg }, needs))
    }

    /// Symmetric 2D Chamfer distance between `pred: [K, 2]` and a constant
    /// target set: mean nearest distance in both directions.
    pub fn chamfer2d(&mut self, pred: Var, target: &[[f64; 2]]) -> Result<Var> {
        let (k, c) = matrix_dims("chamfer2d", self.value(pred))?;
        if c != 2 {
            return Err(shape_err("chamfer2d", self.value(pred).shape(), &[k, 2]));
        }
        if k == 0 || target.is_empty() {
            return Err(Error::EmptyInput("chamfer2d"));
        }
        let pd = self.value(pred).data();
        let m = target.len();
        let mut best = vec![f64::INFINITY; k];
        let mut nearest = vec![0usize; k];
        let mut best_rev = vec![f64::INFINITY; m];
        let mut nearest_rev = vec![0usize; m];
        for i in 0..k {
            let (pu, pv) = (pd[i * 2], pd[i * 2 + 1]);
            for (j, q) in target.iter().enumerate() {
                let d2 = (pu - q[0]) * (pu - q[0]) + (pv - q[1]) * (pv - q[1]);
                if d2 < best[i] {
                    best[i] = d2;
                    nearest[i] = j;
                }
                if d2 < best_rev[j] {
                    best_rev[j] = d2;
                    nearest_rev[j] = i;
                }
            }
        }
        let loss = best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
            + best_rev.iter().map(|d| d.sqrt()).sum::<f64>() / m as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer2 {
                pred,
                target: target.to_vec(),
                nearest,
                nearest_rev,
            },
            needs,
        ))
    }

    /// One-sided 3D Chamfer from a constant label set to `pred: [K, 3]`:
    /// mean over labels of the distance to the nearest prediction, divided
    /// by `unit`.
    pub fn chamfer3d_from_labels(&mut self, pred: Var, label: &[[f64; 3]], unit: f64) -> Result<Var> {
        let (k, c) = matrix_dims("chamfer3d", self.value(pred))?;
        if c != 3 {
            return Err(shape_err("chamfer3d", self.value(pred).shape(), &[k, 3]));
        }
        if k == 0 || label.is_empty() {
            return Err(Error::EmptyInput("chamfer3d"));
        }
        let pd = self.value(pred).data();
        let mut nearest_rev = vec![0usize; label.len()];
        let mut total = 0.0;
        for (j, l) in label.iter().enumerate() {
            let mut best = f64::INFINITY;
            for i in 0..k {
                let d2 = (pd[i * 3] - l[0]).powi(2) + (pd[i * 3 + 1] - l[1]).powi(2) + (pd[i * 3 + 2] - l[2]).powi(2);
                if d2 < best {
                    best = d2;
                    nearest_rev[j] = i;
                }
            }
            total += best.sqrt();
        }
        let loss = total / label.len() as f64 / unit;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer3 {
                pred,
                label: label.to_vec(),
                nearest_rev,
                unit,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Rank {
                expected: 0,
                found: lv.shape().to_vec(),
            });
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(root).len() {
            return Err(shape_err("backward seed", &[seed.len()], self.value(root).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| c * v).collect()),
            Op::AddConst(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Relu(a) => {
                let out = node.value.data();
                let d = g.iter().zip(out).map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let d = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[1];
                if self.needs(*x) {
                    self.accumulate(grads, *x, kernels::dense_grad_input(g, wv.data(), n, inp, out));
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, kernels::dense_grad_weight(xv.data(), g, n, inp, out));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::column_sums(g, n, out));
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                out_ch,
                cols,
            } => {
                let (patch, positions) = (geom.patch(), geom.positions());
                let n = cols.len();
                let per_out = out_ch * positions;
                if self.needs(*k) {
                    let mut dk = vec![0.0; out_ch * patch];
                    for (i, col) in cols.iter().enumerate() {
                        kernels::conv_grad_kernel(col, &g[i * per_out..(i + 1) * per_out], &mut dk, *out_ch, patch, positions);
                    }
                    self.accumulate(grads, *k, dk);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; *out_ch];
                    for i in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[i * per_out + o * positions..i * per_out + (o + 1) * positions].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                if self.needs(*x) {
                    let kd = self.value(*k).data();
                    let mut dx = Vec::with_capacity(n * geom.channels * geom.height * geom.width);
                    for i in 0..n {
                        let dcol = kernels::conv_grad_col(kd, &g[i * per_out..(i + 1) * per_out], *out_ch, patch, positions);
                        dx.extend(kernels::col2im(&dcol, geom));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        dgamma[j] += g[r * f + j] * xhat[r * f + j];
                        dbeta[j] += g[r * f + j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * f];
                    for r in 0..n {
                        for j in 0..f {
                            dx[r * f + j] = if *batch_stats {
                                gv[j] * inv_std[j] / n as f64
                                    * (n as f64 * g[r * f + j] - dbeta[j] - xhat[r * f + j] * dgamma[j])
                            } else {
                                gv[j] * inv_std[j] * g[r * f + j]
                            };
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MaxPoolPoints { x, argmax } => {
                let shape = self.value(*x).shape();
                let (b, k, f) = (shape[0], shape[1], shape[2]);
                let mut d = vec![0.0; b * k * f];
                for bi in 0..b {
                    for j in 0..f {
                        d[(bi * k + argmax[bi * f + j]) * f + j] += g[bi * f + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Huber { pred, residual, delta } => {
                let d = residual.iter().map(|&r| g[0] * huber_slope(r, *delta)).collect();
                self.accumulate(grads, *pred, d);
            }
            Op::SumSquares(a) => {
                let d = self.value(*a).data().iter().map(|v| 2.0 * v * g[0]).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Bce { p, labels } => {
                let n = labels.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if q <= BCE_CLAMP || q >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            g[0] * (q - y) / (q * (1.0 - q)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, d);
            }
            Op::RigidApply { x, rot } => {
                let k = g.len() / 3;
                let mut d = vec![0.0; k * 3];
                for i in 0..k {
                    for c in 0..3 {
                        d[i * 3 + c] = rot[c] * g[i * 3] + rot[3 + c] * g[i * 3 + 1] + rot[6 + c] * g[i * 3 + 2];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Project { x, fx, fy, z_min } => {
                let xd = self.value(*x).data();
                let k = xd.len() / 3;
                let mut d = vec![0.0; k * 3];
                for i in 0..k {
                    let (px, py, pz) = (xd[i * 3], xd[i * 3 + 1], xd[i * 3 + 2]);
                    let (gu, gv) = (g[i * 2], g[i * 2 + 1]);
                    let z = pz.max(*z_min);
                    d[i * 3] = gu * fx / z;
                    d[i * 3 + 1] = gv * fy / z;
                    if pz > *z_min {
                        d[i * 3 + 2] = -(gu * fx * px + gv * fy * py) / (z * z);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::DepthPenalty { x, z_min } => {
                let d = self
                    .value(*x)
                    .data()
                    .chunks_exact(3)
                    .flat_map(|p| {
                        let gap = (z_min - p[2]).max(0.0);
                        [0.0, 0.0, -2.0 * gap * g[0]]
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::BBox { x, arg } => {
                let k = self.value(*x).shape()[0];
                let mut d = vec![0.0; k * 2];
                // u_mid = (u1 + u0) / 2, w = u1 - u0; same for v
                d[arg[0] * 2] += 0.5 * g[0] - g[2];
                d[arg[1] * 2] += 0.5 * g[0] + g[2];
                d[arg[2] * 2 + 1] += 0.5 * g[1] - g[3];
                d[arg[3] * 2 + 1] += 0.5 * g[1] + g[3];
                self.accumulate(grads, *x, d);
            }
            Op::Chamfer2 {
                pred,
                target,
                nearest,
                nearest_rev,
            } => {
                let pd = self.value(*pred).data();
                let k = nearest.len();
                let m = target.len();
                let mut d = vec![0.0; k * 2];
                let mut pull = |i: usize, q: &[f64; 2], w: f64| {
                    let (du, dv) = (pd[i * 2] - q[0], pd[i * 2 + 1] - q[1]);
                    let dist = (du * du + dv * dv).sqrt();
                    if dist > 0.0 {
                        d[i * 2] += w * du / dist;
                        d[i * 2 + 1] += w * dv / dist;
                    }
                };
                for i in 0..k {
                    pull(i, &target[nearest[i]], g[0] / k as f64);
                }
                for (j, q) in target.iter().enumerate() {
                    pull(nearest_rev[j], q, g[0] / m as f64);
                }
                self.accumulate(grads, *pred, d);
            }
            Op::Chamfer3 {
                pred,
                label,
                nearest_rev,
                unit,
            } => {
                let pd = self.value(*pred).data();
                let k = pd.len() / 3;
                let w = g[0] / label.len() as f64 / unit;
                let mut d = vec![0.0; k * 3];
                for (j, l) in label.iter().enumerate() {
                    let i = nearest_rev[j];
                    let diff = [pd[i * 3] - l[0], pd[i * 3 + 1] - l[1], pd[i * 3 + 2] - l[2]];
                    let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                    if dist > 0.0 {
                        for c in 0..3 {
                            d[i * 3 + c] += w * diff[c] / dist;
                        }
                    }
                }
                self.accumulate(grads, *pred, d);
            }
        }
    }
}

const BCE_CLAMP: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `r^2 / 2` inside `[-delta, delta]`, `delta (|r| - delta / 2)` outside.
pub fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_slope(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn huber_examples() {
        let mut tape = Tape::new();
        let p = tape.variable(Tensor::vector(vec![1.5, -2.0]));
        let zero = tape.huber(p, &[1.5, -2.0], 1.0).unwrap();
        assert_eq!(tape.value(zero).item().unwrap(), 0.0);
        let q = tape.variable(Tensor::vector(vec![3.0]));
        let l = tape.huber(q, &[0.0], 1.0).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.5);
    }

    #[test]
    fn sum_of_linear_map_gradient() {
        // loss = sum(x W) => dW[i, o] = sum_n x[n, i]
        let w = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let y = tape.dense(x, wv, bv).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
        assert_eq!(grads.get(bv).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let unused = Tensor::vector(vec![3.0]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let uv = tape.param(&unused);
        let loss = tape.sum_squares(av);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(uv).is_none());
        assert_eq!(grads.get(av).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rank_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::zeros(&[2, 3]));
        let b = tape.variable(Tensor::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
        let w = tape.variable(Tensor::zeros(&[4, 2]));
        let bias = tape.variable(Tensor::zeros(&[2]));
        assert!(tape.dense(a, w, bias).is_err());
    }

    #[test]
    fn reused_node_accumulates_each_use() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn infer_batchnorm_uses_running_stats() {
        let gamma = Tensor::vector(vec![2.0]);
        let beta = Tensor::vector(vec![1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        let g = tape.param(&gamma);
        let b = tape.param(&beta);
        let (y, stats) = tape
            .batchnorm(x, g, b, BatchNormMode::Infer, Some((&[1.0], &[4.0 - BN_EPS])))
            .unwrap();
        assert!(stats.is_none());
        let out = tape.value(y).data();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_is_order_free() {
        let data = vec![1.0, 5.0, 3.0, 2.0, 2.0, 7.0];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 3, 2], data).unwrap());
        let m = tape.maxpool_points(a).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 7.0]);
        let swapped = vec![2.0, 7.0, 3.0, 2.0, 1.0, 5.0];
        let b = tape.constant(Tensor::new(vec![1, 3, 2], swapped).unwrap());
        let n = tape.maxpool_points(b).unwrap();
        assert_eq!(tape.value(n).data(), tape.value(m).data());
    }
}
