//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep.

use rand::Rng;

use super::tensor::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BatchNormState<F> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: F::c(Self::DEFAULT_MOMENTUM),
            eps: F::c(Self::DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointLoss<F> {
    Mse,
    Mae,
    SmoothL1 { beta: F },
}

enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Gelu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch: usize,
        channels: usize,
        len: usize,
        train: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    PadEnd {
        x: Var,
        len: usize,
        count: usize,
    },
    Unfold {
        x: Var,
        len: usize,
        size: usize,
        step: usize,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    RowAffine {
        x: Var,
        scale: Vec<F>,
    },
    Loss {
        pred: Var,
        target: Vec<F>,
        kind: PointLoss<F>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    lin: usize,
    cout: usize,
    lout: usize,
    k: usize,
    stride: usize,
    groups: usize,
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "grouped_conv1d",
            Op::Gelu { .. } => "gelu",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::PadEnd { .. } => "pad_end",
            Op::Unfold { .. } => "unfold",
            Op::Dropout { .. } => "dropout",
            Op::RowAffine { .. } => "row_affine",
            Op::Loss { .. } => "loss",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b, .. } | Op::Conv1d { x, w, b, .. } => {
                let mut p = vec![x, w];
                p.extend(b);
                p
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Gelu { x }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::PadEnd { x, .. }
            | Op::Unfold { x, .. }
            | Op::Dropout { x, .. }
            | Op::RowAffine { x, .. } => vec![x],
            Op::Loss { pred, .. } => vec![pred],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-threaded computation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; zeros if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `y = x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (inp, out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.nodes[x.0].value.numel() / inp;
        let mut y = vec![F::zero(); rows * out];
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for r in y.chunks_exact_mut(out) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::row_major(self.nodes[x.0].value.data(), rows, inp),
            MatRef::row_major(self.nodes[w.0].value.data(), inp, out),
            &mut y,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Grouped 1-d cross-correlation over `[B, C, L]` (or `[C, L]`) input
    /// with kernels `[C_out, C_in / groups, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, lin) = match xs[..] {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => {
                return Err(Error::Shape {
                    op: "grouped_conv1d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        if ws.len() != 3 {
            return Err(Error::Shape {
                op: "grouped_conv1d kernel",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Grouping {
                channels: cin,
                groups,
            });
        }
        if cin_g != cin / groups {
            return Err(Error::Shape {
                op: "grouped_conv1d kernel",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidTensor("conv stride must be >= 1".into()));
        }
        if lin < k {
            return Err(Error::InputShorterThanKernel { len: lin, kernel: k });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape {
                    op: "grouped_conv1d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let lout = (lin - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            cin,
            lin,
            cout,
            lout,
            k,
            stride,
            groups,
        };
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = b.map(|b| self.nodes[b.0].value.data());
        let cout_g = cout / groups;
        let mut y = vec![F::zero(); batch * cout * lout];
        for bi in 0..batch {
            for o in 0..cout {
                let g = o / cout_g;
                let bias = bd.map_or(F::zero(), |bd| bd[o]);
                let yrow = &mut y[(bi * cout + o) * lout..][..lout];
                yrow.iter_mut().for_each(|v| *v = bias);
                for ci in 0..cin_g {
                    let xrow = &xd[(bi * cin + g * cin_g + ci) * lin..][..lin];
                    let kern = &wd[(o * cin_g + ci) * k..][..k];
                    for (t, yv) in yrow.iter_mut().enumerate() {
                        let win = &xrow[t * stride..t * stride + k];
                        let mut acc = F::zero();
                        for (a, b) in win.iter().zip(kern) {
                            acc = acc + *a * *b;
                        }
                        *yv = *yv + acc;
                    }
                }
            }
        }
        let shape = if xs.len() == 2 {
            vec![cout, lout]
        } else {
            vec![batch, cout, lout]
        };
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(gelu_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(y, Op::Gelu { x }, rg)
    }

    /// Batch normalization of `[B, C, L]` per channel `C`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<F>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, channels, len] = xs[..] else {
            return Err(Error::Shape {
                op: "batchnorm1d",
                lhs: xs,
                rhs: vec![],
            });
        };
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::Shape {
                    op: "batchnorm1d params",
                    lhs: xs,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if state.channels() != channels {
            return Err(Error::Shape {
                op: "batchnorm1d state",
                lhs: xs,
                rhs: vec![state.channels()],
            });
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let n = batch * len;
        let nf = F::c(n as f64);
        let train = mode == Mode::Train;
        let mut inv_std = vec![F::zero(); channels];
        let mut xhat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        for c in 0..channels {
            let idx = |bi: usize, l: usize| (bi * channels + c) * len + l;
            let (mean, var) = if train {
                let mut sum = F::zero();
                for bi in 0..batch {
                    for l in 0..len {
                        sum = sum + xd[idx(bi, l)];
                    }
                }
                let mean = sum / nf;
                let mut sq = F::zero();
                for bi in 0..batch {
                    for l in 0..len {
                        let d = xd[idx(bi, l)] - mean;
                        sq = sq + d * d;
                    }
                }
                let var = sq / nf;
                let unbiased = if n > 1 {
                    sq / F::c((n - 1) as f64)
                } else {
                    var
                };
                let m = state.momentum;
                state.running_mean[c] = (F::one() - m) * state.running_mean[c] + m * mean;
                state.running_var[c] = (F::one() - m) * state.running_var[c] + m * unbiased;
                (mean, var)
            } else {
                (state.running_mean[c], state.running_var[c])
            };
            let is = F::one() / (var + state.eps).sqrt();
            inv_std[c] = is;
            for bi in 0..batch {
                for l in 0..len {
                    let i = idx(bi, l);
                    let h = (xd[i] - mean) * is;
                    xhat[i] = h;
                    y[i] = gd[c] * h + bd[c];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                channels,
                len,
                train,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), |x, y| {
            x + y
        });
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), |x, y| {
            x * y
        });
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Appends `count` copies of the last element along the last axis.
    pub fn pad_end(&mut self, x: Var, count: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().unwrap();
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(src.len() / len * (len + count));
        for row in src.chunks_exact(len) {
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(row[len - 1]).take(count));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len + count;
        let rg = self.nodes[x.0].requires_grad;
        let t = Tensor::new(shape, out).expect("padded shape is consistent");
        self.push(t, Op::PadEnd { x, len, count }, rg)
    }

    /// Sliding windows of `size` with `step` over the last axis:
    /// `[..., len] -> [..., count, size]`.
    pub fn unfold(&mut self, x: Var, size: usize, step: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().unwrap();
        if size == 0 || step == 0 || size > len {
            return Err(Error::Patching(format!(
                "cannot unfold length {len} with window {size} and step {step}"
            )));
        }
        let count = (len - size) / step + 1;
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(src.len() / len * count * size);
        for row in src.chunks_exact(len) {
            for i in 0..count {
                out.extend_from_slice(&row[i * step..i * step + size]);
            }
        }
        let mut shape = xs;
        shape.pop();
        shape.extend([count, size]);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Unfold {
                x,
                len,
                size,
                step,
                count,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::c(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[x.0].value.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = zip_map(self.nodes[x.0].value.data(), &mask, |a, m| a * m);
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// `y[r, :] = x[r, :] * scale[r] + shift[r]` with constant coefficients.
    pub fn row_affine(&mut self, x: Var, scale: &[F], shift: &[F]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs[0] != scale.len() || xs[0] != shift.len() {
            return Err(Error::Shape {
                op: "row_affine",
                lhs: xs,
                rhs: vec![scale.len(), shift.len()],
            });
        }
        let src = self.nodes[x.0].value.data();
        let width = src.len() / xs[0];
        let mut out = Vec::with_capacity(src.len());
        for (r, row) in src.chunks_exact(width).enumerate() {
            out.extend(row.iter().map(|&v| v * scale[r] + shift[r]));
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Mean pointwise loss against a constant target.
    pub fn point_loss(&mut self, pred: Var, target: &Tensor<F>, kind: PointLoss<F>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Shape {
                op: "loss",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let p = self.nodes[pred.0].value.data();
        let n = F::c(p.len() as f64);
        let total: F = p
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| point_loss_value(a - b, kind))
            .sum();
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Loss {
                pred,
                target: target.data().to_vec(),
                kind,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Accumulates `d root / d node` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => {
                    node.grad =
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                if let Some(dx) = slot(nodes, adj, x) {
                    gemm(
                        MatRef::row_major(g, rows, out),
                        MatRef::transposed(wd, out, inp),
                        dx,
                        true,
                    );
                }
                if let Some(dw) = slot(nodes, adj, w) {
                    gemm(
                        MatRef::transposed(xd, inp, rows),
                        MatRef::row_major(g, rows, out),
                        dw,
                        true,
                    );
                }
                if let Some(db) = b.and_then(|b| slot(nodes, adj, b)) {
                    for r in g.chunks_exact(out) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d = *d + v;
                        }
                    }
                }
            }
            &Op::Conv1d { x, w, b, geom } => {
                let ConvGeom {
                    batch,
                    cin,
                    lin,
                    cout,
                    lout,
                    k,
                    stride,
                    groups,
                } = geom;
                let cin_g = cin / groups;
                let cout_g = cout / groups;
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                if let Some(dx) = slot(nodes, adj, x) {
                    for bi in 0..batch {
                        for o in 0..cout {
                            let grp = o / cout_g;
                            let grow = &g[(bi * cout + o) * lout..][..lout];
                            for ci in 0..cin_g {
                                let kern = &wd[(o * cin_g + ci) * k..][..k];
                                let dxrow = &mut dx[(bi * cin + grp * cin_g + ci) * lin..][..lin];
                                for (t, &gv) in grow.iter().enumerate() {
                                    for (d, &kv) in dxrow[t * stride..t * stride + k].iter_mut().zip(kern) {
                                        *d = *d + gv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = slot(nodes, adj, w) {
                    for bi in 0..batch {
                        for o in 0..cout {
                            let grp = o / cout_g;
                            let grow = &g[(bi * cout + o) * lout..][..lout];
                            for ci in 0..cin_g {
                                let xrow = &xd[(bi * cin + grp * cin_g + ci) * lin..][..lin];
                                let dk = &mut dw[(o * cin_g + ci) * k..][..k];
                                for (t, &gv) in grow.iter().enumerate() {
                                    for (d, &xv) in dk.iter_mut().zip(&xrow[t * stride..t * stride + k]) {
                                        *d = *d + gv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(db) = b.and_then(|b| slot(nodes, adj, b)) {
                    for bi in 0..batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            let s: F = g[(bi * cout + o) * lout..][..lout].iter().copied().sum();
                            *d = *d + s;
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xd = self.nodes[x.0].value.data();
                if let Some(dx) = slot(nodes, adj, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d = *d + gv * gelu_derivative(xv);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                channels,
                len,
                train,
            } => {
                let (batch, channels, len) = (*batch, *channels, *len);
                let gd = self.nodes[gamma.0].value.data();
                let nf = F::c((batch * len) as f64);
                let mut sum_g = vec![F::zero(); channels];
                let mut sum_gx = vec![F::zero(); channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * len;
                        for l in 0..len {
                            sum_g[c] = sum_g[c] + g[off + l];
                            sum_gx[c] = sum_gx[c] + g[off + l] * xhat[off + l];
                        }
                    }
                }
                if let Some(dg) = slot(nodes, adj, *gamma) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d = *d + v);
                }
                if let Some(db) = slot(nodes, adj, *beta) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d = *d + v);
                }
                if let Some(dx) = slot(nodes, adj, *x) {
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * len;
                            let scale = gd[c] * inv_std[c];
                            for l in 0..len {
                                let i = off + l;
                                let v = if *train {
                                    scale * (g[i] - sum_g[c] / nf - xhat[i] * sum_gx[c] / nf)
                                } else {
                                    scale * g[i]
                                };
                                dx[i] = dx[i] + v;
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = slot(nodes, adj, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if let Some(da) = slot(nodes, adj, a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bd) {
                        *d = *d + gv * o;
                    }
                }
                if let Some(db) = slot(nodes, adj, b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(ad) {
                        *d = *d + gv * o;
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = slot(nodes, adj, x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = slot(nodes, adj, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
            }
            &Op::PadEnd { x, len, count } => {
                if let Some(dx) = slot(nodes, adj, x) {
                    for (drow, grow) in dx.chunks_exact_mut(len).zip(g.chunks_exact(len + count)) {
                        for (d, &gv) in drow.iter_mut().zip(&grow[..len]) {
                            *d = *d + gv;
                        }
                        let tail: F = grow[len..].iter().copied().sum();
                        drow[len - 1] = drow[len - 1] + tail;
                    }
                }
            }
            &Op::Unfold {
                x,
                len,
                size,
                step,
                count,
            } => {
                if let Some(dx) = slot(nodes, adj, x) {
                    for (drow, grow) in dx.chunks_exact_mut(len).zip(g.chunks_exact(count * size)) {
                        for (i, patch) in grow.chunks_exact(size).enumerate() {
                            for (d, &gv) in drow[i * step..i * step + size].iter_mut().zip(patch) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
            Op::RowAffine { x, scale } => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    let width = g.len() / scale.len();
                    for ((drow, grow), &s) in dx
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(scale)
                    {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv * s;
                        }
                    }
                }
            }
            Op::Loss { pred, target, kind } => {
                let pd = self.nodes[pred.0].value.data();
                let n = F::c(pd.len() as f64);
                if let Some(dp) = slot(nodes, adj, *pred) {
                    for ((d, &p), &t) in dp.iter_mut().zip(pd).zip(target) {
                        *d = *d + g[0] * point_loss_derivative(p - t, *kind) / n;
                    }
                }
            }
        }
    }
}

fn slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    adj: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![F::zero(); n.value.numel()]))
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    half * x * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_derivative<F: Scalar>(x: F) -> F {
    let cdf = F::c(0.5) * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::c(0.5)).exp() * F::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sign<F: Scalar>(d: F) -> F {
    if d > F::zero() {
        F::one()
    } else if d < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn point_loss_value<F: Scalar>(d: F, kind: PointLoss<F>) -> F {
    match kind {
        PointLoss::Mse => d * d,
        PointLoss::Mae => d.abs(),
        PointLoss::SmoothL1 { beta } => {
            if d.abs() < beta {
                F::c(0.5) * d * d / beta
            } else {
                d.abs() - F::c(0.5) * beta
            }
        }
    }
}

fn point_loss_derivative<F: Scalar>(d: F, kind: PointLoss<F>) -> F {
    match kind {
        PointLoss::Mse => F::c(2.0) * d,
        PointLoss::Mae => sign(d),
        PointLoss::SmoothL1 { beta } => {
            if d.abs() < beta {
                d / beta
            } else {
                sign(d)
            }
        }
    }
}
