//! The forecasting network.
//!
//! Per input row: instance normalization, replicate padding, patch
//! unfolding and a shared linear embedding give `E: [N, D]` (patches are
//! channels, the embedding is the spatial axis). One mixer block applies a
//! depthwise convolution with kernel = stride = `K` over `D` followed by a
//! 1x1 convolution across the `N` patch channels, each with GELU and
//! batch-norm, and a residual around the 1x1 stage. A linear head reads
//! `E`, an MLP head reads the block output, and their sum is mapped back to
//! the input scale.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result, StageContext};
use crate::numerics::{BatchNormState, Graph, Mode, Scalar, Tensor, Var};
use crate::patching::{patchify, PatchConfig};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    Dual,
    Linear,
    Mlp,
}

impl HeadMode {
    pub fn has_linear(self) -> bool {
        matches!(self, HeadMode::Dual | HeadMode::Linear)
    }

    pub fn has_mlp(self) -> bool {
        matches!(self, HeadMode::Dual | HeadMode::Mlp)
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(HeadMode::Dual),
            "linear" => Ok(HeadMode::Linear),
            "mlp" => Ok(HeadMode::Mlp),
            _ => Err(Error::config("heads", format!("expected dual|linear|mlp, got `{s}`"))),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Dual => "dual",
            HeadMode::Linear => "linear",
            HeadMode::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub horizon: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub heads: HeadMode,
    /// Number of mixer blocks: 1, or 0 for the block-free ablations.
    pub depth: usize,
}

impl ModelConfig {
    pub const DEFAULT_KERNEL: usize = 8;
    pub const DEFAULT_DROPOUT: f64 = 0.2;

    pub fn new(patch: PatchConfig, horizon: usize) -> Self {
        ModelConfig {
            patch,
            horizon,
            kernel: Self::DEFAULT_KERNEL,
            dropout: Self::DEFAULT_DROPOUT,
            heads: HeadMode::Dual,
            depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.patch.lookback < 2 {
            return Err(Error::config("L", "look-back must be >= 2"));
        }
        if self.horizon == 0 {
            return Err(Error::config("T", "horizon must be >= 1"));
        }
        if self.depth > 1 {
            return Err(Error::config("depth", "only a single mixer block is supported"));
        }
        if self.kernel == 0 {
            return Err(Error::config("K", "kernel must be >= 1"));
        }
        if self.depth == 1 && self.patch.dim % self.kernel != 0 {
            return Err(Error::config(
                "K",
                format!("embedding dim {} is not divisible by kernel {}", self.patch.dim, self.kernel),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    /// Length of the depthwise output, `D / K`.
    pub fn block_len(&self) -> usize {
        self.patch.dim / self.kernel
    }

    fn mlp_input(&self) -> usize {
        let n = self.num_patches();
        if self.depth == 1 {
            n * self.block_len()
        } else {
            n * self.patch.dim
        }
    }

    /// Canonical `(name, shape, fan_in)` list of trainable tensors.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (n, p, d, k, t) = (
            self.num_patches(),
            self.patch.patch_len,
            self.patch.dim,
            self.kernel,
            self.horizon,
        );
        let mut v = vec![("embed.weight", vec![p, d], p), ("embed.bias", vec![d], p)];
        if self.depth == 1 {
            v.extend([
                ("block.depthwise.weight", vec![n, 1, k], k),
                ("block.depthwise.bias", vec![n], k),
                ("block.bn1.gamma", vec![n], 0),
                ("block.bn1.beta", vec![n], 0),
                ("block.pointwise.weight", vec![n, n, 1], n),
                ("block.pointwise.bias", vec![n], n),
                ("block.bn2.gamma", vec![n], 0),
                ("block.bn2.beta", vec![n], 0),
            ]);
        }
        if self.heads.has_linear() {
            v.extend([
                ("head.linear.weight", vec![n * d, t], n * d),
                ("head.linear.bias", vec![t], n * d),
            ]);
        }
        if self.heads.has_mlp() {
            let h = self.mlp_input();
            v.extend([
                ("head.mlp.fc1.weight", vec![h, 2 * t], h),
                ("head.mlp.fc1.bias", vec![2 * t], h),
                ("head.mlp.fc2.weight", vec![2 * t, t], 2 * t),
                ("head.mlp.fc2.bias", vec![t], 2 * t),
            ]);
        }
        v
    }
}

/// Per-row statistics removed before patching and restored afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormState<F> {
    pub mu: Vec<F>,
    pub sigma: Vec<F>,
    pub eps: F,
}

impl<F: Scalar> InstanceNormState<F> {
    /// Restores the input scale of a `[rows, T]` forecast.
    pub fn denormalize(&self, y: &Tensor<F>) -> Tensor<F> {
        let width = y.numel() / self.mu.len();
        Tensor::from_fn(y.shape(), |i| {
            let r = i / width;
            y.data()[i] * self.sigma[r] + self.mu[r]
        })
    }
}

/// Subtracts each row's mean and divides by its population std plus eps.
pub fn instance_normalize<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, InstanceNormState<F>) {
    let len = *x.shape().last().unwrap();
    let eps = F::c(INSTANCE_NORM_EPS);
    let n = F::c(len as f64);
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(len) {
        let m = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
        let s = var.sqrt() + eps;
        out.extend(row.iter().map(|&v| (v - m) / s));
        mu.push(m);
        sigma.push(s);
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        InstanceNormState { mu, sigma, eps },
    )
}

#[derive(Clone, Copy, Debug)]
struct Slots {
    embed: [usize; 2],
    block: Option<[usize; 8]>,
    linear: Option<[usize; 2]>,
    mlp: Option<[usize; 4]>,
}

impl Slots {
    fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0;
        let mut take = |k: usize| {
            let s = next;
            next += k;
            s
        };
        let embed = {
            let s = take(2);
            [s, s + 1]
        };
        let block = (cfg.depth == 1).then(|| {
            let s = take(8);
            std::array::from_fn(|i| s + i)
        });
        let linear = cfg.heads.has_linear().then(|| {
            let s = take(2);
            [s, s + 1]
        });
        let mlp = cfg.heads.has_mlp().then(|| {
            let s = take(4);
            std::array::from_fn(|i| s + i)
        });
        Slots {
            embed,
            block,
            linear,
            mlp,
        }
    }
}

/// Result of one forward pass on a graph.
pub struct Forward<F> {
    /// Forecast `[B, T]` in the input scale.
    pub output: Var,
    pub norm: InstanceNormState<F>,
}

#[derive(Clone, Debug)]
pub struct PatchMixerModel<F> {
    cfg: ModelConfig,
    names: Vec<&'static str>,
    params: Vec<Tensor<F>>,
    bn: Vec<BatchNormState<F>>,
    slots: Slots,
}

impl<F: Scalar> PatchMixerModel<F> {
    /// Fresh model: weights uniform in `±1/sqrt(fan_in)`, batch-norm
    /// gamma = 1 and beta = 0.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let params = layout
            .iter()
            .map(|(name, shape, fan_in)| {
                if name.ends_with(".gamma") {
                    Tensor::full(shape, F::one())
                } else if name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else {
                    Tensor::uniform(shape, 1.0 / (*fan_in as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: ModelConfig, params: Vec<Tensor<F>>) -> Self {
        let n = cfg.num_patches();
        let bn = if cfg.depth == 1 {
            vec![BatchNormState::new(n), BatchNormState::new(n)]
        } else {
            Vec::new()
        };
        PatchMixerModel {
            names: cfg.layout().into_iter().map(|(n, _, _)| n).collect(),
            slots: Slots::new(&cfg),
            cfg,
            params,
            bn,
        }
    }

    /// Model with explicit parameter tensors in [`ModelConfig::layout`] order.
    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: name,
                    lhs: shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(Self::assemble(cfg, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| *n == name).map(|i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState<F>] {
        &self.bn
    }

    pub fn batch_norm_states_mut(&mut self) -> &mut [BatchNormState<F>] {
        &mut self.bn
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn register(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.variable(p.clone())).collect()
    }

    /// Training-mode pass: batch statistics, dropout active, running
    /// statistics updated.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<F>,
        params: &[Var],
        x: &Tensor<F>,
        rng: &mut R,
    ) -> Result<Forward<F>> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_with(g, params, x, Mode::Train, rng, &mut bn);
        self.bn = bn;
        out
    }

    /// Evaluation-mode pass: running statistics, no dropout.
    pub fn forward_eval(&self, g: &mut Graph<F>, params: &[Var], x: &Tensor<F>) -> Result<Forward<F>> {
        let mut bn = self.bn.clone();
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        self.forward_with(g, params, x, Mode::Eval, &mut unused, &mut bn)
    }

    /// Forecasts `[B, T]` for look-back windows `[B, L]` in eval mode.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let f = self.forward_eval(&mut g, &params, x)?;
        Ok(g.value(f.output).clone())
    }

    fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        x: &Tensor<F>,
        mode: Mode,
        rng: &mut R,
        bn: &mut [BatchNormState<F>],
    ) -> Result<Forward<F>> {
        let cfg = &self.cfg;
        let l = cfg.patch.lookback;
        if x.ndim() != 2 || x.shape()[1] != l {
            return Err(Error::Shape {
                op: "forward input",
                lhs: vec![x.shape()[0], l],
                rhs: x.shape().to_vec(),
            })
            .stage("forward");
        }
        if p.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter handles for {} tensors",
                p.len(),
                self.params.len()
            )));
        }
        let batch = x.shape()[0];
        let (n, d) = (cfg.num_patches(), cfg.patch.dim);

        let (xn, norm) = instance_normalize(x);
        let xv = g.constant(xn);
        let patches = patchify(g, xv, &cfg.patch).stage("patching")?;
        let [we, be] = self.slots.embed;
        let mut emb = g.linear(patches, p[we], Some(p[be])).stage("embedding")?;
        if mode == Mode::Train {
            emb = g.dropout(emb, cfg.dropout, rng);
        }

        let block = match self.slots.block {
            Some([dw_w, dw_b, g1, b1, pw_w, pw_b, g2, b2]) => {
                let z = g
                    .conv1d(emb, p[dw_w], Some(p[dw_b]), cfg.kernel, n)
                    .stage("depthwise conv")?;
                let z = g.gelu(z);
                let z = g.batch_norm(z, p[g1], p[b1], &mut bn[0], mode).stage("depthwise norm")?;
                let y = g.conv1d(z, p[pw_w], Some(p[pw_b]), 1, 1).stage("pointwise conv")?;
                let y = g.gelu(y);
                let y = g.batch_norm(y, p[g2], p[b2], &mut bn[1], mode).stage("pointwise norm")?;
                Some(g.add(y, z).stage("residual")?)
            }
            None => None,
        };

        let mut out = None;
        if let Some([w, b]) = self.slots.linear {
            let flat = g.reshape(emb, &[batch, n * d]).stage("linear head")?;
            out = Some(g.linear(flat, p[w], Some(p[b])).stage("linear head")?);
        }
        if let Some([w1, b1, w2, b2]) = self.slots.mlp {
            let src = block.unwrap_or(emb);
            let width = g.value(src).numel() / batch;
            let flat = g.reshape(src, &[batch, width]).stage("mlp head")?;
            let h = g.linear(flat, p[w1], Some(p[b1])).stage("mlp head")?;
            let h = g.gelu(h);
            let m = g.linear(h, p[w2], Some(p[b2])).stage("mlp head")?;
            out = Some(match out {
                Some(lin) => g.add(lin, m).stage("head fusion")?,
                None => m,
            });
        }
        let out = out.expect("validated head mode has at least one head");
        let output = g.row_affine(out, &norm.sigma, &norm.mu).stage("denormalize")?;
        Ok(Forward { output, norm })
    }
}
