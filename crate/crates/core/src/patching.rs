//! Replicate-padding, patch unfolding and the shared patch embedding.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Patch geometry of one look-back window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub lookback: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub dim: usize,
}

impl PatchConfig {
    pub const DEFAULT_PATCH_LEN: usize = 16;
    pub const DEFAULT_STRIDE: usize = 8;
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(lookback: usize, patch_len: usize, stride: usize, dim: usize) -> Result<Self> {
        let cfg = PatchConfig {
            lookback,
            patch_len,
            stride,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_defaults(lookback: usize) -> Result<Self> {
        Self::new(
            lookback,
            Self::DEFAULT_PATCH_LEN,
            Self::DEFAULT_STRIDE,
            Self::DEFAULT_DIM,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.lookback {
            return Err(Error::config(
                "P",
                format!("patch length {} must be in 1..={}", self.patch_len, self.lookback),
            ));
        }
        if self.stride == 0 {
            return Err(Error::config("S", "stride must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("D", "embedding dim must be >= 1"));
        }
        Ok(())
    }

    /// `N = floor((L - P) / S) + 2`: the sliding windows over `L` plus the
    /// one made reachable by padding `S` replicated values.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 2
    }

    pub fn padded_len(&self) -> usize {
        self.lookback + self.stride
    }
}

/// Appends `stride` copies of the last value to every row of `[rows, L]`.
pub fn pad_series<F: Scalar>(x: &Tensor<F>, stride: usize) -> Tensor<F> {
    let len = *x.shape().last().unwrap();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len + stride;
    let mut out = Vec::with_capacity(x.numel() / len * (len + stride));
    for row in x.data().chunks_exact(len) {
        out.extend_from_slice(row);
        out.extend(std::iter::repeat(row[len - 1]).take(stride));
    }
    Tensor::new(shape, out).expect("padded shape")
}

/// Unfolds a padded `[1, L + S]` series into `[N, P]` patches.
pub fn unfold<F: Scalar>(x_padded: &Tensor<F>, patch_len: usize, stride: usize) -> Result<Tensor<F>> {
    let len = *x_padded.shape().last().unwrap();
    if x_padded.numel() != len {
        return Err(Error::Patching(format!(
            "expected a single series, got shape {:?}",
            x_padded.shape()
        )));
    }
    if patch_len == 0 || stride == 0 || patch_len > len {
        return Err(Error::Patching(format!(
            "patch length {patch_len} exceeds padded length {len}"
        )));
    }
    let n = (len - patch_len) / stride + 1;
    let d = x_padded.data();
    let rows: Vec<F> = (0..n)
        .flat_map(|i| d[i * stride..i * stride + patch_len].iter().copied())
        .collect();
    Tensor::new(vec![n, patch_len], rows)
}

/// Row-wise `patches W + b`, no positional term.
pub fn embed<F: Scalar>(patches: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (p, w, b) = (g.constant(patches.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(p, w, Some(b))?;
    Ok(g.value(y).clone())
}

/// Differentiable pad + unfold of a `[B, L]` batch into `[B, N, P]`.
pub fn patchify<F: Scalar>(g: &mut Graph<F>, x: Var, cfg: &PatchConfig) -> Result<Var> {
    let padded = g.pad_end(x, cfg.stride);
    g.unfold(padded, cfg.patch_len, cfg.stride)
}
