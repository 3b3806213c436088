use std::fmt::Write as _;

use crate::model::ModelConfig;

/// Multiply-accumulate counts of one forward pass, per stage.
///
/// Only affine and convolution stages are counted; activations,
/// normalization, padding and the residual add are free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub num_patches: usize,
    pub patch_len: usize,
    pub dim: usize,
    pub kernel: usize,
    pub horizon: usize,
    pub num_vars: usize,
    pub embedding: u64,
    pub depthwise: u64,
    pub pointwise: u64,
    pub linear_head: u64,
    pub mlp_head: u64,
}

pub const MAC_NOTES: &[&str] = &[
    "counts multiply-accumulate pairs of affine and convolution stages only",
    "activations, batch norm, instance norm, padding and the residual add are not counted",
    "per_variable is one univariate window; per_forecast multiplies by the number of variables M",
];

pub fn count_macs(cfg: &ModelConfig, num_vars: usize) -> MacReport {
    let n = cfg.num_patches() as u64;
    let (p, d, k, t) = (
        cfg.patch.patch_len as u64,
        cfg.patch.dim as u64,
        cfg.kernel as u64,
        cfg.horizon as u64,
    );
    let block = cfg.depth == 1;
    let db = if block { d / k } else { 0 };
    let mlp_in = if block { n * db } else { n * d };
    MacReport {
        num_patches: n as usize,
        patch_len: p as usize,
        dim: d as usize,
        kernel: k as usize,
        horizon: t as usize,
        num_vars,
        embedding: n * p * d,
        depthwise: if block { n * db * k } else { 0 },
        pointwise: if block { n * n * db } else { 0 },
        linear_head: if cfg.heads.has_linear() { n * d * t } else { 0 },
        mlp_head: if cfg.heads.has_mlp() { mlp_in * 2 * t + 2 * t * t } else { 0 },
    }
}

impl MacReport {
    pub fn stages(&self) -> [(&'static str, u64); 5] {
        [
            ("embedding", self.embedding),
            ("depthwise", self.depthwise),
            ("pointwise", self.pointwise),
            ("linear_head", self.linear_head),
            ("mlp_head", self.mlp_head),
        ]
    }

    pub fn block(&self) -> u64 {
        self.depthwise + self.pointwise
    }

    pub fn per_variable(&self) -> u64 {
        self.stages().iter().map(|(_, v)| v).sum()
    }

    pub fn per_forecast(&self) -> u64 {
        self.per_variable() * self.num_vars as u64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,macs\n");
        for (name, v) in self.stages() {
            let _ = writeln!(s, "{name},{v}");
        }
        let _ = writeln!(s, "block,{}", self.block());
        let _ = writeln!(s, "per_variable,{}", self.per_variable());
        let _ = writeln!(s, "per_forecast,{}", self.per_forecast());
        s
    }

    /// Config echo and accounting notes for the sidecar file.
    pub fn notes(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "N={} P={} D={} K={} D_b={} T={} M={}",
            self.num_patches,
            self.patch_len,
            self.dim,
            self.kernel,
            if self.kernel > 0 { self.dim / self.kernel } else { 0 },
            self.horizon,
            self.num_vars
        );
        for n in MAC_NOTES {
            let _ = writeln!(s, "note={n}");
        }
        s
    }
}

/// Compares our count with a published total whose accounting basis is not
/// stated, listing the bases that were tried.
pub fn reconciliation_note(report: &MacReport, published: f64) -> String {
    let m = report.num_vars as f64;
    let (n, d, k) = (report.num_patches as f64, report.dim as f64, report.kernel as f64);
    let full_d_block = n * n * d + n * d * k;
    let candidates = [
        ("all stages, all variables", report.per_forecast() as f64),
        ("all stages, one variable", report.per_variable() as f64),
        ("block only (D_b = D/K), all variables", report.block() as f64 * m),
        ("block with full D (N^2 D + N D K), all variables", full_d_block * m),
        (
            "block with full D, batch 8, all variables",
            full_d_block * m * 8.0,
        ),
        (
            "heads + block, no embedding, all variables",
            (report.per_variable() - report.embedding) as f64 * m,
        ),
    ];
    let mut s = format!(
        "published total {:.2}M has no stated basis (batch size, variables, heads, embedding)\n",
        published / 1e6
    );
    for (name, v) in candidates {
        let _ = writeln!(s, "{name}: {:.2}M ({:+.1}%)", v / 1e6, (v / published - 1.0) * 100.0);
    }
    s.push_str("none of these bases reproduces the published figure exactly; the per-stage counts above are the reference\n");
    s
}
