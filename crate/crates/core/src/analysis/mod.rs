//! Mutual-information diagnostics, MAC accounting, sweeps and ablations.

mod macs;
mod nmi;
mod sweep;

pub use macs::{count_macs, reconciliation_note, MacReport, MAC_NOTES};
pub use nmi::{
    channel_vs_patch_nmi, default_bins, nmi, patch_position_samples, NmiMatrix, PatchNmiSpec, MAX_BINS,
};
pub use sweep::{ablate, sweep, AblationRow, SweepAxis, SweepResult, SweepRow, Variant};

/// MACs reported for the mixer block on ETTm1 at L=336, T=720.
pub const PUBLISHED_BLOCK_MACS: f64 = 66.32e6;
