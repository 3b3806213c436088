use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::dataio::SeriesDataset;
use crate::error::{Error, Result};
use crate::model::HeadMode;
use crate::training::{split_for, train_on, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lookback,
    PatchLen,
    Stride,
    Loss,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lookback => "lookback",
            SweepAxis::PatchLen => "patch_len",
            SweepAxis::Stride => "stride",
            SweepAxis::Loss => "loss",
        }
    }

    /// The config key this axis rewrites.
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Lookback => "L",
            SweepAxis::PatchLen => "P",
            SweepAxis::Stride => "S",
            SweepAxis::Loss => "loss",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Lookback, SweepAxis::PatchLen, SweepAxis::Stride, SweepAxis::Loss]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("axis", format!("expected lookback|patch_len|stride|loss, got `{s}`")))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub test_mse: f64,
    pub test_mae: f64,
    pub epochs: usize,
    pub seconds_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// `(value, reason)` for every value that was not run.
    pub skipped: Vec<(String, String)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},test_mse,test_mae,epochs,seconds_per_epoch\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.value, r.test_mse, r.test_mae, r.epochs, r.seconds_per_epoch
            );
        }
        s
    }

    /// Sidecar record: axis, base config echo, seed, skips and code version.
    pub fn metadata(&self, base: &RunConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind=sweep");
        let _ = writeln!(s, "axis={}", self.axis);
        let _ = writeln!(s, "seed={}", base.seed);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        for (v, why) in &self.skipped {
            let _ = writeln!(s, "skipped={v}: {why}");
        }
        s.push_str("[base_config]\n");
        s.push_str(&base.to_text());
        s
    }
}

fn run_config(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.set(axis.key(), value)?;
    cfg.validate_params()?;
    Ok(cfg)
}

/// Trains one model per axis value on `raw` (an unsplit series) with the
/// base seed. Invalid values are skipped and logged; rows keep axis order
/// whatever the thread count.
pub fn sweep(
    raw: &SeriesDataset,
    axis: SweepAxis,
    values: &[String],
    base: &RunConfig,
    threads: usize,
) -> Result<SweepResult> {
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for v in values {
        match run_config(base, axis, v).and_then(|cfg| split_for(raw.clone(), &cfg).map(|ds| (cfg, ds))) {
            Ok(job) => jobs.push((v.clone(), job)),
            Err(e) => {
                log::warn!("sweep {axis}={v} skipped: {e}");
                skipped.push((v.clone(), e.to_string()));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((v, (cfg, ds))) = jobs.get(i) else { break };
                log::info!("sweep {axis}={v}");
                let out = train_on(ds, cfg);
                results.lock().expect("sweep results")[i] = Some(out);
            });
        }
    });

    let mut rows = Vec::new();
    for ((v, _), out) in jobs.iter().zip(results.into_inner().expect("sweep results")) {
        let out = out.expect("every job ran")?;
        rows.push(SweepRow {
            value: v.clone(),
            test_mse: out.report.test_mse,
            test_mae: out.report.test_mae,
            epochs: out.report.epochs.len(),
            seconds_per_epoch: out.mean_epoch_seconds(),
        });
    }
    Ok(SweepResult { axis, rows, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Patch + mixer block + dual heads.
    Full,
    /// Mixer block + dual heads on single-step patches.
    NoPatch,
    /// Patches straight into one head, no mixer block.
    LinearHead,
    MlpHead,
    DualHead,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPatch,
        Variant::LinearHead,
        Variant::MlpHead,
        Variant::DualHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPatch => "no_patch",
            Variant::LinearHead => "linear_head",
            Variant::MlpHead => "mlp_head",
            Variant::DualHead => "dual_head",
        }
    }

    /// `base` rewritten into this variant.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPatch => {
                cfg.patch_len = 1;
                cfg.stride = 1;
            }
            Variant::LinearHead | Variant::MlpHead | Variant::DualHead => {
                cfg.depth = 0;
                cfg.heads = match self {
                    Variant::LinearHead => HeadMode::Linear,
                    Variant::MlpHead => HeadMode::Mlp,
                    _ => HeadMode::Dual,
                };
            }
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("unsupported variant `{s}` (full|no_patch|linear_head|mlp_head|dual_head)"),
                )
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub num_patches: usize,
    pub test_mse: f64,
    pub test_mae: f64,
    pub epochs: usize,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,num_patches,test_mse,test_mae,epochs";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant, self.num_patches, self.test_mse, self.test_mae, self.epochs
        )
    }
}

pub fn ablate(raw: &SeriesDataset, variant: Variant, base: &RunConfig) -> Result<AblationRow> {
    let cfg = variant.apply(base);
    cfg.validate_params()?;
    let ds = split_for(raw.clone(), &cfg)?;
    let out = train_on(&ds, &cfg)?;
    Ok(AblationRow {
        variant,
        num_patches: cfg.model_config()?.num_patches(),
        test_mse: out.report.test_mse,
        test_mae: out.report.test_mae,
        epochs: out.report.epochs.len(),
    })
}
