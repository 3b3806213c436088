use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use patchmixer::analysis::{self, PatchNmiSpec, SweepAxis, Variant, PUBLISHED_BLOCK_MACS};
use patchmixer::config::RunConfig;
use patchmixer::dataio::{load_csv, read_window_csv, Split};
use patchmixer::model::{load_checkpoint, PatchMixerModel};
use patchmixer::patching::PatchConfig;
use patchmixer::training::{self, split_forecasts, split_metrics, LossSpec};
use patchmixer::Error;

use crate::ConfigArgs;

pub const OUTPUT_ROOT_ENV: &str = "PATCHMIXER_OUTPUT_ROOT";

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::Config { .. } | Error::SplitTooShort { .. } => true,
        Error::Stage { source, .. } => is_usage(source),
        _ => false,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_usage(&e) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// File, then shortcut flags, then overrides; parameters validated.
fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let flags: [(&str, Option<String>); 12] = [
        ("dataset", args.dataset.clone()),
        ("profile", args.profile.clone()),
        ("L", args.lookback.map(|v| v.to_string())),
        ("T", args.horizon.map(|v| v.to_string())),
        ("P", args.patch_len.map(|v| v.to_string())),
        ("S", args.stride.map(|v| v.to_string())),
        ("D", args.dim.map(|v| v.to_string())),
        ("K", args.kernel.map(|v| v.to_string())),
        ("dropout", args.dropout.map(|v| v.to_string())),
        ("heads", args.heads.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
        ("out_dir", args.out_dir.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for o in &args.overrides {
        cfg.apply(o)?;
    }
    cfg.validate_params()?;
    Ok(cfg)
}

/// `out_dir`, placed under the output-root variable when it is relative.
fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if cfg.out_dir.is_relative() => PathBuf::from(root).join(&cfg.out_dir),
        _ => cfg.out_dir.clone(),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn meta_header(kind: &str, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind={kind}");
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    s
}

fn with_config(mut s: String, cfg: &RunConfig) -> String {
    s.push_str("[config]\n");
    s.push_str(&cfg.to_text());
    s
}

pub fn train(args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    cfg.validate()?;
    let outcome = training::train(&cfg)?;
    let files = training::write_run(&outcome, output_dir(&cfg))?;
    let r = &outcome.report;
    println!("test_mse={}", r.test_mse);
    println!("test_mae={}", r.test_mae);
    println!("best_epoch={}", r.best_epoch);
    println!("report={}", files.report.display());
    println!("checkpoint={}", files.checkpoint.display());
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<PatchMixerModel<f32>, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn predict(checkpoint: &Path, input: &Path, output: Option<&Path>) -> Outcome {
    let model = open_checkpoint(checkpoint)?;
    if !input.is_file() {
        return Err(usage(format!("input not found: {}", input.display())));
    }
    let (names, window) = read_window_csv::<f32>(input)?;
    let l = model.config().patch.lookback;
    let rows = window.shape()[1];
    if rows != l {
        return Err(usage(format!(
            "{} has {rows} rows, the checkpoint expects a look-back of L={l}",
            input.display()
        )));
    }
    let forecast = model.predict(&window)?;
    let mut csv = String::from("variable,step,forecast\n");
    for (v, name) in names.iter().enumerate() {
        for (step, value) in forecast.row(v).iter().enumerate() {
            let _ = writeln!(csv, "{name},{},{value}", step + 1);
        }
    }
    match output {
        Some(path) => write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(usage(format!("unknown split `{s}` (train|val|test)"))),
    }
}

pub fn evaluate(checkpoint: &Path, split: &str, forecasts: Option<&Path>, args: &ConfigArgs) -> Outcome {
    let split = parse_split(split)?;
    let model = open_checkpoint(checkpoint)?;
    let mut cfg = resolve(args)?;
    let mc = model.config();
    // the checkpoint decides the geometry unless the config disagrees explicitly
    if args.config.is_none() && args.lookback.is_none() && args.horizon.is_none() {
        cfg.lookback = mc.patch.lookback;
        cfg.horizon = mc.horizon;
    }
    if (cfg.lookback, cfg.horizon) != (mc.patch.lookback, mc.horizon) {
        return Err(usage(format!(
            "config has L={} T={}, checkpoint has L={} T={}",
            cfg.lookback, cfg.horizon, mc.patch.lookback, mc.horizon
        )));
    }
    cfg.validate()?;
    let ds = training::prepare_dataset(&cfg)?;
    let m = split_metrics(&model, &ds, split, cfg.lookback, cfg.horizon, LossSpec::default())?;
    let mut text = meta_header("evaluate", &cfg);
    let _ = writeln!(text, "checkpoint={}", checkpoint.display());
    let _ = writeln!(text, "split={split}");
    let _ = writeln!(text, "windows={}", m.count);
    let _ = writeln!(text, "mse={}", m.mse);
    let _ = writeln!(text, "mae={}", m.mae);
    print!("{text}");
    write(&output_dir(&cfg).join(format!("evaluation_{split}.txt")), &with_config(text, &cfg))?;

    if let Some(path) = forecasts {
        let mut csv = String::from("variable,start,step,forecast\n");
        for ((var, start), values) in split_forecasts(&model, &ds, split)? {
            let name = &ds.names()[var];
            for (step, v) in values.iter().enumerate() {
                let _ = writeln!(csv, "{name},{start},{},{v}", step + 1);
            }
        }
        write(path, &csv)?;
    }
    Ok(())
}

fn require_dataset(cfg: &RunConfig) -> Outcome {
    cfg.validate()?;
    Ok(())
}

pub fn nmi(args: &ConfigArgs, variable: &str, bins: Option<usize>) -> Outcome {
    let cfg = resolve(args)?;
    require_dataset(&cfg)?;
    let ds = load_csv(&cfg.dataset)?;
    let var = match variable.parse::<usize>() {
        Ok(i) => i,
        Err(_) => ds
            .names()
            .iter()
            .position(|n| n == variable)
            .ok_or_else(|| usage(format!("no variable named `{variable}`")))?,
    };
    if var >= ds.num_vars() {
        return Err(usage(format!("variable index {var} out of range ({} variables)", ds.num_vars())));
    }
    let spec = PatchNmiSpec {
        patch: PatchConfig {
            lookback: cfg.lookback,
            patch_len: cfg.patch_len,
            stride: cfg.stride,
            dim: cfg.dim,
        },
        variable: var,
        bins,
    };
    let (channels, patches) = analysis::channel_vs_patch_nmi(&ds, &spec)?;
    let dir = output_dir(&cfg);
    write(&dir.join("nmi_channels.csv"), &channels.to_csv())?;
    write(&dir.join("nmi_patches.csv"), &patches.to_csv())?;
    let mut meta = meta_header("nmi", &cfg);
    let _ = writeln!(meta, "variable={}", ds.names()[var]);
    let _ = writeln!(meta, "channel_bins={}", channels.bin_count);
    let _ = writeln!(meta, "patch_bins={}", patches.bin_count);
    let _ = writeln!(meta, "channel_mean_off_diagonal={}", channels.mean_off_diagonal());
    let _ = writeln!(meta, "patch_mean_off_diagonal={}", patches.mean_off_diagonal());
    print!("{meta}");
    write(&dir.join("nmi.meta"), &with_config(meta, &cfg))
}

pub fn macs(args: &ConfigArgs, vars: Option<usize>) -> Outcome {
    let cfg = resolve(args)?;
    let mc = cfg.model_config()?;
    let m = match vars {
        Some(m) => m,
        None if cfg.dataset.is_file() => load_csv(&cfg.dataset)?.num_vars(),
        None => {
            log::warn!("no --vars and no readable dataset; counting one variable");
            1
        }
    };
    let report = analysis::count_macs(&mc, m);
    let dir = output_dir(&cfg);
    let csv = report.to_csv();
    write(&dir.join("macs.csv"), &csv)?;
    let mut meta = meta_header("macs", &cfg);
    meta.push_str(&report.notes());
    let reference = (cfg.lookback, cfg.horizon, cfg.patch_len, cfg.stride, cfg.dim, cfg.kernel, m)
        == (336, 720, 16, 8, 256, 8, 7);
    if reference {
        meta.push_str("[reconciliation]\n");
        meta.push_str(&analysis::reconciliation_note(&report, PUBLISHED_BLOCK_MACS));
    }
    print!("{csv}");
    write(&dir.join("macs.meta"), &with_config(meta, &cfg))
}

pub fn sweep(args: &ConfigArgs, axis: &str, values: &[String], threads: usize) -> Outcome {
    let axis: SweepAxis = axis.parse()?;
    let cfg = resolve(args)?;
    require_dataset(&cfg)?;
    let raw = load_csv(&cfg.dataset)?;
    let res = analysis::sweep(&raw, axis, values, &cfg, threads)?;
    for (v, why) in &res.skipped {
        eprintln!("skipped {axis}={v}: {why}");
    }
    let dir = output_dir(&cfg);
    let csv = res.to_csv();
    write(&dir.join(format!("sweep_{axis}.csv")), &csv)?;
    write(&dir.join(format!("sweep_{axis}.meta")), &res.metadata(&cfg))?;
    print!("{csv}");
    Ok(())
}

pub fn ablate(args: &ConfigArgs, variants: &[String]) -> Outcome {
    let variants: Vec<Variant> = variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<_, _>>()?;
    let cfg = resolve(args)?;
    require_dataset(&cfg)?;
    let raw = load_csv(&cfg.dataset)?;
    let mut csv = format!("{}\n", analysis::AblationRow::CSV_HEADER);
    for v in variants {
        let row = analysis::ablate(&raw, v, &cfg)?;
        let _ = writeln!(csv, "{}", row.csv_line());
    }
    let dir = output_dir(&cfg);
    write(&dir.join("ablation.csv"), &csv)?;
    write(&dir.join("ablation.meta"), &with_config(meta_header("ablate", &cfg), &cfg))?;
    print!("{csv}");
    Ok(())
}
