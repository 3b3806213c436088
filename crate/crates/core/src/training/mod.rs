//! Losses, Adam, the epoch loop with early stopping, and split evaluation.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use loss::{loss, LossKind, LossSpec};
pub use optim::OptimState;

use crate::config::RunConfig;
use crate::dataio::{iter_windows, load_csv, SeriesDataset, Split, WindowBatch};
use crate::error::{Error, Result, StageContext};
use crate::model::{save_checkpoint, PatchMixerModel};
use crate::numerics::{Graph, Scalar};

const EVAL_BATCH: usize = 256;

// Independent ChaCha streams derived from the single run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything a run produces that is a pure function of its config.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config: RunConfig,
    pub num_params: usize,
    pub windows: [usize; 3],
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub test_mse: f64,
    pub test_mae: f64,
}

impl TrainReport {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Machine-readable `key=value` summary.
    pub fn records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.config.seed);
        let _ = writeln!(s, "num_params={}", self.num_params);
        let _ = writeln!(s, "windows_train={}", self.windows[0]);
        let _ = writeln!(s, "windows_val={}", self.windows[1]);
        let _ = writeln!(s, "windows_test={}", self.windows[2]);
        let _ = writeln!(s, "epochs_run={}", self.epochs.len());
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_val_loss={}", self.best_val_loss);
        let _ = writeln!(s, "stopped_early={}", self.stopped_early);
        let _ = writeln!(s, "test_mse={}", self.test_mse);
        let _ = writeln!(s, "test_mae={}", self.test_mae);
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }

    /// Human-readable report: assumptions header, config echo, epochs, result.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# patchmixer training report\n");
        let _ = writeln!(
            s,
            "# optimizer adam(beta1=0.9, beta2=0.999, eps=1e-8) lr={} batch_size={} patience={} max_epochs={}",
            c.lr, c.batch_size, c.patience, c.max_epochs
        );
        s.push_str("# these optimizer settings are inherited defaults, not tuned values\n");
        s.push_str("# metrics are computed on standardized values\n");
        s.push_str("[config]\n");
        s.push_str(&c.to_text());
        s.push_str("[epochs]\n");
        s.push_str(&self.epochs_csv());
        s.push_str("[result]\n");
        s.push_str(&self.records());
        s
    }
}

/// A finished run. Wall-clock timings are kept apart from the report so that
/// identical configs give identical reports.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: PatchMixerModel<f32>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            return 0.0;
        }
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
    }
}

/// Loads, truncates and splits the dataset named by `cfg`.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<SeriesDataset> {
    split_for(load_csv(&cfg.dataset)?, cfg)
}

/// Applies `max_steps` and the split profile of `cfg` to a loaded series.
pub fn split_for(mut ds: SeriesDataset, cfg: &RunConfig) -> Result<SeriesDataset> {
    if cfg.max_steps > 0 && cfg.max_steps < ds.total_steps() {
        ds = ds.truncate(cfg.max_steps)?;
    }
    ds.make_splits(cfg.profile, cfg.lookback, cfg.horizon)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = prepare_dataset(cfg).stage("dataset")?;
    train_on(&ds, cfg)
}

/// Runs the epoch loop on an already split dataset.
pub fn train_on(ds: &SeriesDataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate_params()?;
    let (l, t) = (cfg.lookback, cfg.horizon);
    let windows = [
        ds.window_count(Split::Train, l, t)?,
        ds.window_count(Split::Val, l, t)?,
        ds.window_count(Split::Test, l, t)?,
    ];

    let mut model = PatchMixerModel::<f32>::new(cfg.model_config()?, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut opt = OptimState::new(model.params(), cfg.lr);
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let mut dropout = stream(cfg.seed, STREAM_DROPOUT);

    let mut epochs = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(usize, f64, PatchMixerModel<f32>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let order_seed: u64 = shuffle.gen();
        let iter = iter_windows::<f32>(ds, Split::Train, l, t, cfg.batch_size, Some(order_seed))?;
        let (sum, count) = std::thread::scope(|s| -> Result<(f64, usize)> {
            let mut sum = 0.0;
            let mut count = 0;
            for (b, batch) in iter.prefetch(s, 2).into_iter().enumerate() {
                let value = train_step(&mut model, &mut opt, &batch, cfg.loss, &mut dropout)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                        lr: cfg.lr,
                    });
                }
                sum += value * batch.len() as f64;
                count += batch.len();
            }
            Ok((sum, count))
        })?;
        let train_loss = sum / count as f64;
        let val_loss = split_metrics(&model, ds, Split::Val, l, t, cfg.loss)?.loss;
        epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        let improved = best.as_ref().is_none_or(|(_, v, _)| val_loss < *v);
        if improved {
            best = Some((epoch, val_loss, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, model) = best.expect("at least one epoch");
    let test = split_metrics(&model, ds, Split::Test, l, t, cfg.loss)?;
    let report = TrainReport {
        config: cfg.clone(),
        num_params: model.num_params(),
        windows,
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        test_mse: test.mse,
        test_mae: test.mae,
    };
    Ok(TrainOutcome {
        report,
        model,
        epoch_seconds,
    })
}

fn train_step(
    model: &mut PatchMixerModel<f32>,
    opt: &mut OptimState<f32>,
    batch: &WindowBatch<f32>,
    spec: LossSpec,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let fwd = model.forward_train(&mut g, &params, &batch.inputs, rng)?;
    let root = loss(&mut g, fwd.output, &batch.targets, spec)?;
    let value = g.value(root).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(root)?;
    let mut grads: Vec<_> = params.iter().map(|&p| g.grad(p)).collect();
    opt.step(model.params_mut(), &mut grads);
    Ok(value)
}

/// Mean metrics of a frozen model over one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean of the given loss spec.
    pub loss: f64,
    pub count: usize,
}

fn element_loss(d: f64, spec: LossSpec) -> f64 {
    match spec.kind {
        LossKind::Mse => d * d,
        LossKind::Mae => d.abs(),
        LossKind::MsePlusMae => d * d + d.abs(),
        LossKind::SmoothL1 => {
            if d.abs() < spec.beta {
                0.5 * d * d / spec.beta
            } else {
                d.abs() - 0.5 * spec.beta
            }
        }
    }
}

/// Eval-mode MSE, MAE and `spec` loss over every window of `split`.
///
/// Batches are sharded over threads; partial sums are merged in batch order,
/// so the result does not depend on the thread count.
pub fn split_metrics<F: Scalar>(
    model: &PatchMixerModel<F>,
    ds: &SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    spec: LossSpec,
) -> Result<SplitMetrics> {
    let cfg = model.config();
    if cfg.patch.lookback != lookback || cfg.horizon != horizon {
        return Err(Error::config(
            "L",
            format!(
                "model expects L={} T={}, evaluation asked for L={lookback} T={horizon}",
                cfg.patch.lookback, cfg.horizon
            ),
        ));
    }
    let batches: Vec<WindowBatch<F>> = iter_windows(ds, split, lookback, horizon, EVAL_BATCH, None)
        .map_err(|e| match e {
            Error::SplitTooShort { .. } => Error::EmptySplit(split.name()),
            e => e,
        })?
        .collect();
    if batches.is_empty() {
        return Err(Error::EmptySplit(split.name()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(batches.len());
    let per = batches.len().div_ceil(workers);
    let partials: Vec<Result<Vec<[f64; 3]>>> = std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|b| {
                            let pred = model.predict(&b.inputs)?;
                            let mut acc = [0.0; 3];
                            for (p, y) in pred.data().iter().zip(b.targets.data()) {
                                let d = p.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
                                acc[0] += d * d;
                                acc[1] += d.abs();
                                acc[2] += element_loss(d, spec);
                            }
                            Ok(acc)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker")).collect()
    });
    let mut total = [0.0; 3];
    for part in partials {
        for acc in part? {
            for k in 0..3 {
                total[k] += acc[k];
            }
        }
    }
    let count: usize = batches.iter().map(|b| b.len()).sum();
    let n = (count * horizon) as f64;
    Ok(SplitMetrics {
        mse: total[0] / n,
        mae: total[1] / n,
        loss: total[2] / n,
        count,
    })
}

/// `(MSE, MAE)` over all windows and variables of `split`, standardized space.
pub fn evaluate<F: Scalar>(
    model: &PatchMixerModel<F>,
    ds: &SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
) -> Result<(f64, f64)> {
    let m = split_metrics(model, ds, split, lookback, horizon, LossSpec::default())?;
    Ok((m.mse, m.mae))
}

/// Per-window forecasts of a split, in window order.
pub fn split_forecasts<F: Scalar>(
    model: &PatchMixerModel<F>,
    ds: &SeriesDataset,
    split: Split,
) -> Result<Vec<((usize, usize), Vec<F>)>> {
    let cfg = model.config();
    let mut out = Vec::new();
    for b in iter_windows::<F>(ds, split, cfg.patch.lookback, cfg.horizon, EVAL_BATCH, None)? {
        let pred = model.predict(&b.inputs)?;
        for (i, origin) in b.origins.iter().enumerate() {
            out.push((*origin, pred.row(i).to_vec()));
        }
    }
    Ok(out)
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub epochs: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub timings: PathBuf,
}

/// Writes report, metrics, per-epoch CSV, config echo, checkpoint and timings.
pub fn write_run(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<RunFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles {
        report: dir.join("report.txt"),
        metrics: dir.join("metrics.txt"),
        epochs: dir.join("epochs.csv"),
        checkpoint: dir.join("model.ckpt"),
        config: dir.join("config.cfg"),
        timings: dir.join("timings.csv"),
    };
    let write = |path: &Path, text: String| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    let r = &outcome.report;
    write(&files.report, r.to_text())?;
    write(&files.metrics, r.records())?;
    write(&files.epochs, r.epochs_csv())?;
    write(&files.config, r.config.to_text())?;
    let mut timings = String::from("epoch,seconds\n");
    for (i, s) in outcome.epoch_seconds.iter().enumerate() {
        let _ = writeln!(timings, "{},{s:.3}", i + 1);
    }
    write(&files.timings, timings)?;
    save_checkpoint(&outcome.model, &files.checkpoint)?;
    Ok(files)
}
