//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Criteria that need ETTh1 report SKIPPED when the
//! file is not available (set `PATCHMIXER_ETTH1` or place it at
//! `data/ETTh1.csv` in the workspace root).

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{max_gradient_error, random_tensor, rng, weighted_sum, FD_STEP};
use patchmixer::analysis::{
    ablate, channel_vs_patch_nmi, count_macs, reconciliation_note, PatchNmiSpec, Variant,
    PUBLISHED_BLOCK_MACS,
};
use patchmixer::config::RunConfig;
use patchmixer::dataio::{load_csv, sine_dataset, write_csv, Split, SplitProfile};
use patchmixer::model::{write_checkpoint, ModelConfig, PatchMixerModel};
use patchmixer::numerics::{BatchNormState, Graph, Mode, PointLoss, Tensor};
use patchmixer::patching::{pad_series, unfold, PatchConfig};
use patchmixer::training::{evaluate, loss, train, train_on, LossKind, LossSpec};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng;

enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        status: if ok { Status::Pass } else { Status::Fail },
        detail: detail.into(),
    }
}

fn skipped(detail: impl Into<String>) -> Verdict {
    Verdict {
        status: Status::Skipped,
        detail: detail.into(),
    }
}

fn etth1_path() -> Option<PathBuf> {
    let candidate = match std::env::var_os("PATCHMIXER_ETTH1") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ETTh1.csv"),
    };
    candidate.is_file().then_some(candidate)
}

fn model_config(l: usize, p: usize, s: usize, d: usize, k: usize, t: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(PatchConfig::new(l, p, s, d).unwrap(), t);
    cfg.kernel = k;
    cfg
}

fn sine_config(max_epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.profile = SplitProfile::GENERIC;
    cfg.lookback = 48;
    cfg.horizon = 12;
    cfg.dim = 32;
    cfg.kernel = 4;
    cfg.dropout = 0.0;
    cfg.batch_size = 32;
    cfg.max_epochs = max_epochs;
    cfg.patience = max_epochs;
    cfg.seed = 7;
    cfg
}

const GRAD_TOL: f64 = 1e-4;

fn op_gradients() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(101);

    let inputs = [random_tensor(&[2, 3, 4], &mut r), random_tensor(&[4, 5], &mut r), random_tensor(&[5], &mut r)];
    out.push((
        "linear".into(),
        max_gradient_error(&inputs, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(g, y, 1)
        }),
    ));

    for (cin, cout, k, stride, groups) in [(4, 4, 3, 1, 4), (4, 4, 2, 2, 4), (3, 5, 1, 1, 1), (4, 6, 3, 2, 2)] {
        let inputs = [
            random_tensor(&[2, cin, 9], &mut r),
            random_tensor(&[cout, cin / groups, k], &mut r),
            random_tensor(&[cout], &mut r),
        ];
        let err = max_gradient_error(&inputs, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), stride, groups).unwrap();
            weighted_sum(g, y, 2)
        });
        out.push((format!("conv1d(k{k},s{stride},g{groups})"), err));
    }

    let inputs = [Tensor::from_fn(&[20], |_| r.gen_range(-4.0..4.0))];
    out.push((
        "gelu".into(),
        max_gradient_error(&inputs, |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 3)
        }),
    ));

    for mode in [Mode::Train, Mode::Eval] {
        let inputs = [random_tensor(&[3, 2, 4], &mut r), random_tensor(&[2], &mut r), random_tensor(&[2], &mut r)];
        let err = max_gradient_error(&inputs, |g, v| {
            let mut st = BatchNormState::new(2);
            st.running_mean = vec![0.1, -0.2];
            st.running_var = vec![0.7, 1.3];
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, mode).unwrap();
            weighted_sum(g, y, 4)
        });
        out.push((format!("batch_norm({mode:?})"), err));
    }

    let inputs = [random_tensor(&[2, 7], &mut r), random_tensor(&[2, 7], &mut r)];
    out.push((
        "add/mul/pad/unfold/reshape/row_affine/sum".into(),
        max_gradient_error(&inputs, |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let m = g.mul(a, v[1]).unwrap();
            let p = g.pad_end(m, 3);
            let u = g.unfold(p, 4, 3).unwrap();
            let flat = g.reshape(u, &[2, 12]).unwrap();
            let s = g.row_affine(flat, &[1.5, -0.5], &[2.0, 3.0]).unwrap();
            weighted_sum(g, s, 5)
        }),
    ));

    let inputs = [random_tensor(&[40], &mut r)];
    out.push((
        "dropout".into(),
        max_gradient_error(&inputs, |g, v| {
            // same mask on every evaluation
            let y = g.dropout(v[0], 0.3, &mut rng(6));
            weighted_sum(g, y, 6)
        }),
    ));

    let target = random_tensor(&[3, 4], &mut r);
    for kind in [PointLoss::Mse, PointLoss::Mae, PointLoss::SmoothL1 { beta: 1.0 }, PointLoss::SmoothL1 { beta: 0.3 }] {
        let inputs = [random_tensor(&[3, 4], &mut r)];
        let err = max_gradient_error(&inputs, |g, v| g.point_loss(v[0], &target, kind).unwrap());
        out.push((format!("{kind:?}"), err));
    }
    out
}

fn model_gradient_error() -> f64 {
    let mut cfg = model_config(16, 4, 2, 8, 4, 3);
    cfg.dropout = 0.0;
    let mut model = PatchMixerModel::<f64>::new(cfg, &mut rng(3)).unwrap();
    let x = random_tensor(&[5, 16], &mut rng(5));
    let eval = |model: &mut PatchMixerModel<f64>, grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let p = model.register(&mut g);
        let fwd = model.forward_train(&mut g, &p, &x, &mut rng(0)).unwrap();
        let out = weighted_sum(&mut g, fwd.output, 99);
        let v = g.value(out).item();
        if !grads {
            return (v, Vec::new());
        }
        g.backward(out).unwrap();
        (v, p.iter().map(|&v| g.grad(v)).collect())
    };
    let (_, analytic) = eval(&mut model, true);
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = model.params()[i].data()[j];
            model.params_mut()[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&mut model, false).0;
            model.params_mut()[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&mut model, false).0;
            model.params_mut()[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max((grad.data()[j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

fn criterion_gradients() -> Verdict {
    let ops = op_gradients();
    let model = model_gradient_error();
    let (worst_op, worst) = ops.iter().cloned().fold(("none".to_string(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = ops.iter().filter(|(_, e)| *e >= GRAD_TOL).map(|(n, _)| n.as_str()).collect();
    verdict(
        failed.is_empty() && model < GRAD_TOL,
        format!(
            "{} op checks, worst {worst:.2e} ({worst_op}); tiny model {model:.2e}; tol {GRAD_TOL:e}{}",
            ops.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_patching() -> Verdict {
    let mut runner = TestRunner::new(PropConfig {
        failure_persistence: None,
        ..PropConfig::with_cases(1000)
    });
    let strategy = (2usize..400, 0.0f64..1.0, 1usize..64);
    let result = runner.run(&strategy, |(l, p_frac, s)| {
        let p = 1 + ((l - 1) as f64 * p_frac) as usize;
        let cfg = PatchConfig::new(l, p, s, 4).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let padded_len = l + s;
        let starts: Vec<usize> = (0..=padded_len - p).filter(|i| i % s == 0).collect();
        let law = (l - p) / s + 2;
        let x = Tensor::from_fn(&[1, l], |i| i as f64);
        let patches = unfold(&pad_series(&x, s), p, s).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if cfg.num_patches() != law || starts.len() != law || patches.shape()[0] != law {
            return Err(TestCaseError::fail(format!(
                "L={l} P={p} S={s}: law {law}, enumerated {}, config {}, unfold {}",
                starts.len(),
                cfg.num_patches(),
                patches.shape()[0]
            )));
        }
        Ok(())
    });
    match result {
        Ok(()) => verdict(true, "1000 random (L, P, S) triples agree with padded-series enumeration"),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn criterion_equivariance() -> Verdict {
    let mut r = rng(303);
    let mut cfg = model_config(48, 8, 4, 32, 4, 12);
    cfg.dropout = 0.0;
    let model = PatchMixerModel::<f32>::new(cfg, &mut r).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::<f32>::from_fn(&[1, 48], |_| r.gen_range(-2.0f32..2.0));
        let a: f32 = r.gen_range(0.1..10.0);
        let c: f32 = r.gen_range(-10.0..10.0);
        let base = model.predict(&x).unwrap();
        let moved = model.predict(&x.map(|v| a * v + c)).unwrap();
        for (m, b) in moved.data().iter().zip(base.data()) {
            worst = worst.max((*m as f64 - (a as f64 * *b as f64 + c as f64)).abs());
        }
    }
    verdict(worst < 1e-3, format!("100 windows, a in [0.1, 10), c in [-10, 10): worst abs error {worst:.2e} (tol 1e-3)"))
}

fn criterion_overfit() -> Verdict {
    let cfg = sine_config(200);
    let ds = sine_dataset(1, 600, 24.0).make_splits(cfg.profile, cfg.lookback, cfg.horizon).unwrap();
    let t0 = Instant::now();
    let out = train_on(&ds, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (mse, _) = evaluate(&out.model, &ds, Split::Train, cfg.lookback, cfg.horizon).unwrap();
    verdict(
        mse < 0.01 && secs < 300.0,
        format!("train MSE {mse:.2e} after {} epochs (< 0.01), {secs:.1}s (< 300s)", out.report.epochs.len()),
    )
}

fn etth1_config(path: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = path.to_path_buf();
    cfg.lookback = 336;
    cfg.horizon = 96;
    cfg
}

fn criterion_benchmark() -> Verdict {
    let Some(path) = etth1_path() else {
        return skipped("ETTh1.csv not found (PATCHMIXER_ETTH1 or data/ETTh1.csv)");
    };
    let mut cfg = etth1_config(&path);
    if std::env::var_os("PATCHMIXER_FULL_BENCH").is_some() {
        let out = match train(&cfg) {
            Ok(o) => o,
            Err(e) => return verdict(false, format!("full run failed: {e}")),
        };
        let r = &out.report;
        return verdict(
            r.test_mse <= 0.41 && r.test_mae <= 0.44,
            format!("full ETTh1 L=336 T=96: test MSE {:.4} (<= 0.41), MAE {:.4} (<= 0.44)", r.test_mse, r.test_mae),
        );
    }
    // fallback: first 4000 steps, dual heads vs a linear head alone
    cfg.max_steps = 4000;
    cfg.profile = SplitProfile::GENERIC;
    let raw = match load_csv(&path) {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let full = ablate(&raw, Variant::Full, &cfg);
    let linear = ablate(&raw, Variant::LinearHead, &cfg);
    match (full, linear) {
        (Ok(f), Ok(l)) => verdict(
            f.test_mse <= l.test_mse + 0.02,
            format!(
                "fallback (first 4000 steps): dual MSE {:.4} <= linear-head MSE {:.4} + 0.02; set PATCHMIXER_FULL_BENCH for the full run",
                f.test_mse, l.test_mse
            ),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(false, format!("fallback run failed: {e}")),
    }
}

fn criterion_losses() -> Verdict {
    let mut texts = Vec::new();
    let mut nan_free = true;
    for kind in LossKind::ALL {
        let mut cfg = sine_config(3);
        cfg.loss = LossSpec::new(kind);
        let ds = sine_dataset(1, 600, 24.0).make_splits(cfg.profile, cfg.lookback, cfg.horizon).unwrap();
        match train_on(&ds, &cfg) {
            Ok(out) => {
                nan_free &= out.report.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite());
                texts.push(write_checkpoint(&out.model));
            }
            Err(_) => nan_free = false,
        }
    }
    let distinct = texts.len() == 4 && (0..texts.len()).all(|i| (i + 1..texts.len()).all(|j| texts[i] != texts[j]));

    let mut r = rng(606);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let pred = random_tensor(&[4, 7], &mut r).map(|v| v * 3.0);
        let target = random_tensor(&[4, 7], &mut r);
        let eval = |kind| {
            let mut g = Graph::new();
            let p = g.variable(pred.clone());
            let l = loss(&mut g, p, &target, LossSpec::new(kind)).unwrap();
            g.value(l).item()
        };
        let both = eval(LossKind::MsePlusMae);
        worst = worst.max((both - (eval(LossKind::Mse) + eval(LossKind::Mae))).abs());
    }
    verdict(
        nan_free && distinct && worst <= 1e-12,
        format!("4 loss kinds finite: {nan_free}, distinct checkpoints: {distinct}, mse_plus_mae identity error {worst:.1e} (<= 1e-12)"),
    )
}

fn criterion_macs() -> Verdict {
    // L=64 -> N=9, L=136 -> N=18 at P=S=8
    let small = count_macs(&model_config(64, 8, 8, 64, 8, 24), 1);
    let big = count_macs(&model_config(136, 8, 8, 64, 8, 24), 1);
    let doubled = big.num_patches == 2 * small.num_patches;
    let pw = big.pointwise as f64 / small.pointwise as f64;
    let dw = big.depthwise as f64 / small.depthwise as f64;
    let ettm1 = count_macs(&model_config(336, 16, 8, 256, 8, 720), 7);
    let note = reconciliation_note(&ettm1, PUBLISHED_BLOCK_MACS);
    println!("    ETTm1 reconciliation:");
    for line in note.lines() {
        println!("      {line}");
    }
    verdict(
        doubled && big.pointwise == 4 * small.pointwise && big.depthwise == 2 * small.depthwise,
        format!(
            "N {}->{}: pointwise x{pw}, depthwise x{dw}; ETTm1 total {} per forecast ({} per variable) vs published {:.2}M, noted above",
            small.num_patches,
            big.num_patches,
            ettm1.per_forecast(),
            ettm1.per_variable(),
            PUBLISHED_BLOCK_MACS / 1e6
        ),
    )
}

fn criterion_nmi() -> Verdict {
    let Some(path) = etth1_path() else {
        return skipped("ETTh1.csv not found (PATCHMIXER_ETTH1 or data/ETTh1.csv)");
    };
    let ds = match load_csv(&path) {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let spec = PatchNmiSpec {
        patch: PatchConfig::with_defaults(336).unwrap(),
        variable: ds.num_vars() - 1,
        bins: None,
    };
    match channel_vs_patch_nmi(&ds, &spec) {
        Ok((channels, patches)) => {
            let (c, p) = (channels.mean_off_diagonal(), patches.mean_off_diagonal());
            verdict(p > c, format!("mean off-diagonal NMI: patches {p:.4} > channels {c:.4}"))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn criterion_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sine.csv");
    write_csv(&sine_dataset(3, 600, 24.0), &data).unwrap();
    let mut cfg = sine_config(3);
    cfg.dataset = data;
    cfg.dropout = 0.2;
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    let same_report = a.report == b.report;
    let same_ckpt = write_checkpoint(&a.model) == write_checkpoint(&b.model);
    verdict(
        same_report && same_ckpt,
        format!("two train() runs, seed {}: identical reports {same_report}, identical checkpoints {same_ckpt}", cfg.seed),
    )
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture or a filter
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| a != "acceptance") && !args.is_empty() {
        return;
    }
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient suite", criterion_gradients),
        ("patching law", criterion_patching),
        ("instance-norm equivariance", criterion_equivariance),
        ("overfit oracle", criterion_overfit),
        ("ETTh1 benchmark", criterion_benchmark),
        ("loss ablation harness", criterion_losses),
        ("MAC laws", criterion_macs),
        ("NMI direction", criterion_nmi),
        ("determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = run();
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skipped => "SKIPPED",
        };
        println!("{tag} {}. {name}: {} [{:.1}s]", i + 1, v.detail, t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
