//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr and then asserts. Tests take a shared lock so runtime limits are measured
//! without competing threads.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use cats_cli::config::CliConfig;
use cats_core::align::{
    build_reweight, random_spd, verify_correlation_alignment, verify_probability_alignment, AlignmentInputs, GaussianSpec,
    ReweightMap,
};
use cats_core::backbone::{AdapterKind, BackboneConfig, BackboneModel};
use cats_core::cats::count_parameters;
use cats_core::data::MtsDataset;
use cats_core::diff::{check_gradients, Binding, NodeId, ParamId};
use cats_core::losses::{classification_loss, correlation_alignment_loss, forecasting_loss};
use cats_core::stats::{correlation_shift_test, coral_terms, linear_corr_mmd, Bandwidth, MatrixNorm};
use cats_core::train::{run_ablation, run_gat_approx_study, GatStudyConfig, TrainConfig, RUNG_NAMES};
use cats_core::{Graph, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, ok: bool, detail: String) {
    // the harness only captures the print macros, so this line shows without --nocapture
    let _ = writeln!(std::io::stderr().lock(), "criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn criterion_01_oracle_exactness() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_cov, mut worst_corr) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let d = 1 + i % 16;
        let source = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 1).unwrap();
        let target = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 1).unwrap();
        let map = build_reweight(&source, &target).unwrap();
        let mapped = map.matrix.matmul(&target.covariance).unwrap().matmul(&map.matrix.transpose().unwrap()).unwrap();
        worst_cov = worst_cov.max(mapped.max_abs_diff(&source.covariance));
        let corr = verify_correlation_alignment(AlignmentInputs::Exact { source: &source, target: &target }, &map.matrix).unwrap();
        worst_corr = worst_corr.max(corr);
    }
    let t = start.elapsed();
    let ok = worst_cov <= 1e-8 && worst_corr <= 1e-8 && t < Duration::from_secs(5);
    verdict(1, ok, format!("max cov diff {worst_cov:.2e}, max corr diff {worst_corr:.2e}, {:.2}s", secs(t)));
}

#[test]
fn criterion_02_gaussian_empirical_alignment() {
    let _guard = serial();
    let start = Instant::now();
    let cov = |v: [f64; 16]| Tensor::new([4, 4], v.to_vec()).unwrap();
    let mean = |v: [f64; 4]| Tensor::new([4, 1], v.to_vec()).unwrap();
    #[rustfmt::skip]
    let source = GaussianSpec::new(
        mean([0.0, 1.0, -1.0, 0.5]),
        cov([1.0, 0.7, 0.2, 0.0,
             0.7, 1.5, 0.4, 0.3,
             0.2, 0.4, 1.0, -0.5,
             0.0, 0.3, -0.5, 2.0]),
    ).unwrap();
    #[rustfmt::skip]
    let target = GaussianSpec::new(
        mean([2.0, -1.0, 0.0, 3.0]),
        cov([2.0, -0.8, 0.0, 0.3,
             -0.8, 1.0, 0.1, 0.0,
             0.0, 0.1, 0.5, 0.2,
             0.3, 0.0, 0.2, 1.0]),
    ).unwrap();
    let map = build_reweight(&source, &target).unwrap();
    let aligned = verify_probability_alignment(&source, &target, &map, 50_000, 3).unwrap();
    let control = verify_probability_alignment(&source, &target, &ReweightMap::identity(4), 50_000, 3).unwrap();
    let t = start.elapsed();
    let ok = aligned.corr_diff <= 0.02 && control.corr_diff > 0.1 && t < Duration::from_secs(30);
    verdict(
        2,
        ok,
        format!("aligned {:.4} (<= 0.02), identity control {:.4} (> 0.1), {:.2}s", aligned.corr_diff, control.corr_diff, secs(t)),
    );
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Primitive {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Inputs drawn from this range; strictly positive for log, sqrt and divisors.
    range: (f64, f64),
    /// Distance from zero that inputs to kinked functions must keep.
    kink: Option<f64>,
    build: Build,
}

/// Contracts an arbitrary output with a fixed random weight so every output
/// entry contributes to the scalar.
fn contract(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn unary(name: &'static str, range: (f64, f64), kink: Option<f64>, f: fn(&mut Graph, NodeId) -> Result<NodeId>) -> Primitive {
    Primitive { name, shapes: vec![vec![3, 4]], range, kink, build: Box::new(move |g, x| { let y = f(g, x[0])?; contract(g, y, 9) }) }
}

fn binary(name: &'static str, shapes: [&[usize]; 2], range: (f64, f64), f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        kink: None,
        build: Box::new(move |g, x| {
            let y = f(g, x[0], x[1])?;
            contract(g, y, 11)
        }),
    }
}

fn primitives() -> Vec<Primitive> {
    let r = (-2.0, 2.0);
    let pos = (0.5, 2.0);
    vec![
        binary("add", [&[3, 4], &[3, 4]], r, |g, a, b| g.add(a, b)),
        binary("add-broadcast", [&[3, 4], &[1, 4]], r, |g, a, b| g.add(a, b)),
        binary("sub", [&[3, 4], &[3, 1]], r, |g, a, b| g.sub(a, b)),
        binary("mul", [&[2, 3, 4], &[3, 4]], r, |g, a, b| g.mul(a, b)),
        binary("div", [&[3, 4], &[3, 4]], pos, |g, a, b| g.div(a, b)),
        binary("matmul", [&[3, 5], &[5, 2]], r, |g, a, b| g.matmul(a, b)),
        binary("depthwise-conv1d", [&[3, 7], &[3, 5]], r, |g, a, b| g.conv1d_depthwise(a, b, 2)),
        binary("outer", [&[4], &[3]], r, |g, a, b| g.outer(a, b)),
        binary("pairwise-sqdist", [&[3, 4], &[2, 4]], r, |g, a, b| g.pairwise_sqdist(a, b)),
        binary("concat", [&[2, 4], &[3, 4]], r, |g, a, b| g.concat(&[a, b], 0)),
        unary("transpose", r, None, |g, x| g.transpose(x)),
        unary("reshape", r, None, |g, x| g.reshape(x, [2, 6])),
        unary("slice", r, None, |g, x| g.slice(x, 1, 1, 3)),
        unary("softmax", r, None, |g, x| g.softmax(x)),
        unary("log-softmax", r, None, |g, x| g.log_softmax(x)),
        unary("leaky-relu", r, Some(1e-3), |g, x| g.leaky_relu(x)),
        unary("gelu", r, None, |g, x| g.gelu(x)),
        unary("relu", r, Some(1e-3), |g, x| g.relu(x)),
        unary("exp", r, None, |g, x| g.exp(x)),
        unary("log", pos, None, |g, x| g.log(x)),
        unary("abs", r, Some(1e-3), |g, x| g.abs(x)),
        unary("sqrt", pos, None, |g, x| g.sqrt(x)),
        unary("mean", r, None, |g, x| g.mean(x)),
        unary("mean-axis", r, None, |g, x| g.mean_axis(x, 0)),
        unary("sum", r, None, |g, x| g.sum(x)),
        unary("sum-axis", r, None, |g, x| g.sum_axis(x, 1)),
        unary("frobenius-norm-squared", r, None, |g, x| g.frobenius_sq(x)),
        unary("scalar-scale", r, None, |g, x| g.scale(x, -1.7)),
    ]
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], range: (f64, f64), kink: Option<f64>) -> Tensor {
    let mut t = uniform(rng, shape, range.0, range.1);
    if let Some(k) = kink {
        t.data_mut().iter_mut().for_each(|v| {
            if v.abs() < k {
                *v = if *v < 0.0 { -0.5 } else { 0.5 };
            }
        });
    }
    t
}

fn small_model(kind: AdapterKind, seed: u64) -> BackboneModel {
    let cfg = BackboneConfig { d_model: 4, n_blocks: 2, n_heads: 2, d_ff: 6, window_len: 5, n_vars: 2, n_classes: 3 };
    let mut m = BackboneModel::new(cfg, seed).unwrap();
    m.attach_adapters(kind, 2, 3, 5, seed + 1).unwrap();
    // nonzero up-projections so gradients reach every adapter parameter
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.iter_mut().filter(|p| p.name.contains("w_up") || p.name.contains("tdc_up")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    m
}

/// Worst relative error over the adapter and forecasting-head parameters.
fn loss_gradcheck(model: &BackboneModel, loss: impl Fn(&mut Graph, &mut Binding) -> Result<NodeId>) -> f64 {
    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("adapter") || p.name.starts_with("head_f"))
        .map(|p| model.params.find(&p.name).unwrap())
        .collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| model.params.value(id).clone()).collect();
    check_gradients(
        |g, nodes| {
            let mut b = Binding::new();
            for (&id, &n) in ids.iter().zip(nodes) {
                b.bind(id, n);
            }
            loss(g, &mut b)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
    .max_relative_error
}

#[test]
fn criterion_03_gradient_correctness() {
    let _guard = serial();
    let start = Instant::now();
    const INSTANCES: u64 = 20;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for p in primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = 0.0f64;
        for _ in 0..INSTANCES {
            let inputs: Vec<Tensor> = p.shapes.iter().map(|s| draw(&mut rng, s, p.range, p.kink)).collect();
            e = e.max(check_gradients(|g, x| (p.build)(g, x), &inputs, 1e-5).unwrap().max_relative_error);
        }
        worst.push((p.name.to_string(), e));
    }

    let mut e = 0.0f64;
    for s in 0..INSTANCES {
        let kind = if s % 2 == 0 { AdapterKind::Cats } else { AdapterKind::Linear };
        let m = small_model(kind, s);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let w: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 5], -1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        e = e.max(loss_gradcheck(&m, |g, b| Ok(classification_loss(g, b, &m, &w, &labels)?.0)));
    }
    worst.push(("classification-loss".into(), e));

    let mut e = 0.0f64;
    for s in 0..INSTANCES {
        let m = small_model(AdapterKind::Cats, 200 + s);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let series = uniform(&mut rng, &[2, 12], -1.0, 1.0);
        e = e.max(loss_gradcheck(&m, |g, b| Ok(forecasting_loss(g, b, &m, std::slice::from_ref(&series), 5, 1)?.0)));
    }
    worst.push(("forecasting-loss".into(), e));

    let mut e = 0.0f64;
    for s in 0..INSTANCES {
        let m = small_model(AdapterKind::Cats, 400 + s);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let ws: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 5], -1.0, 1.0)).collect();
        let wt: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 5], -1.5, 1.5)).collect();
        e = e.max(loss_gradcheck(&m, |g, b| {
            let s = m.forward(g, b, &ws)?;
            let t = m.forward(g, b, &wt)?;
            correlation_alignment_loss(g, &s, &t, Bandwidth::Fixed(0.3))
        }));
    }
    worst.push(("correlation-alignment-loss".into(), e));

    let t = start.elapsed();
    let bad: Vec<&(String, f64)> = worst.iter().filter(|(_, e)| !(*e < 1e-4)).collect();
    let max = worst.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    let ok = bad.is_empty() && t < Duration::from_secs(60);
    verdict(3, ok, format!("{} checks x {INSTANCES} instances, worst rel err {max:.2e}, failing {bad:?}, {:.1}s", worst.len(), secs(t)));
}

#[test]
fn criterion_04_identity_at_init() {
    let _guard = serial();
    let cfg = BackboneConfig { d_model: 16, n_blocks: 3, n_heads: 4, d_ff: 32, window_len: 48, n_vars: 4, n_classes: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let windows: Vec<Tensor> = (0..100).map(|_| uniform(&mut rng, &[4, 48], -3.0, 3.0)).collect();
    let plain = BackboneModel::new(cfg.clone(), 7).unwrap();
    let reference = plain.logits(&windows).unwrap();
    let mut equal = Vec::new();
    for kind in [AdapterKind::Linear, AdapterKind::Cats] {
        let mut m = plain.clone();
        m.attach_adapters(kind, 4, 5, 48, 8).unwrap();
        equal.push((kind, m.logits(&windows).unwrap() == reference));
    }
    let ok = equal.iter().all(|(_, e)| *e);
    verdict(4, ok, format!("bitwise equal logits on 100 windows: {equal:?}"));
}

#[test]
fn criterion_05_shift_test_calibration_and_power() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = CliConfig { data: cats_cli::config::DataConfig { n_per_class: 50, ..Default::default() }, ..Default::default() };
    // null: two halves of a random split of one pooled domain
    let pooled = CliConfig { data: cats_cli::config::DataConfig { n_per_class: 100, ..cfg.data.clone() }, ..cfg.clone() };
    let mut rejections = 0;
    for trial in 0..500u64 {
        let pool = pooled.domain("pool", 0.0, 10_000 + trial).unwrap();
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(trial));
        let half = |r: &[usize]| MtsDataset::new("half", pool.n_classes, r.iter().map(|&i| pool.samples[i].clone()).collect()).unwrap();
        let (a, b) = idx.split_at(pool.len() / 2);
        rejections += correlation_shift_test(&half(a), &half(b)).unwrap().reject as usize;
    }
    let type_one = rejections as f64 / 500.0;
    let mut detected = 0;
    for seed in 0..20u64 {
        let c = CliConfig { train: TrainConfig { seed, ..Default::default() }, ..cfg.clone() };
        let (a, b) = c.synthetic_pair().unwrap();
        assert_eq!(a.len(), 200);
        detected += correlation_shift_test(&a, &b).unwrap().reject as usize;
    }
    let power = detected as f64 / 20.0;
    let t = start.elapsed();
    let ok = (0.02..=0.09).contains(&type_one) && power >= 0.9 && t < Duration::from_secs(120);
    verdict(5, ok, format!("type-I {type_one:.3} in [0.02, 0.09], power {power:.2} (>= 0.9), {:.1}s", secs(t)));
}

#[test]
fn criterion_06_coral_inequality() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..100 {
        let dim = rng.random_range(2..12);
        let (ns, nt) = (rng.random_range(2..20), rng.random_range(2..20));
        let shift = rng.random_range(0.0..2.0);
        let hs: Vec<Vec<f64>> = (0..ns).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ht: Vec<Vec<f64>> = (0..nt).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) + shift).collect()).collect();
        let mmd: f64 = linear_corr_mmd(&hs, &ht).unwrap();
        let terms = coral_terms::<f64, _>(&hs, &ht, MatrixNorm::Frobenius).unwrap();
        let slack = terms.coral + terms.mean + 1e-9 - mmd;
        tightest = tightest.min(slack);
        violations += (slack < 0.0) as usize;
    }
    verdict(6, violations == 0, format!("{violations} violations in 100 batches, smallest slack {tightest:.3e}"));
}

#[test]
fn criterion_07_finite_width_gat() {
    let _guard = serial();
    let start = Instant::now();
    let rows = run_gat_approx_study(&GatStudyConfig::default()).unwrap();
    let t = start.elapsed();
    let errs: Vec<f64> = rows.iter().map(|r| r.relative_error).collect();
    let violations = errs.windows(2).filter(|w| w[1] > w[0]).count();
    let widest = rows.iter().find(|r| r.width == 256).map(|r| r.relative_error).unwrap_or(f64::INFINITY);
    let ok = widest < 0.05 && violations <= 1 && t < Duration::from_secs(180);
    let table: Vec<String> = rows.iter().map(|r| format!("{}:{:.4}", r.width, r.relative_error)).collect();
    verdict(7, ok, format!("errors [{}], width 256 {widest:.4} (< 0.05), {violations} increases, {:.1}s", table.join(" "), secs(t)));
}

#[test]
fn criterion_08_parameter_scaling() {
    let _guard = serial();
    let defaults = CliConfig::default();
    let t = &defaults.train;
    let base = t.backbone(defaults.data.n_vars, defaults.data.n_classes);
    let at_default = count_parameters(&base, t.kernel).ratio;
    let ratios: Vec<f64> = [128, 256, 512]
        .iter()
        .map(|&d| count_parameters(&BackboneConfig { d_model: d, d_ff: 2 * d, ..base.clone() }, t.kernel).ratio)
        .collect();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    verdict(8, at_default < 0.05 && decreasing, format!("default ratio {at_default:.4} (< 0.05), ratios at 128/256/512 {ratios:.4?}"));
}

/// Desk-scale training settings for the synthetic adaptation study.
fn uda_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d_model: 16,
        d_ff: 32,
        n_blocks: 2,
        n_heads: 4,
        pretrain_epochs: 4,
        pretrain_lr: 3e-3,
        lr: 3e-3,
        lambda_corr: 30.0,
        lambda_f: 0.05,
        adapt_steps: 500,
        adapter_rank: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_09_directional_uda() {
    let _guard = serial();
    let start = Instant::now();
    let mut ladders = Vec::new();
    for seed in 0..5 {
        let cfg = CliConfig { train: uda_config(seed), ..CliConfig::default() };
        let (source, target) = cfg.synthetic_pair().unwrap();
        assert_eq!((source.len(), source.n_classes), (500, 4));
        let rungs = run_ablation(&source, &target, &cfg.train).unwrap();
        let accs: Vec<f64> = rungs.iter().map(|r| r.target_accuracy).collect();
        println!("  seed {seed}: {accs:.3?} at {:.0}s", secs(start.elapsed()));
        ladders.push(accs);
    }
    let t = start.elapsed();
    let mean: Vec<f64> = (0..RUNG_NAMES.len()).map(|i| ladders.iter().map(|l| l[i]).sum::<f64>() / ladders.len() as f64).collect();
    let gain = mean[RUNG_NAMES.len() - 1] - mean[0];
    let violations = mean.windows(2).filter(|w| w[1] < w[0]).count();
    let ok = gain >= 0.10 && violations <= 2 && t < Duration::from_secs(20 * 60);
    verdict(
        9,
        ok,
        format!("mean ladder {mean:.3?}, gain {:.1} points (>= 10), {violations} decreases (<= 2), {:.0}s", gain * 100.0, secs(t)),
    );
}

fn catslab(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_catslab")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

/// Every file under `dir` by name, with its bytes.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_10_determinism() {
    let _guard = serial();
    let small = [
        "--d-model", "8", "--d-ff", "16", "--n-blocks", "2", "--n-heads", "2", "--window-len", "16", "--stride", "16",
        "--pretrain-epochs", "1", "--adapt-steps", "4", "--batch-size", "4", "--vote-count", "3", "--n-per-class", "5",
        "--n-steps", "48", "--seed", "3",
    ];
    let run_all = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let data = root.join("data");
        let runs = root.join("runs");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let with = |head: Vec<String>| -> Vec<u8> {
            let mut args: Vec<String> = head;
            args.extend(small.iter().map(|s| s.to_string()));
            catslab(&args.iter().map(String::as_str).collect::<Vec<_>>())
        };
        let mut outputs = Vec::new();
        outputs.push(("gen-data".to_string(), with(vec!["gen-data".into(), "--out".into(), s(&data)])));
        let (src, tgt) = (s(&data.join("source.mts")), s(&data.join("target.mts")));
        with(vec!["pretrain".into(), src.clone(), "--out".into(), s(&runs)]);
        let ckpt = snapshot(&runs).into_iter().find(|(n, _)| n.starts_with("pretrained-")).unwrap().0;
        let ckpt = s(&runs.join(ckpt));
        outputs.push(("adapt".into(), with(vec!["adapt".into(), src.clone(), tgt.clone(), "--checkpoint".into(), ckpt.clone(), "--out".into(), s(&runs)])));
        outputs.push(("eval".into(), with(vec!["eval".into(), tgt.clone(), "--checkpoint".into(), ckpt])));
        outputs.push(("ablate".into(), with(vec!["ablate".into(), src.clone(), tgt.clone(), "--out".into(), s(&runs)])));
        outputs.push(("detect-shift".into(), catslab(&["detect-shift", &src, &tgt])));
        outputs.push(("pair-rank".into(), catslab(&["pair-rank", &s(&data)])));
        outputs.push(("gat-approx".into(), catslab(&["gat-approx", "--widths", "4,8", "--steps", "5", "--samples", "8"])));
        outputs.push(("scaling".into(), catslab(&["scaling"])));
        let report = snapshot(&runs).into_iter().find(|(n, _)| n.starts_with("report-")).unwrap().0;
        outputs.push(("report".into(), catslab(&["report", &s(&runs.join(report))])));
        // stdout mentions the run directory, so compare it with the root stripped
        let root_str = s(root);
        let mut all: Vec<(String, Vec<u8>)> = outputs
            .into_iter()
            .map(|(n, o)| (n, String::from_utf8_lossy(&o).replace(&root_str, "<root>").into_bytes()))
            .collect();
        all.extend(snapshot(&data).into_iter().map(|(n, b)| (format!("data/{n}"), b)));
        all.extend(snapshot(&runs).into_iter().map(|(n, b)| (format!("runs/{n}"), b)));
        all
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = run_all(a.path());
    let second = run_all(b.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let ok = first.len() == second.len() && differing.is_empty() && names.iter().any(|n| n.starts_with("runs/report-"));
    verdict(10, ok, format!("{} outputs compared, differing {differing:?}", first.len()));
}
