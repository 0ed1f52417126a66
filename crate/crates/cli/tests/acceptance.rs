//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 10 are exact properties of the implementation; a
//! failure there exits nonzero. Criteria 6-9 are measurements on the
//! reference desk-scale experiment and are reported without failing the
//! run, unless `ACCEPTANCE_STRICT=1` is set.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use projprune::experiments::{
    correlation, lambda_sweep, prune_eval, sampling_sweep, Experiment, Overrides, TIMING_FILE,
};
use projprune::importance::{gradient_pass, Correlation, Criterion, ScoreOptions};
use projprune::model::Model;
use projprune::projective::{angular_distance, embed, l2, proscore, ProjectivePoint};
use rand::Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
    elapsed: Duration,
    limit: Option<Duration>,
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn run(
    id: usize,
    name: &'static str,
    hard: bool,
    limit: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let o = Outcome {
        id,
        name,
        pass: ok && in_time,
        hard,
        detail: if in_time { detail } else { format!("{detail}; over the time limit") },
        elapsed,
        limit,
    };
    let limit = o.limit.map_or(String::new(), |l| format!(" / limit {}s", l.as_secs()));
    println!(
        "criterion {:>2} [{}] {}: {} ({:.1}s{limit})",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.elapsed.as_secs_f64(),
    );
    o
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ------------------------------------------------------------ 1-5

fn psi_identity() -> (bool, String) {
    let r = common::psi_identity(100, 11);
    (
        r.differing_bits == 0 && r.max_weight_grad_diff <= 1e-12,
        format!(
            "{} inputs per architecture x {} architectures, {} differing logit bits, max weight-gradient diff {:.1e}",
            r.inputs / common::architectures().len(),
            common::architectures().len(),
            r.differing_bits,
            r.max_weight_grad_diff
        ),
    )
}

fn gradients() -> (bool, String) {
    let ops = common::op_gradients(100, 12);
    let ds = common::d_entry_gradients(13);
    (
        ops.max_rel_err < 1e-4 && ds.max_rel_err < 1e-4,
        format!(
            "{} op trials ({} kinds, {} entries) max rel err {:.1e} [{}]; {} injected entries max rel err {:.1e} [{}]",
            ops.trials,
            common::OP_KINDS.len(),
            ops.entries,
            ops.max_rel_err,
            ops.worst,
            ds.entries,
            ds.max_rel_err,
            ds.worst
        ),
    )
}

fn projective() -> (bool, String) {
    let mut r = common::rng(14);
    let (mut exact_fail, mut approx_worst, mut cone_worst) = (0, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let f = common::normal_vec(&mut r, n);
        let p = embed(&f).unwrap();
        let k = r.random_range(-30..30);
        let pow2: Vec<f64> = f.iter().map(|v| v * 2f64.powi(k)).collect();
        if embed(&pow2).unwrap() != p {
            exact_fail += 1;
        }
        let c = r.random_range(1e-3..1e3);
        let scaled: Vec<f64> = f.iter().map(|v| v * c).collect();
        let q = embed(&scaled).unwrap();
        for (a, b) in p.normalized().iter().zip(q.normalized()) {
            approx_worst = approx_worst.max((a - b).abs());
        }
        let d = angular_distance(&p, &ProjectivePoint::origin(n));
        cone_worst = cone_worst.max((d - FRAC_PI_4).abs());
    }
    (
        exact_fail == 0 && approx_worst <= 1e-15 && cone_worst < 1e-9,
        format!(
            "1000 pairs: power-of-two scalings exactly equal ({exact_fail} mismatches), arbitrary c>0 within {approx_worst:.1e} per normalized coordinate; max |distance - pi/4| {cone_worst:.1e}"
        ),
    )
}

fn fixed_points() -> (bool, String) {
    let mut r = common::rng(15);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..30);
        let f = common::normal_vec(&mut r, n);
        let g = common::normal_vec(&mut r, n);
        let d = l2(&f);
        let dg: f64 = r.random_range(-5.0..5.0);
        if proscore(&f, &g, d, dg, 0.0).unwrap() != 1.0 {
            bad += 1;
        }
        for lambda in [1.0, 0.1, 0.01, 0.001] {
            if proscore(&f, &vec![0.0; n], d, 0.0, lambda).unwrap() != 1.0 {
                bad += 1;
            }
        }
    }
    // The same identities on the quantities a real gradient pass produces.
    let spec = common::resnet_desk();
    let model = common::randomized(&spec, 3);
    let ds = {
        let mut rr = common::rng(4);
        let x = common::normal(&mut rr, &common::batch_shape(&spec, 20));
        let y = common::labels(&mut rr, 20, 10);
        projprune::data::Dataset::new(x, y, 10, projprune::data::Split::Train).unwrap()
    };
    let pass = gradient_pass(&model, &ds, &ScoreOptions::default(), 1.0, 0).unwrap();
    let mut model_bad = 0;
    for (i, h) in pass.handles.iter().enumerate() {
        if pass.d[i] != l2(&h.vector) || proscore(&h.vector, &pass.filter_grads[i], pass.d[i], pass.d_grads[i], 0.0).unwrap() != 1.0 {
            model_bad += 1;
        }
        for lambda in [1.0, 0.1, 0.01, 0.001] {
            if proscore(&h.vector, &vec![0.0; h.vector.len()], pass.d[i], 0.0, lambda).unwrap() != 1.0 {
                model_bad += 1;
            }
        }
    }
    (
        bad == 0 && model_bad == 0,
        format!(
            "1000 random filters: {bad} violations; {} filters of the reference model: {model_bad} violations",
            pass.handles.len()
        ),
    )
}

fn masking() -> (bool, String) {
    let s = common::masking_oracle(100, 3, 16);
    (
        s.max_abs_diff <= 1e-6,
        format!(
            "{} plans over {} architectures, 100 inputs each, both modes: max |pruned - masked| {:.1e}",
            s.plans,
            common::architectures().len(),
            s.max_abs_diff
        ),
    )
}

// ------------------------------------------------------------ 6-9

struct Reference {
    exp: Experiment,
    train: projprune::data::Dataset,
    test: projprune::data::Dataset,
    model: Model,
    test_accuracy: f64,
}

fn reference(out: &Path) -> Reference {
    let exp = Experiment::load(
        &repo_root().join("configs/reference.toml"),
        &Overrides {
            out_dir: Some(out.to_path_buf()),
            ..Overrides::default()
        },
    )
    .unwrap();
    let (train, test) = exp.data().unwrap();
    let (model, trace) = exp.train_model(exp.config.seed, &train, &test).unwrap();
    let test_accuracy = trace.last().and_then(|r| r.eval_accuracy).unwrap_or(0.0);
    Reference {
        exp,
        train,
        test,
        model,
        test_accuracy,
    }
}

fn lambda_stability(r: &Reference) -> (bool, String) {
    let s = lambda_sweep(&r.exp, &r.model, &r.train).unwrap();
    let unstable = s.unstable_layers();
    let mut min_tau: BTreeMap<&str, f64> = BTreeMap::new();
    for (layer, _, _, tau) in &s.kendall {
        let t = tau.unwrap_or(f64::NAN);
        let e = min_tau.entry(layer.as_str()).or_insert(f64::INFINITY);
        *e = e.min(t);
    }
    let taus: Vec<String> = min_tau.iter().map(|(l, t)| format!("{l}={t:.3}")).collect();
    (
        unstable.is_empty(),
        format!(
            "lambdas {:?} at {:.0}% layer-wise (reference test acc {:.3}); layers with differing sets: {:?}; min Kendall tau per layer: {}",
            s.lambdas,
            100.0 * r.exp.config.sweep.layer_ratio,
            r.test_accuracy,
            unstable,
            taus.join(" ")
        ),
    )
}

fn sampling(r: &Reference) -> (bool, String) {
    let rows = sampling_sweep(&r.exp, &r.model, &r.train, &r.test).unwrap();
    let fractions = r.exp.config.sweep.fractions.clone();
    let mean_of = |f: f64, g: &dyn Fn(&projprune::experiments::SamplingRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|x| x.fraction == f).map(g).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let wall: Vec<f64> = fractions.iter().map(|&f| mean_of(f, &|x| x.wall_seconds)).collect();
    let mut order: Vec<(f64, f64)> = fractions.iter().copied().zip(wall.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing = order.windows(2).all(|w| w[1].1 < w[0].1);
    let overlap = mean_of(0.05, &|x| x.overlap);
    let overlap_max = rows
        .iter()
        .filter(|x| x.fraction == 0.05)
        .map(|x| x.overlap)
        .fold(f64::NEG_INFINITY, f64::max);
    let per_fraction: Vec<String> = fractions
        .iter()
        .map(|&f| {
            format!(
                "{f}: overlap {:.3}, spearman {:.3}, {:.2}s",
                mean_of(f, &|x| x.overlap),
                mean_of(f, &|x| x.spearman_vs_full.unwrap_or(f64::NAN)),
                mean_of(f, &|x| x.wall_seconds)
            )
        })
        .collect();
    (
        overlap >= 0.9 && decreasing,
        format!(
            "fraction 0.05 over {} seeds: overlap mean {overlap:.3} (max {overlap_max:.3}, need >= 0.900); wall time strictly decreasing: {decreasing} [{}]",
            r.exp.config.sweep.seeds.len(),
            per_fraction.join("; ")
        ),
    )
}

fn no_finetune_ordering(r: &Reference) -> (bool, String) {
    let mut exp = r.exp.clone();
    exp.config.sweep.ratios = vec![0.5];
    exp.config.sweep.eval_finetune = false;
    let rows = prune_eval(&exp, &r.train, &r.test).unwrap();
    let acc = |c: Criterion| {
        let v: Vec<f64> = rows.iter().filter(|x| x.criterion == c).map(|x| x.acc_before_ft).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let pro = acc(Criterion::Proscore);
    let others = [Criterion::L1, Criterion::Taylor, Criterion::Fpgm, Criterion::Random];
    let ordered = others.iter().all(|&c| pro >= acc(c));
    let margin = pro - acc(Criterion::Random);
    let listing: Vec<String> = std::iter::once(Criterion::Proscore)
        .chain(others)
        .map(|c| format!("{c}={:.4}", acc(c)))
        .collect();
    (
        ordered && margin > 0.02,
        format!(
            "50% uniform, mean over seeds {:?}: {}; proscore >= all others: {ordered}; margin over random {:+.1} points (need > 2)",
            exp.config.sweep.seeds,
            listing.join(" "),
            100.0 * margin
        ),
    )
}

fn correlation_pattern(r: &Reference) -> (bool, String) {
    let c = correlation(&r.exp, &r.model, &r.train).unwrap();
    let rows = Correlation::row_mean_abs(&c.spearman);
    let idx = |name: &str| c.labels.iter().position(|l| l.starts_with(name)).unwrap();
    let (p, l1, fpgm) = (idx("proscore"), idx("l1"), idx("fpgm"));
    let pro_row = rows[p].unwrap_or(f64::INFINITY);
    let smallest = rows
        .iter()
        .enumerate()
        .all(|(i, v)| i == p || v.is_none_or(|v| pro_row < v));
    let pl = c.spearman[p][l1].unwrap_or(f64::NAN);
    let lf = c.spearman[l1][fpgm].unwrap_or(f64::NAN);
    let listing: Vec<String> = c
        .labels
        .iter()
        .zip(&rows)
        .map(|(l, v)| format!("{l}={:.3}", v.unwrap_or(f64::NAN)))
        .collect();
    (
        smallest && pl < lf,
        format!(
            "row mean |spearman|: {}; proscore row smallest: {smallest}; proscore-l1 {pl:.3} < l1-fpgm {lf:.3}: {}",
            listing.join(" "),
            pl < lf
        ),
    )
}

// ------------------------------------------------------------ 10

fn determinism(scratch: &Path) -> (bool, String) {
    let config = scratch.join("tiny.toml");
    let spec = repo_root().join("configs/resnet_desk.toml");
    std::fs::write(
        &config,
        format!(
            r#"seed = 3
model = "{}"
[dataset]
kind = "synthetic"
classes = 10
train_per_class = 12
test_per_class = 4
shape = [3, 8, 8]
noise = 0.5
[train]
epochs = 1
batch_size = 32
lr = 0.05
momentum = 0.9
schedule = {{ kind = "cosine" }}
[score]
batch_size = 64
[finetune]
epochs = 1
batch_size = 32
lr = 0.01
schedule = {{ kind = "constant" }}
[sweep]
ratios = [0.0, 0.5]
seeds = [1, 2]
fractions = [1.0, 0.5]
"#,
            spec.display()
        ),
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_projprune");
    let commands = [
        "train",
        "score",
        "prune",
        "finetune",
        "eval",
        "sweep-lambda",
        "sweep-sampling",
        "correlate",
    ];
    let mut failures = Vec::new();
    for run in ["a", "b"] {
        for cmd in commands {
            let out = Command::new(bin)
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out-dir")
                .arg(scratch.join(run))
                .output()
                .unwrap();
            if !out.status.success() {
                failures.push(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr).trim()));
            }
        }
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(scratch.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in &names {
        if name == TIMING_FILE {
            continue;
        }
        let a = std::fs::read(scratch.join("a").join(name)).unwrap();
        let b = std::fs::read(scratch.join("b").join(name)).ok();
        compared += 1;
        if b.as_deref() != Some(a.as_slice()) {
            differing.push(name.clone());
        }
    }
    let bad_config = Command::new(bin)
        .args(["score", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    (
        failures.is_empty() && differing.is_empty() && compared > 20 && !bad_config.status.success(),
        format!(
            "{} commands run twice: {compared} files byte-compared ({TIMING_FILE} excluded), differing: {differing:?}; command failures: {failures:?}; missing config exits nonzero: {}",
            commands.len(),
            !bad_config.status.success()
        ),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let scratch = tempfile::tempdir().unwrap();
    println!("acceptance suite (strict = {strict})");
    let mut outcomes = vec![
        run(1, "psi identity", true, secs(10), psi_identity),
        run(2, "gradient correctness", true, secs(60), gradients),
        run(3, "projective invariants", true, secs(5), projective),
        run(4, "score fixed points", true, None, fixed_points),
        run(5, "masking-oracle equivalence", true, secs(30), masking),
    ];
    let start = Instant::now();
    let r = reference(&scratch.path().join("reference"));
    let training = start.elapsed();
    println!(
        "reference model trained in {:.1}s (test accuracy {:.3}); counted toward criterion 6",
        training.as_secs_f64(),
        r.test_accuracy
    );
    let mut c6 = run(6, "lambda sweep stability", false, secs(300), || lambda_stability(&r));
    c6.elapsed += training;
    if c6.limit.is_some_and(|l| c6.elapsed > l) {
        c6.pass = false;
    }
    outcomes.push(c6);
    outcomes.push(run(7, "sampling sensitivity", false, secs(900), || sampling(&r)));
    outcomes.push(run(8, "no-finetune ordering", false, secs(1800), || no_finetune_ordering(&r)));
    outcomes.push(run(9, "correlation pattern", false, secs(300), || correlation_pattern(&r)));
    outcomes.push(run(10, "determinism", true, None, || determinism(scratch.path())));

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance summary: {} passed, {} failed {:?}",
        outcomes.len() - failed.len(),
        failed.len(),
        failed.iter().map(|o| o.id).collect::<Vec<_>>()
    );
    let fatal = failed.iter().any(|o| o.hard || strict);
    if fatal {
        std::process::exit(1);
    }
}
