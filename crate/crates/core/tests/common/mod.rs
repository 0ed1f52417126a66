//! Shared fixtures and oracle checks for the integration tests and the
//! acceptance suite. Every check returns its measurements so callers can
//! either assert or report them.
#![allow(dead_code)]

use std::collections::BTreeMap;

use projprune::autodiff::{finite_diff, BnMode, ComputeGraph, ConvGeometry, GradTable, Sigma, Var};
use projprune::importance::{score_random, ImportanceReport, ScoreOptions};
use projprune::injection::{d_gradient_from, extend_all, with_diagonals, InjectionConfig};
use projprune::model::{build_model, LayerSpec, Mode, Model, ModelSpec};
use projprune::pruner::{apply, mask, plan_global, plan_layerwise, RatioSpec};
use projprune::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const RESNET_DESK: &str = include_str!("../../../../configs/resnet_desk.toml");

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), normal_vec(rng, shape.iter().product())).unwrap()
}

// ------------------------------------------------------------ architectures

/// conv → relu chain without normalization, strided second conv.
pub fn plain_cnn() -> ModelSpec {
    ModelSpec {
        name: "plain_cnn".into(),
        input: vec![2, 6, 6],
        layers: vec![
            LayerSpec::conv("c1", 2, 4, 3, 1, 1),
            LayerSpec::relu("r1"),
            LayerSpec::conv("c2", 4, 6, 3, 2, 1),
            LayerSpec::relu("r2"),
            LayerSpec::avg_pool("pool", None),
            LayerSpec::flatten("flat"),
            LayerSpec::dense("fc", 6, 3),
        ],
    }
}

/// conv → bn → relu twice, then a hidden dense layer on flattened maps.
pub fn bn_chain() -> ModelSpec {
    ModelSpec {
        name: "bn_chain".into(),
        input: vec![3, 5, 5],
        layers: vec![
            LayerSpec::conv("c1", 3, 5, 3, 1, 1),
            LayerSpec::bn("b1", 5),
            LayerSpec::relu("r1"),
            LayerSpec::conv("c2", 5, 4, 3, 2, 0),
            LayerSpec::bn("b2", 4),
            LayerSpec::relu("r2"),
            LayerSpec::flatten("flat"),
            LayerSpec::dense("hidden", 16, 6),
            LayerSpec::relu("r3"),
            LayerSpec::dense("fc", 6, 4),
        ],
    }
}

/// Two-block residual network with a projection skip.
pub fn small_residual() -> ModelSpec {
    ModelSpec {
        name: "small_residual".into(),
        input: vec![2, 6, 6],
        layers: vec![
            LayerSpec::conv("stem", 2, 4, 3, 1, 1),
            LayerSpec::bn("stem.bn", 4),
            LayerSpec::relu("stem.relu"),
            LayerSpec::conv("a.conv1", 4, 4, 3, 1, 1),
            LayerSpec::bn("a.bn1", 4),
            LayerSpec::relu("a.relu1"),
            LayerSpec::conv("a.conv2", 4, 4, 3, 1, 1),
            LayerSpec::bn("a.bn2", 4),
            LayerSpec::add("a.add", "a.bn2", "stem.relu"),
            LayerSpec::relu("a.out"),
            LayerSpec::conv("b.conv1", 4, 6, 3, 2, 1),
            LayerSpec::bn("b.bn1", 6),
            LayerSpec::relu("b.relu1"),
            LayerSpec::conv("b.conv2", 6, 6, 3, 1, 1),
            LayerSpec::bn("b.bn2", 6),
            LayerSpec::conv("b.skip", 4, 6, 1, 2, 0).from(&["a.out"]),
            LayerSpec::bn("b.skip_bn", 6),
            LayerSpec::add("b.add", "b.bn2", "b.skip_bn"),
            LayerSpec::relu("b.out"),
            LayerSpec::avg_pool("pool", None),
            LayerSpec::flatten("flat"),
            LayerSpec::dense("fc", 6, 3),
        ],
    }
}

pub fn resnet_desk() -> ModelSpec {
    ModelSpec::from_toml_str(RESNET_DESK).unwrap()
}

pub fn architectures() -> Vec<ModelSpec> {
    vec![plain_cnn(), bn_chain(), small_residual(), resnet_desk()]
}

/// A freshly built model whose normalization parameters and running
/// statistics are perturbed away from their identity initialization.
pub fn randomized(spec: &ModelSpec, seed: u64) -> Model {
    let model = build_model(spec, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let mut state = model.state();
    let names: Vec<String> = state.names().cloned().collect();
    for name in names {
        let t = state.get_mut(&name).unwrap();
        let kind = name.rsplit('.').next().unwrap();
        let is_bn = model
            .layers()
            .iter()
            .any(|l| matches!(l.kind, projprune::model::LayerKind::BatchNorm { .. }) && name.starts_with(&format!("{}.", l.name)));
        if !is_bn {
            continue;
        }
        for v in t.data_mut() {
            *v = match kind {
                "weight" => r.random_range(0.5..1.5),
                "bias" => r.random_range(-0.5..0.5),
                "running_mean" => r.random_range(-0.3..0.3),
                "running_var" => r.random_range(0.5..2.0),
                _ => *v,
            };
        }
    }
    Model::from_checkpoint(spec, &state).unwrap()
}

pub fn batch_shape(spec: &ModelSpec, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(&spec.input);
    s
}

pub fn logits(model: &Model, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = ComputeGraph::new();
    let pass = model.forward(&mut g, x.clone(), mode).unwrap();
    g.value(pass.logits).clone()
}

pub fn loss_and_grads(model: &Model, x: &Tensor, labels: &[usize]) -> (f64, GradTable) {
    let mut g = ComputeGraph::new();
    let (loss, _) = model.loss(&mut g, x.clone(), labels, Mode::Train).unwrap();
    let l = g.value(loss).item().unwrap();
    (l, g.backward().unwrap())
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

// ------------------------------------------------------------ ψ identity

#[derive(Debug, Default)]
pub struct PsiIdentity {
    pub inputs: usize,
    /// Logit entries whose bits differ between original and extended model.
    pub differing_bits: usize,
    pub max_weight_grad_diff: f64,
}

/// Forward outputs (both modes) and weight gradients of each architecture
/// with and without injection, over `inputs` random samples.
pub fn psi_identity(inputs: usize, seed: u64) -> PsiIdentity {
    let mut out = PsiIdentity::default();
    for (a, spec) in architectures().iter().enumerate() {
        let model = randomized(spec, seed + a as u64);
        let ext = extend_all(&model, &InjectionConfig::default()).unwrap();
        let mut r = rng(seed * 31 + a as u64);
        let batch = 10;
        for _ in 0..inputs.div_ceil(batch) {
            let x = normal(&mut r, &batch_shape(spec, batch));
            for mode in [Mode::Train, Mode::Eval] {
                let (p, q) = (logits(&model, &x, mode), logits(&ext, &x, mode));
                out.differing_bits += p
                    .data()
                    .iter()
                    .zip(q.data())
                    .filter(|(u, v)| u.to_bits() != v.to_bits())
                    .count();
            }
            let y = labels(&mut r, batch, model.classes());
            let (_, g0) = loss_and_grads(&model, &x, &y);
            let (_, g1) = loss_and_grads(&ext, &x, &y);
            for (name, t) in &g0 {
                let u = &g1[name];
                for (p, q) in t.data().iter().zip(u.data()) {
                    out.max_weight_grad_diff = out.max_weight_grad_diff.max((p - q).abs());
                }
            }
            out.inputs += batch;
        }
    }
    out
}

// ------------------------------------------------------------ finite differences

/// Relative error with an absolute floor so that gradients that are zero
/// up to rounding do not dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub const OP_KINDS: [&str; 16] = [
    "add",
    "mul",
    "affine",
    "square",
    "sum",
    "relu",
    "dense",
    "conv2d",
    "batch_norm_batch",
    "batch_norm_running",
    "avg_pool",
    "flatten",
    "concat",
    "psi_relu",
    "psi_identity",
    "softmax_cross_entropy",
];

type Builder = Box<dyn Fn(&mut ComputeGraph, &[Var]) -> Result<Var>>;

/// Entries within this distance of a ReLU kink are moved away from it.
fn off_kink(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
    }
}

/// A random instance of one op kind: its parameter tensors and a builder.
fn op_case(kind: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    let n = r.random_range(1..4);
    let c = r.random_range(1..4);
    let hw = r.random_range(3..6);
    match kind {
        "add" | "mul" => {
            let s = [n, c, hw];
            let mul = kind == "mul";
            (
                vec![normal(r, &s), normal(r, &s)],
                Box::new(move |g, v| if mul { g.mul(v[0], v[1]) } else { g.add(v[0], v[1]) }),
            )
        }
        "affine" => {
            let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
            (vec![normal(r, &[n, c])], Box::new(move |g, v| g.affine(v[0], a, b)))
        }
        "square" => (vec![normal(r, &[n, c, hw])], Box::new(|g, v| g.square(v[0]))),
        "sum" => (vec![normal(r, &[n, c])], Box::new(|g, v| g.sum(v[0]))),
        "relu" => {
            let mut x = normal(r, &[n, c, hw]);
            off_kink(&mut x);
            (vec![x], Box::new(|g, v| g.relu(v[0])))
        }
        "dense" => {
            let (i, o) = (r.random_range(1..6), r.random_range(1..5));
            let bias = r.random_bool(0.5);
            let mut ts = vec![normal(r, &[n, i]), normal(r, &[o, i])];
            if bias {
                ts.push(normal(r, &[o]));
            }
            (ts, Box::new(move |g, v| g.dense(v[0], v[1], v.get(2).copied())))
        }
        "conv2d" => {
            let k = [1, 3][r.random_range(0..2)];
            let geom = ConvGeometry {
                stride: r.random_range(1..3),
                padding: r.random_range(0..2),
            };
            let co = r.random_range(1..4);
            let bias = r.random_bool(0.5);
            let mut ts = vec![normal(r, &[n, c, hw, hw]), normal(r, &[co, c, k, k])];
            if bias {
                ts.push(normal(r, &[co]));
            }
            (ts, Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), geom)))
        }
        "batch_norm_batch" => {
            let n = n + 1;
            let shape = if r.random_bool(0.5) { vec![n, c, hw, hw] } else { vec![n, c] };
            let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
            (
                vec![normal(r, &shape), Tensor::from_vec(gamma), normal(r, &[c])],
                Box::new(|g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Batch)),
            )
        }
        "batch_norm_running" => {
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            (
                vec![normal(r, &[n, c, hw, hw]), normal(r, &[c]), normal(r, &[c])],
                Box::new(move |g, v| {
                    g.batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        BnMode::Running {
                            mean: mean.clone(),
                            var: var.clone(),
                        },
                    )
                }),
            )
        }
        "avg_pool" => {
            let kernel = if r.random_bool(0.5) { None } else { Some(2) };
            let hw = if kernel.is_some() { 4 } else { hw };
            (vec![normal(r, &[n, c, hw, hw])], Box::new(move |g, v| g.avg_pool(v[0], kernel)))
        }
        "flatten" => (vec![normal(r, &[n, c, hw, hw])], Box::new(|g, v| g.flatten(v[0]))),
        "concat" => {
            let c2 = r.random_range(1..4);
            (
                vec![normal(r, &[n, c, hw, hw]), normal(r, &[n, c2, hw, hw])],
                Box::new(|g, v| g.concat(&[v[0], v[1]])),
            )
        }
        "psi_relu" | "psi_identity" => {
            let sigma = if kind == "psi_relu" { Sigma::Relu } else { Sigma::Identity };
            let mut x = normal(r, &[n, c, hw, hw]);
            off_kink(&mut x);
            (
                vec![x, normal(r, &[c]), normal(r, &[c])],
                Box::new(move |g, v| g.psi(v[0], v[1], v[2], sigma)),
            )
        }
        "softmax_cross_entropy" => {
            let k = r.random_range(2..5);
            let y = labels(r, n, k);
            (
                vec![normal(r, &[n, k])],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &y)),
            )
        }
        other => panic!("unknown op kind {other}"),
    }
}

fn param_name(i: usize) -> String {
    format!("p{i}")
}

/// `Σ weights ⊙ op(params)`, or the op output itself when scalar.
fn case_loss(build: &Builder, store: &ParamStore, count: usize, weights: &Option<Tensor>) -> Result<(ComputeGraph, Var)> {
    let mut g = ComputeGraph::new();
    let vars = (0..count)
        .map(|i| g.param(param_name(i), store.require(&param_name(i))?.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let loss = match weights {
        Some(w) => {
            let w = g.input(w.clone())?;
            let m = g.mul(out, w)?;
            g.sum(m)?
        }
        None => out,
    };
    g.set_loss(loss)?;
    Ok((g, loss))
}

#[derive(Debug, Default)]
pub struct FdSummary {
    pub trials: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl FdSummary {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            if e > self.max_rel_err {
                self.max_rel_err = e;
            }
            self.worst = what();
        }
    }
}

pub const FD_STEP: f64 = 1e-6;

/// `trials` random op instances cycling through every op kind; every
/// entry of every input is checked against a central difference.
pub fn op_gradients(trials: usize, seed: u64) -> FdSummary {
    let mut r = rng(seed);
    let mut summary = FdSummary::default();
    for t in 0..trials {
        let kind = OP_KINDS[t % OP_KINDS.len()];
        let (inputs, build) = op_case(kind, &mut r);
        let count = inputs.len();
        let mut store = ParamStore::new();
        for (i, x) in inputs.into_iter().enumerate() {
            store.insert(param_name(i), x);
        }
        let probe = {
            let mut g = ComputeGraph::new();
            let vars: Vec<Var> = (0..count)
                .map(|i| g.param(param_name(i), store.get(&param_name(i)).unwrap().clone()).unwrap())
                .collect();
            let out = build(&mut g, &vars).unwrap();
            g.value(out).shape().to_vec()
        };
        let weights = (!probe.is_empty()).then(|| normal(&mut r, &probe));
        let (mut g, _) = case_loss(&build, &store, count, &weights).unwrap();
        let grads = g.backward().unwrap();
        for i in 0..count {
            let name = param_name(i);
            let numel = store.get(&name).unwrap().numel();
            for j in 0..numel {
                let analytic = grads.get(&name).map_or(0.0, |t| t.data()[j]);
                let numeric = finite_diff(&mut store, &name, j, FD_STEP, |s| {
                    let (g, l) = case_loss(&build, s, count, &weights)?;
                    g.value(l).item()
                })
                .unwrap();
                summary.record(|| format!("{kind} input {i} entry {j}"), analytic, numeric);
            }
        }
        summary.trials += 1;
    }
    summary
}

/// Every injected diagonal entry of every architecture against a central
/// difference of the extended model's train-mode loss.
pub fn d_entry_gradients(seed: u64) -> FdSummary {
    let mut summary = FdSummary::default();
    for (a, spec) in architectures().iter().enumerate() {
        let model = randomized(spec, seed + a as u64);
        let ext = extend_all(&model, &InjectionConfig::default()).unwrap();
        let mut r = rng(seed * 7 + a as u64);
        let x = normal(&mut r, &batch_shape(spec, 6));
        let y = labels(&mut r, 6, model.classes());
        let (_, grads) = loss_and_grads(&ext, &x, &y);
        let dg = d_gradient_from(&ext, &grads).unwrap();
        let sites = ext.extension().unwrap().to_vec();
        let loss_at = |target: &str, d: Vec<f64>, dbar: Vec<f64>| -> f64 {
            let m = with_diagonals(&ext, target, d, dbar).unwrap();
            let mut g = ComputeGraph::new();
            let (l, _) = m.loss(&mut g, x.clone(), &y, Mode::Train).unwrap();
            g.value(l).item().unwrap()
        };
        for (site, grad) in sites.iter().zip(&dg) {
            for which in ["d", "dbar"] {
                let analytic = if which == "d" { &grad.d } else { &grad.dbar };
                for (j, &a) in analytic.iter().enumerate() {
                    let shifted = |h: f64| {
                        let (mut d, mut dbar) = (site.d.clone(), site.dbar.clone());
                        if which == "d" {
                            d[j] += h;
                        } else {
                            dbar[j] += h;
                        }
                        loss_at(&site.target, d, dbar)
                    };
                    let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
                    summary.record(|| format!("{} {}.{which}[{j}]", spec.name, site.target), a, numeric);
                }
            }
        }
        summary.trials += 1;
    }
    summary
}

// ------------------------------------------------------------ masking oracle

#[derive(Debug, Default)]
pub struct MaskingSummary {
    pub plans: usize,
    pub inputs: usize,
    pub max_abs_diff: f64,
}

fn compare_plan(
    out: &mut MaskingSummary,
    model: &Model,
    plan: &projprune::pruner::PrunePlan,
    xs: &[Tensor],
) {
    let pruned = apply(plan, model).unwrap();
    let masked = mask(plan, model).unwrap();
    for x in xs {
        for mode in [Mode::Eval, Mode::Train] {
            let (p, q) = (logits(&pruned, x, mode), logits(&masked, x, mode));
            for (u, v) in p.data().iter().zip(q.data()) {
                out.max_abs_diff = out.max_abs_diff.max((u - v).abs());
            }
        }
    }
    out.plans += 1;
}

/// Report whose scores are 0 on `zero` channels and 1 elsewhere.
fn indicator_report(model: &Model, zero: &[(String, usize)]) -> ImportanceReport {
    let mut report = score_random(model, &ScoreOptions::default(), 0).unwrap();
    for e in &mut report.entries {
        e.score = if zero.iter().any(|(l, c)| *l == e.layer && *c == e.channel) { 0.0 } else { 1.0 };
    }
    report
}

/// Pruned-and-rebuilt versus zero-masked outputs for: every single
/// dependency group, layer-wise plans at several ratios and global plans,
/// each from several random score draws.
pub fn masking_oracle(inputs: usize, draws: u64, seed: u64) -> MaskingSummary {
    let mut out = MaskingSummary::default();
    for (a, spec) in architectures().iter().enumerate() {
        let model = randomized(spec, seed + a as u64);
        let mut r = rng(seed * 13 + a as u64);
        let batch = 10;
        let xs: Vec<Tensor> = (0..inputs.div_ceil(batch))
            .map(|_| normal(&mut r, &batch_shape(spec, batch)))
            .collect();
        out.inputs += xs.len() * batch;
        let groups = model.dependency_groups().unwrap();
        let g = groups.len() as f64;
        for group in &groups {
            let zero: Vec<(String, usize)> = group.channels().map(|(l, c)| (l.to_string(), c)).collect();
            let report = indicator_report(&model, &zero);
            let plan = plan_global(&model, &report, 0.5 / g, 1).unwrap();
            assert_eq!(plan.groups.len(), 1, "{}: single-group plan", spec.name);
            compare_plan(&mut out, &model, &plan, &xs);
        }
        for d in 0..draws {
            let report = score_random(&model, &ScoreOptions::default(), seed + d).unwrap();
            for ratio in [0.25, 0.5, 0.75] {
                let plan = plan_layerwise(&model, &report, &RatioSpec::uniform(ratio)).unwrap();
                compare_plan(&mut out, &model, &plan, &xs);
                if let Ok(plan) = plan_global(&model, &report, ratio, 1) {
                    compare_plan(&mut out, &model, &plan, &xs);
                }
            }
        }
    }
    out
}

/// Channel counts per layer, for readable assertion messages.
pub fn widths(model: &Model) -> BTreeMap<String, usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.clone(), model.output_shape(i).first().copied().unwrap_or(0)))
        .collect()
}
