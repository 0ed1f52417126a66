//! Run configuration and the experiment drivers behind the CLI.
//!
//! Every command turns a [`RunConfig`] into a set of output files. Files are
//! rendered in memory first and only written once the whole command has
//! succeeded ([`Outputs::commit`]), so a failing command leaves nothing
//! behind. Each table carries the SHA-256 of the resolved configuration;
//! apart from the wall-clock timing table, equal hashes give byte-identical
//! files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar_bin, load_idx, synthetic, Dataset, NormStats, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::importance::{
    correlate, fmt_f64, gradient_pass, score, Correlation, Criterion, GradientPass, ImportanceReport,
    ScoreOptions, DEFAULT_LAMBDAS,
};
use crate::injection::SitePolicy;
use crate::model::{build_model, count_params_flops, FilterTarget, Model, ModelSpec};
use crate::pruner::{apply, finetune, plan_global, plan_layerwise, PrunePlan, RatioSpec};
use crate::stats::{kendall_tau, mean, spearman};
use crate::tensor::load_checkpoint;
use crate::train::{evaluate, fit, EpochRecord, Recipe};

pub const CHECKPOINT_FILE: &str = "model.ppck";
pub const PRUNED_CHECKPOINT_FILE: &str = "pruned.ppck";
pub const PRUNED_SPEC_FILE: &str = "pruned_spec.toml";
pub const FINETUNED_CHECKPOINT_FILE: &str = "finetuned.ppck";
/// Wall-clock measurements; the only output excluded from byte-level
/// reproducibility.
pub const TIMING_FILE: &str = "sampling_timing.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        shape: Vec<usize>,
        noise: f64,
        #[serde(default = "default_blobs")]
        blobs: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
}

fn default_blobs() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Criteria written by `score`.
    #[serde(default = "all_criteria")]
    pub criteria: Vec<Criterion>,
    /// λ grid for `score` and `sweep-lambda`.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Criterion used by `prune`.
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    /// λ used by `prune`, `sweep-sampling` and `correlate`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub subset: f64,
    #[serde(default = "default_target")]
    pub target: FilterTarget,
    #[serde(default)]
    pub site: SitePolicy,
    #[serde(default = "yes")]
    pub include_bias: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn all_criteria() -> Vec<Criterion> {
    Criterion::ALL.to_vec()
}

fn default_lambdas() -> Vec<f64> {
    DEFAULT_LAMBDAS.to_vec()
}

fn default_criterion() -> Criterion {
    Criterion::Proscore
}

fn default_lambda() -> f64 {
    0.01
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_target() -> FilterTarget {
    FilterTarget::ConvWeights
}

fn default_batch() -> usize {
    128
}

impl Default for ScoreConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ScoreConfig {
    pub fn options(&self) -> ScoreOptions {
        ScoreOptions {
            target: self.target,
            site: self.site,
            include_bias: self.include_bias,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneModeKind {
    Layerwise,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "default_mode")]
    pub mode: PruneModeKind,
    /// Default layer ratio (layer-wise) or global ratio.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Layer-wise ratio overrides by exact name or `prefix*` pattern.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
}

fn default_mode() -> PruneModeKind {
    PruneModeKind::Layerwise
}

fn default_ratio() -> f64 {
    0.5
}

fn default_min_keep() -> usize {
    1
}

impl Default for PruneConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Ratios swept by `eval`.
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Criteria compared by `eval`.
    #[serde(default = "eval_criteria")]
    pub eval_criteria: Vec<Criterion>,
    /// Independently trained models (`eval`) or subset draws (`sweep-sampling`).
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Also fine-tune every pruned model in `eval`.
    #[serde(default)]
    pub eval_finetune: bool,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Layer-wise ratio used by `sweep-lambda` and `sweep-sampling`.
    #[serde(default = "default_sweep_ratio")]
    pub layer_ratio: f64,
    #[serde(default = "correlate_criteria")]
    pub correlate_criteria: Vec<Criterion>,
}

fn default_ratios() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 10.0).collect()
}

fn eval_criteria() -> Vec<Criterion> {
    vec![
        Criterion::Proscore,
        Criterion::L1,
        Criterion::Taylor,
        Criterion::Fpgm,
        Criterion::Random,
    ]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_fractions() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.05]
}

fn default_sweep_ratio() -> f64 {
    0.4
}

fn correlate_criteria() -> Vec<Criterion> {
    vec![Criterion::Proscore, Criterion::L1, Criterion::Taylor, Criterion::Fpgm]
}

impl Default for SweepConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Model spec file, relative to the config file.
    pub model: PathBuf,
    /// Trained checkpoint read by the scoring commands; defaults to
    /// `<out_dir>/model.ppck`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub train: Recipe,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<Recipe>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Command-line overrides applied before hashing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub criterion: Option<Criterion>,
    pub lambda: Option<f64>,
    pub ratio: Option<f64>,
    pub subset: Option<f64>,
}

/// A configuration with its model spec loaded and paths anchored.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub spec: ModelSpec,
    base_dir: PathBuf,
    hash: String,
    /// Set when `--criterion` / `--lambda` narrow the `score` command.
    only_criterion: Option<Criterion>,
    only_lambda: Option<f64>,
}

#[derive(Serialize)]
struct HashView<'a> {
    config: &'a RunConfig,
    model_spec: &'a ModelSpec,
}

impl Experiment {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Experiment> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let spec_path = base.join(&config.model);
        let spec_text = std::fs::read_to_string(&spec_path).map_err(|e| Error::file(&spec_path, e))?;
        let spec = ModelSpec::from_toml_str(&spec_text)
            .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
        Experiment::new(config, spec, base, overrides)
    }

    pub fn new(mut config: RunConfig, spec: ModelSpec, base_dir: PathBuf, overrides: &Overrides) -> Result<Experiment> {
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(d) = &overrides.out_dir {
            config.out_dir = d.clone();
        }
        if let Some(c) = overrides.criterion {
            config.score.criterion = c;
        }
        if let Some(l) = overrides.lambda {
            config.score.lambda = l;
        }
        if let Some(r) = overrides.ratio {
            config.prune.ratio = r;
        }
        if let Some(s) = overrides.subset {
            config.score.subset = s;
        }
        validate(&config)?;
        build_model(&spec, 0).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        let mut hashed = config.clone();
        hashed.out_dir = PathBuf::new();
        let view = serde_json::to_vec(&HashView {
            config: &hashed,
            model_spec: &spec,
        })?;
        let hash = hex::encode(Sha256::digest(&view));
        Ok(Experiment {
            config,
            spec,
            base_dir,
            hash,
            only_criterion: overrides.criterion,
            only_lambda: overrides.lambda,
        })
    }

    /// SHA-256 of the resolved configuration (output directory excluded).
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.out_dir)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match &self.config.checkpoint {
            Some(p) => self.resolve(p),
            None => self.out_dir().join(CHECKPOINT_FILE),
        }
    }

    /// Train and test splits, both normalized with train-split statistics.
    pub fn data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.config.dataset {
            DatasetConfig::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                shape,
                noise,
                blobs,
                seed,
            } => {
                let spec = SyntheticSpec {
                    classes: *classes,
                    per_class: *train_per_class,
                    shape: shape.clone(),
                    noise: *noise,
                    blobs: *blobs,
                    seed: *seed,
                };
                let test = SyntheticSpec {
                    per_class: *test_per_class,
                    ..spec.clone()
                };
                (synthetic(&spec, Split::Train)?, synthetic(&test, Split::Test)?)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let need = |p: &PathBuf| {
                    let r = self.resolve(p);
                    if r.exists() {
                        Ok(r)
                    } else {
                        Err(Error::Config(format!("dataset file {} does not exist", r.display())))
                    }
                };
                (
                    load_idx(&need(train_images)?, &need(train_labels)?, Split::Train)?,
                    load_idx(&need(test_images)?, &need(test_labels)?, Split::Test)?,
                )
            }
            DatasetConfig::Cifar { train, test } => {
                let resolve_all = |ps: &[PathBuf]| -> Result<Vec<PathBuf>> {
                    ps.iter()
                        .map(|p| {
                            let r = self.resolve(p);
                            if r.exists() {
                                Ok(r)
                            } else {
                                Err(Error::Config(format!("dataset file {} does not exist", r.display())))
                            }
                        })
                        .collect()
                };
                (
                    load_cifar_bin(&resolve_all(train)?, Split::Train)?,
                    load_cifar_bin(&resolve_all(test)?, Split::Test)?,
                )
            }
        };
        if train.sample_shape() != self.spec.input.as_slice() {
            return Err(Error::Config(format!(
                "dataset samples are {:?} but the model expects {:?}",
                train.sample_shape(),
                self.spec.input
            )));
        }
        let stats = train.channel_stats();
        Ok((train.normalize(&stats)?, test.normalize(&stats)?))
    }

    /// Trains a fresh model; `seed` drives both initialization and sample
    /// order.
    pub fn train_model(&self, seed: u64, train: &Dataset, test: &Dataset) -> Result<(Model, Vec<EpochRecord>)> {
        let mut model = build_model(&self.spec, seed)?;
        let trace = fit(&mut model, train, Some(test), &self.config.train, seed)?;
        Ok((model, trace))
    }

    pub fn load_model(&self) -> Result<Model> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::Config(format!(
                "checkpoint {} not found; run `train` with this config first",
                path.display()
            )));
        }
        Model::from_checkpoint(&self.spec, &load_checkpoint(&path)?)
    }

    fn options(&self) -> ScoreOptions {
        self.config.score.options()
    }
}

fn validate(c: &RunConfig) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if !(c.score.lambda > 0.0) || c.score.lambdas.iter().any(|l| !(*l > 0.0)) {
        return bad("lambda values must be > 0".into());
    }
    if c.score.lambdas.is_empty() {
        return bad("score.lambdas is empty".into());
    }
    if !(c.score.subset > 0.0 && c.score.subset <= 1.0) {
        return bad(format!("subset must be in (0, 1], got {}", c.score.subset));
    }
    if c.score.batch_size == 0 || c.train.batch_size == 0 {
        return bad("batch sizes must be positive".into());
    }
    let ratios = std::iter::once(c.prune.ratio)
        .chain(c.prune.overrides.values().copied())
        .chain(c.sweep.ratios.iter().copied())
        .chain(std::iter::once(c.sweep.layer_ratio));
    for r in ratios {
        if !(0.0..1.0).contains(&r) {
            return bad(format!("pruning ratio {r} outside [0, 1)"));
        }
    }
    if c.prune.min_keep == 0 {
        return bad("prune.min_keep must be at least 1".into());
    }
    if c.sweep.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return bad("sampling fractions must be in (0, 1]".into());
    }
    if c.sweep.seeds.is_empty() {
        return bad("sweep.seeds is empty".into());
    }
    if c.sweep.eval_finetune && c.finetune.is_none() {
        return bad("sweep.eval_finetune needs a [finetune] recipe".into());
    }
    Ok(())
}

/// Output files rendered in memory, committed all at once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Writes every file to a temporary name, then renames them into
    /// place. On failure the temporaries are removed and no file is
    /// renamed.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let cleanup = |staged: &[(PathBuf, PathBuf)]| {
            for (tmp, _) in staged {
                let _ = std::fs::remove_file(tmp);
            }
        };
        for (name, bytes) in &self.files {
            let dest = dir.join(name);
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                cleanup(&staged);
                let _ = std::fs::remove_file(&tmp);
                return Err(Error::file(&tmp, e));
            }
            staged.push((tmp, dest));
        }
        for (tmp, dest) in &staged {
            std::fs::rename(tmp, dest).map_err(|e| Error::file(dest, e))?;
        }
        Ok(staged.into_iter().map(|(_, d)| d).collect())
    }
}

/// CSV text with the configuration hash as a leading comment line.
pub fn csv_bytes(hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# run_config_sha256={hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(out)
}

fn json_bytes(value: &serde_json::Value) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before - after) as f64 / before as f64
    }
}

// ---------------------------------------------------------------- train

pub fn cmd_train(exp: &Experiment) -> Result<Outputs> {
    let (train, test) = exp.data()?;
    let (model, trace) = exp.train_model(exp.config.seed, &train, &test)?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.mean_loss),
                fmt_f64(r.train_accuracy),
                fmt_opt(r.eval_accuracy),
            ]
        })
        .collect();
    let ckpt = model.checkpoint_bytes();
    let (params, flops) = count_params_flops(&model, &exp.spec.input)?;
    let norm: Option<&NormStats> = train.norm();
    let manifest = serde_json::json!({
        "run_config_sha256": exp.hash(),
        "command": "train",
        "model": exp.spec.name,
        "checkpoint": CHECKPOINT_FILE,
        "checkpoint_sha256": sha256_hex(&ckpt),
        "params": params,
        "flops": flops,
        "normalization": norm,
        "final_test_accuracy": trace.last().and_then(|r| r.eval_accuracy),
    });
    let mut out = Outputs::default();
    out.add(CHECKPOINT_FILE, ckpt);
    out.add(
        "train_log.csv",
        csv_bytes(exp.hash(), &["epoch", "mean_loss", "train_accuracy", "test_accuracy"], &rows)?,
    );
    out.add("manifest_train.json", json_bytes(&manifest)?);
    Ok(out)
}

// ---------------------------------------------------------------- score

fn report_file(r: &ImportanceReport) -> String {
    match r.lambda {
        Some(l) => format!(
            "scores_{}_lambda{}_subset{}_seed{}.csv",
            r.criterion,
            fmt_f64(l),
            fmt_f64(r.subset),
            r.seed
        ),
        None => format!("scores_{}_subset{}_seed{}.csv", r.criterion, fmt_f64(r.subset), r.seed),
    }
}

fn report_bytes(exp: &Experiment, r: &ImportanceReport) -> Result<Vec<u8>> {
    Ok(r.to_csv(Some(exp.hash()))?.into_bytes())
}

/// Reports for the configured criteria on a model. Gradient passes are
/// shared across the λ grid.
pub fn score_reports(
    exp: &Experiment,
    model: &Model,
    train: &Dataset,
    criteria: &[Criterion],
    lambdas: &[f64],
) -> Result<Vec<ImportanceReport>> {
    let opts = exp.options();
    let (subset, seed) = (exp.config.score.subset, exp.config.seed);
    let mut out = Vec::new();
    for &c in criteria {
        if c == Criterion::Proscore {
            let pass = gradient_pass(model, train, &opts, subset, seed)?;
            for &l in lambdas {
                out.push(pass.report(l)?);
            }
        } else {
            out.push(score(c, model, train, exp.config.score.lambda, &opts, subset, seed)?);
        }
    }
    Ok(out)
}

pub fn cmd_score(exp: &Experiment) -> Result<Outputs> {
    let model = exp.load_model()?;
    let (train, _) = exp.data()?;
    let criteria = match exp.only_criterion {
        Some(c) => vec![c],
        None => exp.config.score.criteria.clone(),
    };
    let lambdas = match exp.only_lambda {
        Some(l) => vec![l],
        None => exp.config.score.lambdas.clone(),
    };
    let mut out = Outputs::default();
    for r in score_reports(exp, &model, &train, &criteria, &lambdas)? {
        out.add(report_file(&r), report_bytes(exp, &r)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- prune

fn plan_for(exp: &Experiment, model: &Model, report: &ImportanceReport, ratio: f64) -> Result<PrunePlan> {
    match exp.config.prune.mode {
        PruneModeKind::Layerwise => plan_layerwise(
            model,
            report,
            &RatioSpec {
                default: ratio,
                overrides: exp.config.prune.overrides.clone(),
            },
        ),
        PruneModeKind::Global => plan_global(model, report, ratio, exp.config.prune.min_keep),
    }
}

pub fn cmd_prune(exp: &Experiment) -> Result<Outputs> {
    let model = exp.load_model()?;
    let (train, test) = exp.data()?;
    let c = exp.config.score.criterion;
    let report = score_reports(exp, &model, &train, &[c], &[exp.config.score.lambda])?.remove(0);
    let plan = plan_for(exp, &model, &report, exp.config.prune.ratio)?;
    let pruned = apply(&plan, &model)?;
    let (p0, f0) = count_params_flops(&model, &exp.spec.input)?;
    let (p1, f1) = count_params_flops(&pruned, &exp.spec.input)?;
    let bs = exp.config.score.batch_size;
    let ckpt = pruned.checkpoint_bytes();
    let summary = serde_json::json!({
        "run_config_sha256": exp.hash(),
        "command": "prune",
        "source_report": report.label(),
        "checkpoint": PRUNED_CHECKPOINT_FILE,
        "checkpoint_sha256": sha256_hex(&ckpt),
        "spec": PRUNED_SPEC_FILE,
        "removed_groups": plan.groups.len(),
        "params_before": p0,
        "params_after": p1,
        "flops_before": f0,
        "flops_after": f1,
        "params_reduction_pct": reduction_pct(p0, p1),
        "flops_reduction_pct": reduction_pct(f0, f1),
        "test_accuracy_before": evaluate(&model, &test, bs)?,
        "test_accuracy_after": evaluate(&pruned, &test, bs)?,
    });
    let mut out = Outputs::default();
    out.add(
        "plan.toml",
        format!("# run_config_sha256={}\n{}", exp.hash(), plan.to_toml_string()?).into_bytes(),
    );
    out.add(PRUNED_CHECKPOINT_FILE, ckpt);
    out.add(
        PRUNED_SPEC_FILE,
        format!("# run_config_sha256={}\n{}", exp.hash(), pruned.spec().to_toml_string()?).into_bytes(),
    );
    out.add("manifest_prune.json", json_bytes(&summary)?);
    Ok(out)
}

// ---------------------------------------------------------------- finetune

pub fn cmd_finetune(exp: &Experiment) -> Result<Outputs> {
    let recipe = exp
        .config
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("no [finetune] recipe in the config".into()))?;
    let dir = exp.out_dir();
    let spec_path = dir.join(PRUNED_SPEC_FILE);
    let ckpt_path = dir.join(PRUNED_CHECKPOINT_FILE);
    if !spec_path.exists() || !ckpt_path.exists() {
        return Err(Error::Config(format!(
            "{} has no pruned model; run `prune` first",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::file(&spec_path, e))?;
    let spec = ModelSpec::from_toml_str(&text)?;
    let model = Model::from_checkpoint(&spec, &load_checkpoint(&ckpt_path)?)?;
    let (train, test) = exp.data()?;
    let before = evaluate(&model, &test, exp.config.score.batch_size)?;
    let (tuned, trace) = finetune(&model, &train, Some(&test), recipe, exp.config.seed)?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.mean_loss),
                fmt_f64(r.train_accuracy),
                fmt_opt(r.eval_accuracy),
            ]
        })
        .collect();
    let ckpt = tuned.checkpoint_bytes();
    let manifest = serde_json::json!({
        "run_config_sha256": exp.hash(),
        "command": "finetune",
        "checkpoint": FINETUNED_CHECKPOINT_FILE,
        "checkpoint_sha256": sha256_hex(&ckpt),
        "test_accuracy_before": before,
        "test_accuracy_after": trace.last().and_then(|r| r.eval_accuracy).unwrap_or(before),
    });
    let mut out = Outputs::default();
    out.add(FINETUNED_CHECKPOINT_FILE, ckpt);
    out.add(
        "finetune_log.csv",
        csv_bytes(exp.hash(), &["epoch", "mean_loss", "train_accuracy", "test_accuracy"], &rows)?,
    );
    out.add("manifest_finetune.json", json_bytes(&manifest)?);
    Ok(out)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub criterion: Criterion,
    pub ratio: f64,
    pub seed: u64,
    pub acc_before_ft: f64,
    pub acc_after_ft: Option<f64>,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

/// Trains one model per seed and prunes it with every criterion at every
/// ratio, without fine-tuning unless `sweep.eval_finetune` is set.
pub fn prune_eval(exp: &Experiment, train: &Dataset, test: &Dataset) -> Result<Vec<EvalRow>> {
    let cfg = &exp.config;
    let per_seed: Vec<Result<Vec<EvalRow>>> = cfg
        .sweep
        .seeds
        .par_iter()
        .map(|&seed| {
            let (model, _) = exp.train_model(seed, train, test)?;
            let (p0, f0) = count_params_flops(&model, &exp.spec.input)?;
            let opts = exp.options();
            let mut rows = Vec::new();
            for &c in &cfg.sweep.eval_criteria {
                let report = score(c, &model, train, cfg.score.lambda, &opts, cfg.score.subset, seed)?;
                for &ratio in &cfg.sweep.ratios {
                    let plan = match cfg.prune.mode {
                        PruneModeKind::Layerwise => plan_layerwise(&model, &report, &RatioSpec::uniform(ratio))?,
                        PruneModeKind::Global => plan_global(&model, &report, ratio, cfg.prune.min_keep)?,
                    };
                    let pruned = apply(&plan, &model)?;
                    let (p1, f1) = count_params_flops(&pruned, &exp.spec.input)?;
                    let acc_before_ft = evaluate(&pruned, test, cfg.score.batch_size)?;
                    let acc_after_ft = match (&cfg.finetune, cfg.sweep.eval_finetune) {
                        (Some(recipe), true) => {
                            let (tuned, _) = finetune(&pruned, train, None, recipe, seed)?;
                            Some(evaluate(&tuned, test, cfg.score.batch_size)?)
                        }
                        _ => None,
                    };
                    rows.push(EvalRow {
                        criterion: c,
                        ratio,
                        seed,
                        acc_before_ft,
                        acc_after_ft,
                        params_reduction_pct: reduction_pct(p0, p1),
                        flops_reduction_pct: reduction_pct(f0, f1),
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    Ok(all)
}

/// Seed-averaged `(criterion, ratio)` rows in config order.
pub fn eval_summary(exp: &Experiment, rows: &[EvalRow]) -> Vec<(Criterion, f64, EvalRow)> {
    let mut out = Vec::new();
    for &c in &exp.config.sweep.eval_criteria {
        for &ratio in &exp.config.sweep.ratios {
            let cell: Vec<&EvalRow> = rows.iter().filter(|r| r.criterion == c && r.ratio == ratio).collect();
            if cell.is_empty() {
                continue;
            }
            let avg = |f: &dyn Fn(&EvalRow) -> f64| mean(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            let after: Vec<f64> = cell.iter().filter_map(|r| r.acc_after_ft).collect();
            out.push((
                c,
                ratio,
                EvalRow {
                    criterion: c,
                    ratio,
                    seed: 0,
                    acc_before_ft: avg(&|r| r.acc_before_ft),
                    acc_after_ft: (!after.is_empty()).then(|| mean(&after)),
                    params_reduction_pct: avg(&|r| r.params_reduction_pct),
                    flops_reduction_pct: avg(&|r| r.flops_reduction_pct),
                },
            ));
        }
    }
    out
}

pub fn cmd_eval(exp: &Experiment) -> Result<Outputs> {
    let (train, test) = exp.data()?;
    let rows = prune_eval(exp, &train, &test)?;
    let header = [
        "criterion",
        "ratio",
        "acc_before_ft",
        "acc_after_ft",
        "params_reduction_pct",
        "flops_reduction_pct",
    ];
    let summary: Vec<Vec<String>> = eval_summary(exp, &rows)
        .into_iter()
        .map(|(c, ratio, r)| {
            vec![
                c.to_string(),
                fmt_f64(ratio),
                fmt_f64(r.acc_before_ft),
                fmt_opt(r.acc_after_ft),
                fmt_f64(r.params_reduction_pct),
                fmt_f64(r.flops_reduction_pct),
            ]
        })
        .collect();
    let per_seed: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.criterion.to_string(),
                fmt_f64(r.ratio),
                r.seed.to_string(),
                fmt_f64(r.acc_before_ft),
                fmt_opt(r.acc_after_ft),
                fmt_f64(r.params_reduction_pct),
                fmt_f64(r.flops_reduction_pct),
            ]
        })
        .collect();
    let mut seed_header = header.to_vec();
    seed_header.insert(2, "seed");
    let mut out = Outputs::default();
    out.add("prune_eval.csv", csv_bytes(exp.hash(), &header, &summary)?);
    out.add("prune_eval_seeds.csv", csv_bytes(exp.hash(), &seed_header, &per_seed)?);
    Ok(out)
}

// ---------------------------------------------------------------- sweep-lambda

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSweep {
    pub lambdas: Vec<f64>,
    /// Pruned channel indices per producer layer, one map per λ.
    pub pruned: Vec<BTreeMap<String, Vec<usize>>>,
    /// `(layer, λ_a, λ_b, τ)` for every layer and λ pair.
    pub kendall: Vec<(String, f64, f64, Option<f64>)>,
    pub reports: Vec<ImportanceReport>,
}

impl LambdaSweep {
    /// Layers whose pruned sets differ from the first λ's.
    pub fn unstable_layers(&self) -> Vec<String> {
        let mut out = BTreeSet::new();
        for p in &self.pruned[1..] {
            for (layer, idx) in p {
                if self.pruned[0].get(layer) != Some(idx) {
                    out.insert(layer.clone());
                }
            }
            for layer in self.pruned[0].keys() {
                if !p.contains_key(layer) {
                    out.insert(layer.clone());
                }
            }
        }
        out.into_iter().collect()
    }
}

fn producer_sets(model: &Model, plan: &PrunePlan) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for layer in model.layers() {
        if layer.kind.is_producer() {
            out.insert(layer.name.clone(), plan.removed_indices(&layer.name).to_vec());
        }
    }
    let last = model.layers().last().map(|l| l.name.clone());
    if let Some(l) = last {
        out.remove(&l);
    }
    out
}

pub fn lambda_sweep_from(exp: &Experiment, model: &Model, pass: &GradientPass) -> Result<LambdaSweep> {
    let lambdas = exp.config.score.lambdas.clone();
    let ratios = RatioSpec::uniform(exp.config.sweep.layer_ratio);
    let mut reports = Vec::new();
    let mut pruned = Vec::new();
    for &l in &lambdas {
        let r = pass.report(l)?;
        pruned.push(producer_sets(model, &plan_layerwise(model, &r, &ratios)?));
        reports.push(r);
    }
    let mut kendall = Vec::new();
    for layer in reports[0].layers() {
        let col = |r: &ImportanceReport| -> Vec<f64> {
            r.entries.iter().filter(|e| e.layer == layer).map(|e| e.score).collect()
        };
        for a in 0..lambdas.len() {
            for b in a + 1..lambdas.len() {
                kendall.push((
                    layer.to_string(),
                    lambdas[a],
                    lambdas[b],
                    kendall_tau(&col(&reports[a]), &col(&reports[b])),
                ));
            }
        }
    }
    Ok(LambdaSweep {
        lambdas,
        pruned,
        kendall,
        reports,
    })
}

pub fn lambda_sweep(exp: &Experiment, model: &Model, train: &Dataset) -> Result<LambdaSweep> {
    let pass = gradient_pass(model, train, &exp.options(), exp.config.score.subset, exp.config.seed)?;
    lambda_sweep_from(exp, model, &pass)
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

pub fn cmd_sweep_lambda(exp: &Experiment) -> Result<Outputs> {
    let model = exp.load_model()?;
    let (train, _) = exp.data()?;
    let sweep = lambda_sweep(exp, &model, &train)?;
    let mut sets = Vec::new();
    for (l, p) in sweep.lambdas.iter().zip(&sweep.pruned) {
        for (layer, idx) in p {
            let same = sweep.pruned[0].get(layer) == Some(idx);
            sets.push(vec![fmt_f64(*l), layer.clone(), join_indices(idx), same.to_string()]);
        }
    }
    let taus: Vec<Vec<String>> = sweep
        .kendall
        .iter()
        .map(|(layer, a, b, t)| vec![layer.clone(), fmt_f64(*a), fmt_f64(*b), fmt_opt(*t)])
        .collect();
    let scale: Vec<Vec<String>> = sweep
        .lambdas
        .iter()
        .zip(&sweep.reports)
        .map(|(l, r)| {
            let mut s: Vec<f64> = r.scores().into_iter().filter(|v| v.is_finite()).collect();
            s.sort_by(f64::total_cmp);
            let med = if s.is_empty() { f64::NAN } else { s[s.len() / 2] };
            let below = s.iter().filter(|v| **v < 1.0).count() as f64 / s.len().max(1) as f64;
            vec![
                fmt_f64(*l),
                fmt_f64(s.first().copied().unwrap_or(f64::NAN)),
                fmt_f64(med),
                fmt_f64(mean(&s)),
                fmt_f64(s.last().copied().unwrap_or(f64::NAN)),
                fmt_f64(below),
                (r.entries.len() - s.len()).to_string(),
            ]
        })
        .collect();
    let mut out = Outputs::default();
    out.add(
        "lambda_sweep.csv",
        csv_bytes(exp.hash(), &["lambda", "layer", "pruned_indices", "identical_to_first"], &sets)?,
    );
    out.add(
        "lambda_kendall.csv",
        csv_bytes(exp.hash(), &["layer", "lambda_a", "lambda_b", "kendall_tau"], &taus)?,
    );
    out.add(
        "lambda_scale.csv",
        csv_bytes(
            exp.hash(),
            &["lambda", "min", "median", "mean", "max", "fraction_below_one", "infinite"],
            &scale,
        )?,
    );
    Ok(out)
}

// ---------------------------------------------------------------- sweep-sampling

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplingRow {
    pub fraction: f64,
    pub seed: u64,
    pub samples: usize,
    pub spearman_vs_full: Option<f64>,
    /// `|pruned(subset) ∩ pruned(full)| / |pruned(full)|`.
    pub overlap: f64,
    pub acc_after_prune: f64,
    pub wall_seconds: f64,
}

fn pruned_pairs(plan: &PrunePlan, model: &Model) -> Result<BTreeSet<(String, usize)>> {
    Ok(plan
        .removed_producers(model)?
        .into_iter()
        .flat_map(|(l, s)| s.into_iter().map(move |c| (l.clone(), c)))
        .collect())
}

/// Scores on class-balanced subsets (`sweep.fractions` × `sweep.seeds`) and
/// compares each against full-data scoring.
pub fn sampling_sweep(exp: &Experiment, model: &Model, train: &Dataset, test: &Dataset) -> Result<Vec<SamplingRow>> {
    let cfg = &exp.config;
    let opts = exp.options();
    let lambda = cfg.score.lambda;
    let ratios = RatioSpec::uniform(cfg.sweep.layer_ratio);
    let full = gradient_pass(model, train, &opts, 1.0, cfg.seed)?.report(lambda)?;
    let full_set = pruned_pairs(&plan_layerwise(model, &full, &ratios)?, model)?;
    let full_scores = full.scores();
    let mut rows = Vec::new();
    for &fraction in &cfg.sweep.fractions {
        for &seed in &cfg.sweep.seeds {
            let start = Instant::now();
            let pass = gradient_pass(model, train, &opts, fraction, seed)?;
            let report = pass.report(lambda)?;
            let wall_seconds = start.elapsed().as_secs_f64();
            let plan = plan_layerwise(model, &report, &ratios)?;
            let set = pruned_pairs(&plan, model)?;
            let overlap = if full_set.is_empty() {
                1.0
            } else {
                set.intersection(&full_set).count() as f64 / full_set.len() as f64
            };
            let pruned = apply(&plan, model)?;
            rows.push(SamplingRow {
                fraction,
                seed,
                samples: pass.samples,
                spearman_vs_full: spearman(&report.scores(), &full_scores),
                overlap,
                acc_after_prune: evaluate(&pruned, test, cfg.score.batch_size)?,
                wall_seconds,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_sweep_sampling(exp: &Experiment) -> Result<Outputs> {
    let model = exp.load_model()?;
    let (train, test) = exp.data()?;
    let rows = sampling_sweep(exp, &model, &train, &test)?;
    let detail: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.fraction),
                r.seed.to_string(),
                r.samples.to_string(),
                fmt_opt(r.spearman_vs_full),
                fmt_f64(r.overlap),
                fmt_f64(r.acc_after_prune),
            ]
        })
        .collect();
    let mut summary = Vec::new();
    let mut timing = Vec::new();
    for &f in &exp.config.sweep.fractions {
        let cell: Vec<&SamplingRow> = rows.iter().filter(|r| r.fraction == f).collect();
        let col = |g: &dyn Fn(&SamplingRow) -> f64| cell.iter().map(|r| g(r)).collect::<Vec<f64>>();
        let stat = |v: Vec<f64>| {
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (mean(&v), mx)
        };
        let (sp_mu, sp_max) = stat(col(&|r| r.spearman_vs_full.unwrap_or(f64::NAN)));
        let (ov_mu, ov_max) = stat(col(&|r| r.overlap));
        let (acc_mu, acc_max) = stat(col(&|r| r.acc_after_prune));
        summary.push(vec![
            fmt_f64(f),
            cell.len().to_string(),
            fmt_f64(sp_mu),
            fmt_f64(sp_max),
            fmt_f64(ov_mu),
            fmt_f64(ov_max),
            fmt_f64(acc_mu),
            fmt_f64(acc_max),
        ]);
        for r in &cell {
            timing.push(vec![fmt_f64(f), r.seed.to_string(), format!("{:.6}", r.wall_seconds)]);
        }
    }
    let mut out = Outputs::default();
    out.add(
        "sampling.csv",
        csv_bytes(
            exp.hash(),
            &["fraction", "seed", "samples", "spearman_vs_full", "overlap", "acc_after_prune"],
            &detail,
        )?,
    );
    out.add(
        "sampling_summary.csv",
        csv_bytes(
            exp.hash(),
            &[
                "fraction",
                "runs",
                "spearman_mean",
                "spearman_max",
                "overlap_mean",
                "overlap_max",
                "acc_mean",
                "acc_max",
            ],
            &summary,
        )?,
    );
    out.add(TIMING_FILE, csv_bytes(exp.hash(), &["fraction", "seed", "wall_seconds"], &timing)?);
    Ok(out)
}

// ---------------------------------------------------------------- correlate

pub fn correlation(exp: &Experiment, model: &Model, train: &Dataset) -> Result<Correlation> {
    let reports = score_reports(
        exp,
        model,
        train,
        &exp.config.sweep.correlate_criteria,
        &[exp.config.score.lambda],
    )?;
    correlate(&reports)
}

fn matrix_rows(c: &Correlation, m: &[Vec<Option<f64>>]) -> Vec<Vec<String>> {
    c.labels
        .iter()
        .zip(m)
        .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(|v| fmt_opt(*v))).collect())
        .collect()
}

pub fn cmd_correlate(exp: &Experiment) -> Result<Outputs> {
    let model = exp.load_model()?;
    let (train, _) = exp.data()?;
    let c = correlation(exp, &model, &train)?;
    let mut header = vec!["criterion"];
    header.extend(c.labels.iter().map(String::as_str));
    let mut long = Vec::new();
    for (method, m) in [("pearson", &c.pearson), ("spearman", &c.spearman)] {
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                long.push(vec![method.to_string(), c.labels[i].clone(), c.labels[j].clone(), fmt_opt(*v)]);
            }
        }
    }
    let json = serde_json::json!({
        "run_config_sha256": exp.hash(),
        "labels": c.labels,
        "pearson": c.pearson,
        "spearman": c.spearman,
        "row_mean_abs_pearson": Correlation::row_mean_abs(&c.pearson),
        "row_mean_abs_spearman": Correlation::row_mean_abs(&c.spearman),
    });
    let mut out = Outputs::default();
    out.add("correlation_pearson.csv", csv_bytes(exp.hash(), &header, &matrix_rows(&c, &c.pearson))?);
    out.add("correlation_spearman.csv", csv_bytes(exp.hash(), &header, &matrix_rows(&c, &c.spearman))?);
    out.add("correlation.json", json_bytes(&json)?);
    out.add(
        "correlation_long.csv",
        csv_bytes(exp.hash(), &["method", "row", "column", "value"], &long)?,
    );
    Ok(out)
}
