//! Channel importance criteria and their comparison.
//!
//! The projective-offset score needs two gradient quantities per filter:
//! `∇_F L` and `∂L/∂D`, both summed over every batch of the scoring data
//! with the model parameters frozen. [`gradient_pass`] collects them once;
//! [`GradientPass::report`] then evaluates the score for any step size λ.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sum_grad_tables, ComputeGraph, GradTable};
use crate::data::{balanced_subset, Dataset};
use crate::error::{Error, Result};
use crate::injection::{d_gradient_from, extend_all, revert, InjectionConfig, SitePolicy};
use crate::model::{FilterHandle, FilterTarget, Mode, Model};
use crate::projective::{l1, l2, proscore};
use crate::stats::{pearson, spearman};

/// λ values swept by default.
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Proscore,
    L1,
    L2,
    Taylor,
    Fpgm,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Proscore,
        Criterion::L1,
        Criterion::L2,
        Criterion::Taylor,
        Criterion::Fpgm,
        Criterion::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Proscore => "proscore",
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::Taylor => "taylor",
            Criterion::Fpgm => "fpgm",
            Criterion::Random => "random",
        }
    }

    /// Whether scoring reads the dataset.
    pub fn needs_data(self) -> bool {
        matches!(self, Criterion::Proscore | Criterion::Taylor)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEntry {
    pub layer: String,
    pub channel: usize,
    pub score: f64,
}

/// Scores for every filter of the scored model, in layer/channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceReport {
    pub criterion: Criterion,
    pub lambda: Option<f64>,
    pub subset: f64,
    pub seed: u64,
    pub entries: Vec<ScoreEntry>,
}

pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse()
        .map_err(|_| Error::Config(format!("`{s}` is not a number")))
}

pub const CSV_HEADER: [&str; 7] = ["layer", "channel", "criterion", "lambda", "subset", "seed", "score"];

impl ImportanceReport {
    fn from_scores(
        criterion: Criterion,
        lambda: Option<f64>,
        subset: f64,
        seed: u64,
        handles: &[FilterHandle],
        scores: Vec<f64>,
    ) -> Self {
        let entries = handles
            .iter()
            .zip(scores)
            .map(|(h, score)| ScoreEntry {
                layer: h.layer.clone(),
                channel: h.channel,
                score,
            })
            .collect();
        ImportanceReport {
            criterion,
            lambda,
            subset,
            seed,
            entries,
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn get(&self, layer: &str, channel: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.channel == channel)
            .map(|e| e.score)
    }

    pub fn by_key(&self) -> BTreeMap<(String, usize), f64> {
        self.entries
            .iter()
            .map(|e| ((e.layer.clone(), e.channel), e.score))
            .collect()
    }

    /// Layer names in first-appearance order.
    pub fn layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.layer.as_str()) && !out.contains(&e.layer.as_str()) {
                out.push(&e.layer);
            }
        }
        out
    }

    /// Short label such as `proscore@0.01`.
    pub fn label(&self) -> String {
        match self.lambda {
            Some(l) => format!("{}@{}", self.criterion, fmt_f64(l)),
            None => self.criterion.to_string(),
        }
    }

    /// CSV with an optional leading `# run_config_sha256=…` line.
    pub fn to_csv(&self, config_hash: Option<&str>) -> Result<String> {
        let mut out = Vec::new();
        if let Some(h) = config_hash {
            out.extend_from_slice(format!("# run_config_sha256={h}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let lambda = self.lambda.map(fmt_f64).unwrap_or_default();
        let subset = fmt_f64(self.subset);
        let seed = self.seed.to_string();
        for e in &self.entries {
            w.write_record([
                e.layer.as_str(),
                &e.channel.to_string(),
                self.criterion.as_str(),
                &lambda,
                &subset,
                &seed,
                &fmt_f64(e.score),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Config(format!("unexpected report header {header:?}")));
        }
        let mut entries = Vec::new();
        let mut meta: Option<(Criterion, Option<f64>, f64, u64)> = None;
        for rec in r.records() {
            let rec = rec?;
            let row = (
                rec[2].parse::<Criterion>()?,
                if rec[3].is_empty() { None } else { Some(parse_f64(&rec[3])?) },
                parse_f64(&rec[4])?,
                rec[5]
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed `{}`", &rec[5])))?,
            );
            match &meta {
                None => meta = Some(row),
                Some(m) if *m != row => {
                    return Err(Error::Config("report mixes several runs".into()));
                }
                _ => {}
            }
            entries.push(ScoreEntry {
                layer: rec[0].to_string(),
                channel: rec[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad channel `{}`", &rec[1])))?,
                score: parse_f64(&rec[6])?,
            });
        }
        let (criterion, lambda, subset, seed) =
            meta.ok_or_else(|| Error::Config("report has no rows".into()))?;
        Ok(ImportanceReport {
            criterion,
            lambda,
            subset,
            seed,
            entries,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub target: FilterTarget,
    #[serde(default)]
    pub site: SitePolicy,
    #[serde(default = "yes")]
    pub include_bias: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn yes() -> bool {
    true
}

fn default_batch() -> usize {
    128
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            target: FilterTarget::ConvWeights,
            site: SitePolicy::AfterBn,
            include_bias: true,
            batch_size: default_batch(),
        }
    }
}

impl ScoreOptions {
    pub fn injection(&self) -> InjectionConfig {
        InjectionConfig {
            target: self.target,
            policy: self.site,
            include_bias: self.include_bias,
        }
    }
}

/// Sum over all batches of the train-mode loss gradients. Batches run in
/// parallel; tables are reduced in batch order, so the result does not
/// depend on scheduling. Parameters and normalization statistics are left
/// untouched.
pub fn accumulate_gradients(model: &Model, ds: &Dataset, batch_size: usize) -> Result<GradTable> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot score on an empty dataset".into()));
    }
    let tables: Vec<Result<GradTable>> = ds
        .batch_ranges(batch_size)
        .par_iter()
        .map(|&(s, e)| {
            let (x, y) = ds.batch(s, e)?;
            let mut g = ComputeGraph::new();
            model.loss(&mut g, x, y, Mode::Train)?;
            g.backward()
        })
        .collect();
    let tables = tables.into_iter().collect::<Result<Vec<_>>>()?;
    sum_grad_tables(&tables)
}

fn scoring_data(ds: &Dataset, subset: f64, seed: u64) -> Result<std::borrow::Cow<'_, Dataset>> {
    if subset == 1.0 {
        Ok(std::borrow::Cow::Borrowed(ds))
    } else {
        Ok(std::borrow::Cow::Owned(balanced_subset(ds, subset, seed)?))
    }
}

/// Accumulated gradient quantities the projective score needs; independent
/// of λ.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPass {
    pub handles: Vec<FilterHandle>,
    pub filter_grads: Vec<Vec<f64>>,
    /// Injected diagonal values (the filter norms).
    pub d: Vec<f64>,
    pub d_grads: Vec<f64>,
    pub dbar_grads: Vec<f64>,
    pub subset: f64,
    pub seed: u64,
    pub samples: usize,
}

impl GradientPass {
    pub fn report(&self, lambda: f64) -> Result<ImportanceReport> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        let scores = self
            .handles
            .iter()
            .enumerate()
            .map(|(i, h)| proscore(&h.vector, &self.filter_grads[i], self.d[i], self.d_grads[i], lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImportanceReport::from_scores(
            Criterion::Proscore,
            Some(lambda),
            self.subset,
            self.seed,
            &self.handles,
            scores,
        ))
    }

    /// All accumulated gradients multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> GradientPass {
        let mut out = self.clone();
        for g in &mut out.filter_grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        out.d_grads.iter_mut().for_each(|v| *v *= factor);
        out.dbar_grads.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Sum of two passes over disjoint data.
    pub fn combine(&self, other: &GradientPass) -> Result<GradientPass> {
        if self.handles.len() != other.handles.len() {
            return Err(Error::InvalidArgument("passes cover different filters".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.filter_grads.iter_mut().zip(&other.filter_grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        out.d_grads.iter_mut().zip(&other.d_grads).for_each(|(x, y)| *x += y);
        out.dbar_grads.iter_mut().zip(&other.dbar_grads).for_each(|(x, y)| *x += y);
        out.samples += other.samples;
        Ok(out)
    }
}

/// Extends the model with probes, accumulates `∇_F L` and `∂L/∂D` over the
/// (optionally subsampled) dataset without updating anything, and reverts.
pub fn gradient_pass(
    model: &Model,
    ds: &Dataset,
    opts: &ScoreOptions,
    subset: f64,
    seed: u64,
) -> Result<GradientPass> {
    let data = scoring_data(ds, subset, seed)?;
    let handles = model.extract_filters(opts.target, opts.include_bias)?;
    let extended = extend_all(model, &opts.injection())?;
    let grads = accumulate_gradients(&extended, &data, opts.batch_size)?;
    let dgrads = d_gradient_from(&extended, &grads)?;
    let sites = extended.extension().expect("extended above").to_vec();
    revert(&extended)?;

    let site_of: BTreeMap<&str, usize> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.target.as_str(), i))
        .collect();
    let mut filter_grads = Vec::with_capacity(handles.len());
    let mut d = Vec::with_capacity(handles.len());
    let mut d_grads = Vec::with_capacity(handles.len());
    let mut dbar_grads = Vec::with_capacity(handles.len());
    for h in &handles {
        let s = site_of[h.layer.as_str()];
        filter_grads.push(h.gather_grad(&grads)?);
        d.push(sites[s].d[h.channel]);
        d_grads.push(dgrads[s].d[h.channel]);
        dbar_grads.push(dgrads[s].dbar[h.channel]);
    }
    Ok(GradientPass {
        handles,
        filter_grads,
        d,
        d_grads,
        dbar_grads,
        subset,
        seed,
        samples: data.len(),
    })
}

pub fn score_proscore(
    model: &Model,
    ds: &Dataset,
    lambda: f64,
    opts: &ScoreOptions,
    subset: f64,
    seed: u64,
) -> Result<ImportanceReport> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    gradient_pass(model, ds, opts, subset, seed)?.report(lambda)
}

fn data_free(
    model: &Model,
    opts: &ScoreOptions,
    criterion: Criterion,
    seed: u64,
    f: impl Fn(&[f64]) -> f64,
) -> Result<ImportanceReport> {
    let handles = model.extract_filters(opts.target, opts.include_bias)?;
    let scores = handles.iter().map(|h| f(&h.vector)).collect();
    Ok(ImportanceReport::from_scores(criterion, None, 1.0, seed, &handles, scores))
}

pub fn score_l1(model: &Model, opts: &ScoreOptions) -> Result<ImportanceReport> {
    data_free(model, opts, Criterion::L1, 0, l1)
}

pub fn score_l2(model: &Model, opts: &ScoreOptions) -> Result<ImportanceReport> {
    data_free(model, opts, Criterion::L2, 0, l2)
}

/// `|Σ_j w_j g_j|` with `g` summed over the whole (sub)dataset.
pub fn score_taylor(
    model: &Model,
    ds: &Dataset,
    opts: &ScoreOptions,
    subset: f64,
    seed: u64,
) -> Result<ImportanceReport> {
    let data = scoring_data(ds, subset, seed)?;
    let handles = model.extract_filters(opts.target, opts.include_bias)?;
    let grads = accumulate_gradients(model, &data, opts.batch_size)?;
    let scores = handles
        .iter()
        .map(|h| Ok(taylor(&h.vector, &h.gather_grad(&grads)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceReport::from_scores(Criterion::Taylor, None, subset, seed, &handles, scores))
}

pub fn taylor(w: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>().abs()
}

pub const WEISZFELD_TOL: f64 = 1e-9;
pub const WEISZFELD_MAX_ITERS: usize = 10_000;

/// Geometric median by Weiszfeld iteration with the Vardi–Zhang correction
/// for iterates that land on a data point.
pub fn geometric_median(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("geometric median of no points".into()))?;
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("geometric_median", "points of different dimension"));
    }
    let n = points.len() as f64;
    let mut y: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    for _ in 0..WEISZFELD_MAX_ITERS {
        let mut num = vec![0.0; dim];
        let mut inv_sum = 0.0;
        let mut coincident = 0usize;
        let mut pull = vec![0.0; dim];
        for p in points {
            let diff: Vec<f64> = p.iter().zip(&y).map(|(a, b)| a - b).collect();
            let d = l2(&diff);
            if d < 1e-12 {
                coincident += 1;
                continue;
            }
            inv_sum += 1.0 / d;
            for j in 0..dim {
                num[j] += p[j] / d;
                pull[j] += diff[j] / d;
            }
        }
        if inv_sum == 0.0 {
            break;
        }
        let t: Vec<f64> = num.iter().map(|v| v / inv_sum).collect();
        let next = if coincident == 0 {
            t
        } else {
            let r = l2(&pull);
            if r <= coincident as f64 {
                break;
            }
            let gamma = coincident as f64 / r;
            t.iter().zip(&y).map(|(a, b)| (1.0 - gamma) * a + gamma * b).collect()
        };
        let step = l2(&next.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        y = next;
        if step < WEISZFELD_TOL {
            break;
        }
    }
    Ok(y)
}

/// Distance of each filter to its layer's geometric median. A layer with a
/// single channel scores `+∞`.
pub fn score_fpgm(model: &Model, opts: &ScoreOptions) -> Result<ImportanceReport> {
    let handles = model.extract_filters(opts.target, opts.include_bias)?;
    let mut scores = vec![0.0; handles.len()];
    let mut start = 0;
    while start < handles.len() {
        let end = start
            + handles[start..]
                .iter()
                .take_while(|h| h.layer_index == handles[start].layer_index)
                .count();
        if end - start == 1 {
            scores[start] = f64::INFINITY;
        } else {
            let pts: Vec<Vec<f64>> = handles[start..end].iter().map(|h| h.vector.clone()).collect();
            let median = geometric_median(&pts)?;
            for (i, p) in pts.iter().enumerate() {
                let diff: Vec<f64> = p.iter().zip(&median).map(|(a, b)| a - b).collect();
                scores[start + i] = l2(&diff);
            }
        }
        start = end;
    }
    Ok(ImportanceReport::from_scores(Criterion::Fpgm, None, 1.0, 0, &handles, scores))
}

pub fn score_random(model: &Model, opts: &ScoreOptions, seed: u64) -> Result<ImportanceReport> {
    let handles = model.extract_filters(opts.target, opts.include_bias)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = handles.iter().map(|_| rng.random::<f64>()).collect();
    Ok(ImportanceReport::from_scores(Criterion::Random, None, 1.0, seed, &handles, scores))
}

/// Dispatches on the criterion. `lambda` is only read by the projective
/// score; `subset` only by the data-driven criteria.
pub fn score(
    criterion: Criterion,
    model: &Model,
    ds: &Dataset,
    lambda: f64,
    opts: &ScoreOptions,
    subset: f64,
    seed: u64,
) -> Result<ImportanceReport> {
    match criterion {
        Criterion::Proscore => score_proscore(model, ds, lambda, opts, subset, seed),
        Criterion::L1 => score_l1(model, opts),
        Criterion::L2 => score_l2(model, opts),
        Criterion::Taylor => score_taylor(model, ds, opts, subset, seed),
        Criterion::Fpgm => score_fpgm(model, opts),
        Criterion::Random => score_random(model, opts, seed),
    }
}

/// Pairwise correlation matrices across reports. `None` marks undefined
/// coefficients (a constant side).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub labels: Vec<String>,
    pub pearson: Vec<Vec<Option<f64>>>,
    pub spearman: Vec<Vec<Option<f64>>>,
}

impl Correlation {
    /// Mean absolute off-diagonal coefficient per row (defined entries only).
    pub fn row_mean_abs(matrix: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
        matrix
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let vals: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .filter_map(|(_, v)| v.map(f64::abs))
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect()
    }
}

/// Per-layer min-max normalization: `+∞` maps to 1, a layer whose finite
/// scores are all equal maps to 0.
pub fn normalize_per_layer(report: &ImportanceReport) -> Vec<f64> {
    let mut out = vec![0.0; report.entries.len()];
    for layer in report.layers() {
        let idx: Vec<usize> = (0..report.entries.len())
            .filter(|&i| report.entries[i].layer == layer)
            .collect();
        let finite: Vec<f64> = idx
            .iter()
            .map(|&i| report.entries[i].score)
            .filter(|v| v.is_finite())
            .collect();
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &i in &idx {
            let v = report.entries[i].score;
            out[i] = if !v.is_finite() {
                1.0
            } else if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            };
        }
    }
    out
}

pub fn correlate(reports: &[ImportanceReport]) -> Result<Correlation> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to correlate".into()))?;
    let keys: Vec<(&str, usize)> = first.entries.iter().map(|e| (e.layer.as_str(), e.channel)).collect();
    let mut columns = Vec::with_capacity(reports.len());
    for r in reports {
        let same = r.entries.len() == keys.len()
            && r.entries
                .iter()
                .zip(&keys)
                .all(|(e, k)| e.layer == k.0 && e.channel == k.1);
        if !same {
            return Err(Error::InvalidArgument(format!(
                "report `{}` covers a different channel set than `{}`",
                r.label(),
                first.label()
            )));
        }
        columns.push(normalize_per_layer(r));
    }
    let n = reports.len();
    let mut p = vec![vec![None; n]; n];
    let mut s = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let (pv, sv) = if i == j {
                let defined = pearson(&columns[i], &columns[i]).is_some();
                let one = defined.then_some(1.0);
                (one, one)
            } else {
                (pearson(&columns[i], &columns[j]), spearman(&columns[i], &columns[j]))
            };
            p[i][j] = pv;
            p[j][i] = pv;
            s[i][j] = sv;
            s[j][i] = sv;
        }
    }
    Ok(Correlation {
        labels: reports.iter().map(|r| r.label()).collect(),
        pearson: p,
        spearman: s,
    })
}
