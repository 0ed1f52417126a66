//! From scores to a smaller model: layer-wise and global planning, physical
//! rebuild, the zero-masking oracle, and fine-tuning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::model::{bias_name, weight_name, LayerKind, Model, PruneGroup};
use crate::train::{fit, EpochRecord, Recipe};

/// Per-layer pruning ratios: exact layer names or `prefix*` patterns, with a
/// fallback for everything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub default: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, f64>,
}

impl RatioSpec {
    pub fn uniform(ratio: f64) -> Self {
        RatioSpec {
            default: ratio,
            overrides: BTreeMap::new(),
        }
    }

    /// Exact name first, then the longest matching `prefix*` pattern.
    pub fn ratio_for(&self, layer: &str) -> f64 {
        if let Some(r) = self.overrides.get(layer) {
            return *r;
        }
        self.overrides
            .iter()
            .filter_map(|(pat, r)| {
                pat.strip_suffix('*')
                    .filter(|prefix| layer.starts_with(prefix))
                    .map(|prefix| (prefix.len(), *r))
            })
            .max_by_key(|(len, _)| *len)
            .map_or(self.default, |(_, r)| r)
    }

    fn validate(&self) -> Result<()> {
        for r in std::iter::once(&self.default).chain(self.overrides.values()) {
            check_ratio(*r)?;
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("pruning ratio must be in [0, 1), got {r}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneMode {
    Layerwise { ratios: RatioSpec },
    Global { ratio: f64, min_keep: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Member {
    pub layer: String,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedGroup {
    pub score: f64,
    pub members: Vec<Member>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Label of the report the plan was computed from.
    pub source: String,
    pub mode: PruneMode,
    /// Output channels removed per layer (producers and normalization).
    pub removed: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub groups: Vec<PlannedGroup>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Removed output channels of conv / dense layers only.
    pub fn removed_producers(&self, model: &Model) -> Result<BTreeMap<String, BTreeSet<usize>>> {
        let mut out = BTreeMap::new();
        for (layer, chans) in &self.removed {
            let i = model
                .layer_index(layer)
                .ok_or_else(|| Error::InvalidArgument(format!("plan names unknown layer `{layer}`")))?;
            if model.layers()[i].kind.is_producer() {
                out.insert(layer.clone(), chans.iter().copied().collect());
            }
        }
        Ok(out)
    }

    /// Removed channels per layer index (each channel once).
    pub fn removed_indices(&self, layer: &str) -> &[usize] {
        self.removed.get(layer).map_or(&[], |v| v.as_slice())
    }
}

struct Scored {
    group: PruneGroup,
    score: f64,
}

/// Groups with their mean member score; groups with no scored member are
/// left out (they cannot be ranked).
fn scored_groups(model: &Model, report: &ImportanceReport) -> Result<Vec<Scored>> {
    let scores = report.by_key();
    let mut out = Vec::new();
    for group in model.dependency_groups()? {
        let vals: Vec<f64> = group
            .members
            .iter()
            .filter_map(|m| scores.get(&(m.layer.clone(), m.channel)).copied())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let score = if vals.iter().any(|v| v.is_infinite()) {
            f64::INFINITY
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        if score.is_nan() || score < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "report `{}` has an invalid score {score}",
                report.label()
            )));
        }
        out.push(Scored { group, score });
    }
    for (layer, channel) in scores.keys() {
        if model.layer_index(layer).is_none() {
            return Err(Error::InvalidArgument(format!(
                "report scores `{layer}` channel {channel}, which the model lacks"
            )));
        }
    }
    Ok(out)
}

/// Ascending by score, ties by anchor layer then channel (the group order).
fn ranking(groups: &[Scored]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| groups[a].score.total_cmp(&groups[b].score).then(a.cmp(&b)));
    order
}

fn build_plan(source: String, mode: PruneMode, chosen: Vec<&Scored>) -> PrunePlan {
    let mut removed: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut groups = Vec::with_capacity(chosen.len());
    for s in chosen {
        let members: Vec<Member> = s
            .group
            .members
            .iter()
            .map(|m| Member {
                layer: m.layer.clone(),
                channel: m.channel,
            })
            .collect();
        for m in &members {
            removed.entry(m.layer.clone()).or_default().push(m.channel);
        }
        groups.push(PlannedGroup {
            score: s.score,
            members,
        });
    }
    for v in removed.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    PrunePlan {
        source,
        mode,
        removed,
        groups,
    }
}

/// Removes `⌊ratio·C⌋` lowest-scoring groups per anchor layer, `C` being the
/// number of groups anchored there. A group's ratio is the smallest ratio
/// among the layers it touches.
pub fn plan_layerwise(model: &Model, report: &ImportanceReport, ratios: &RatioSpec) -> Result<PrunePlan> {
    ratios.validate()?;
    let groups = scored_groups(model, report)?;
    let mut by_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in groups.iter().enumerate() {
        by_anchor.entry(s.group.anchor().layer_index).or_default().push(i);
    }
    let order = ranking(&groups);
    let mut chosen = Vec::new();
    for members in by_anchor.values() {
        let first = &groups[members[0]].group;
        let ratio = first
            .members
            .iter()
            .map(|m| ratios.ratio_for(&m.layer))
            .fold(f64::INFINITY, f64::min);
        let quota = (ratio * members.len() as f64).floor() as usize;
        chosen.extend(
            order
                .iter()
                .filter(|i| members.contains(i) && groups[**i].score.is_finite())
                .take(quota)
                .copied(),
        );
    }
    chosen.sort_unstable();
    Ok(build_plan(
        report.label(),
        PruneMode::Layerwise {
            ratios: ratios.clone(),
        },
        chosen.into_iter().map(|i| &groups[i]).collect(),
    ))
}

/// One ranking across all layers. Removes the lowest groups until
/// `⌈ratio·G⌉` of the `G` rankable groups are gone, skipping any group whose
/// removal would leave one of its layers with fewer than `min_keep`
/// channels.
pub fn plan_global(model: &Model, report: &ImportanceReport, ratio: f64, min_keep: usize) -> Result<PrunePlan> {
    check_ratio(ratio)?;
    if min_keep == 0 {
        return Err(Error::InvalidArgument("min_keep must be at least 1".into()));
    }
    let groups = scored_groups(model, report)?;
    let target = (ratio * groups.len() as f64).ceil() as usize;
    let mut remaining: BTreeMap<String, usize> = BTreeMap::new();
    for s in &groups {
        for m in &s.group.members {
            remaining
                .entry(m.layer.clone())
                .or_insert_with(|| model.output_shape(m.layer_index)[0]);
        }
    }
    let mut chosen = Vec::new();
    for i in ranking(&groups) {
        if chosen.len() == target {
            break;
        }
        let s = &groups[i];
        if !s.score.is_finite() {
            continue;
        }
        let fits = s.group.members.iter().all(|m| remaining[&m.layer] > min_keep);
        if fits {
            for m in &s.group.members {
                *remaining.get_mut(&m.layer).expect("counted above") -= 1;
            }
            chosen.push(i);
        }
    }
    if chosen.len() < target {
        return Err(Error::Unreachable {
            requested: ratio,
            achievable: chosen.len() as f64 / groups.len().max(1) as f64,
        });
    }
    chosen.sort_unstable();
    Ok(build_plan(
        report.label(),
        PruneMode::Global { ratio, min_keep },
        chosen.into_iter().map(|i| &groups[i]).collect(),
    ))
}

fn check_members(plan: &PrunePlan, model: &Model) -> Result<()> {
    for (layer, chans) in &plan.removed {
        let i = model
            .layer_index(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("plan names unknown layer `{layer}`")))?;
        let c = model.output_shape(i)[0];
        if let Some(bad) = chans.iter().find(|&&ch| ch >= c) {
            return Err(Error::InvalidArgument(format!(
                "plan removes channel {bad} of `{layer}`, which has {c}"
            )));
        }
    }
    Ok(())
}

/// Physically removes the planned channels.
pub fn apply(plan: &PrunePlan, model: &Model) -> Result<Model> {
    check_members(plan, model)?;
    model.remove_channels(&plan.removed_producers(model)?)
}

/// Reference for [`apply`]: the original model with every planned
/// channel's producer row, bias and normalization scale/shift set to zero.
pub fn mask(plan: &PrunePlan, model: &Model) -> Result<Model> {
    check_members(plan, model)?;
    let mut out = model.clone();
    for (layer, chans) in &plan.removed {
        let i = model.layer_index(layer).expect("checked");
        let params = out.params_mut();
        match &model.layers()[i].kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                let w = params.require_mut(&weight_name(layer))?;
                let row: usize = w.shape()[1..].iter().product();
                for &c in chans {
                    w.data_mut()[c * row..(c + 1) * row].fill(0.0);
                }
                if let Some(b) = params.get_mut(&bias_name(layer)) {
                    for &c in chans {
                        b.data_mut()[c] = 0.0;
                    }
                }
            }
            LayerKind::BatchNorm { .. } => {
                for p in [weight_name(layer), bias_name(layer)] {
                    let t = params.require_mut(&p)?;
                    for &c in chans {
                        t.data_mut()[c] = 0.0;
                    }
                }
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "plan removes channels of `{layer}` ({})",
                    other.label()
                )))
            }
        }
    }
    Ok(out)
}

pub fn finetune(
    model: &Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    recipe: &Recipe,
    seed: u64,
) -> Result<(Model, Vec<EpochRecord>)> {
    let mut m = model.clone();
    let trace = fit(&mut m, train, eval, recipe, seed)?;
    Ok((m, trace))
}
