//! Gradient probes on filter norms.
//!
//! Extending a model inserts `ψ(x) = D·x − D̄·x + σ(x)` in place of the
//! element-wise op `σ` that follows a target layer. `D` and `D̄` are
//! per-channel vectors, both set to the filter norms `‖F_i‖`. With the two
//! bitwise equal the extra terms cancel exactly, so the extended network
//! computes the same function while `∂L/∂D_i` becomes available.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ComputeGraph, GradTable, Sigma};
use crate::error::{Error, Result};
use crate::model::{FilterTarget, LayerKind, Mode, Model};
use crate::projective::l2;
use crate::tensor::Tensor;

/// Where the probe goes when a conv target is followed by normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SitePolicy {
    /// After the normalization layer (wrapping the activation behind it).
    #[default]
    AfterBn,
    /// Directly on the conv output.
    AfterTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub target: FilterTarget,
    #[serde(default)]
    pub policy: SitePolicy,
    /// Whether a conv filter (and hence its norm) includes the bias entry.
    #[serde(default = "default_include_bias")]
    pub include_bias: bool,
}

fn default_include_bias() -> bool {
    true
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            target: FilterTarget::ConvWeights,
            policy: SitePolicy::AfterBn,
            include_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSite {
    /// Layer whose filters the probe measures.
    pub target: String,
    /// Layer whose output the probe reads.
    pub anchor: String,
    /// Activation layer replaced by the probe, if any; otherwise the probe
    /// is inserted after `anchor` with an identity `σ`.
    pub wraps: Option<String>,
    pub sigma: Sigma,
    pub d: Vec<f64>,
    pub dbar: Vec<f64>,
}

impl InjectionSite {
    pub fn d_param(&self) -> String {
        format!("{}.psi_d", self.target)
    }

    pub fn dbar_param(&self) -> String {
        format!("{}.psi_dbar", self.target)
    }
}

/// Per-site gradients with respect to the two diagonals.
#[derive(Clone, Debug, PartialEq)]
pub struct DGradient {
    pub target: String,
    pub d: Vec<f64>,
    pub dbar: Vec<f64>,
}

fn locate(model: &Model, target: usize, policy: SitePolicy) -> Result<(usize, Option<usize>, Sigma)> {
    let layers = model.layers();
    let name = &layers[target].name;
    let is_conv = matches!(layers[target].kind, LayerKind::Conv2d { .. });
    let mut anchor = target;
    if is_conv && policy == SitePolicy::AfterBn {
        if let [next] = model.consumers(target) {
            if matches!(layers[*next].kind, LayerKind::BatchNorm { .. }) {
                anchor = *next;
            }
        }
    }
    let consumers = model.consumers(anchor);
    if let [next] = consumers {
        if matches!(layers[*next].kind, LayerKind::Relu) {
            return Ok((anchor, Some(*next), Sigma::Relu));
        }
    }
    let identity_ok = !consumers.is_empty()
        && consumers.iter().all(|&c| match layers[c].kind {
            LayerKind::Add => true,
            LayerKind::BatchNorm { .. } => is_conv && policy == SitePolicy::AfterTarget,
            _ => false,
        });
    if identity_ok {
        return Ok((anchor, None, Sigma::Identity));
    }
    let following: Vec<&str> = consumers.iter().map(|&c| layers[c].kind.label()).collect();
    Err(Error::UnsupportedSite(format!(
        "`{name}` is followed by {following:?}, not by an element-wise op"
    )))
}

/// Extends `model` with a probe behind each named target layer.
pub fn extend(model: &Model, targets: &[String], config: &InjectionConfig) -> Result<Model> {
    if model.extension().is_some() {
        return Err(Error::State("model is already extended".into()));
    }
    let handles = model.extract_filters(config.target, config.include_bias)?;
    let mut sites = Vec::with_capacity(targets.len());
    let mut wrapped: Vec<usize> = Vec::new();
    for t in targets {
        let i = model
            .layer_index(t)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown target layer `{t}`")))?;
        let norms: Vec<f64> = handles
            .iter()
            .filter(|h| h.layer_index == i)
            .map(|h| l2(&h.vector))
            .collect();
        if norms.is_empty() {
            return Err(Error::UnsupportedSite(format!(
                "`{t}` has no {:?} filters",
                config.target
            )));
        }
        let (anchor, wraps, sigma) = locate(model, i, config.policy)?;
        if wrapped.contains(&anchor) {
            return Err(Error::UnsupportedSite(format!(
                "`{t}` shares its probe position with another target"
            )));
        }
        wrapped.push(anchor);
        let layers = model.layers();
        sites.push(InjectionSite {
            target: t.clone(),
            anchor: layers[anchor].name.clone(),
            wraps: wraps.map(|w| layers[w].name.clone()),
            sigma,
            dbar: norms.clone(),
            d: norms,
        });
    }
    let mut extended = model.clone();
    extended.set_extension(Some(sites));
    Ok(extended)
}

/// Extends every layer that carries filters of the configured kind.
pub fn extend_all(model: &Model, config: &InjectionConfig) -> Result<Model> {
    let mut targets: Vec<String> = Vec::new();
    for h in model.extract_filters(config.target, config.include_bias)? {
        if targets.last() != Some(&h.layer) {
            targets.push(h.layer);
        }
    }
    extend(model, &targets, config)
}

/// Copy of an extended model with the diagonals of the site probing
/// `target` replaced. Unequal `d` and `dbar` make the probe visible in the
/// model output, which is what a finite-difference check needs.
pub fn with_diagonals(model: &Model, target: &str, d: Vec<f64>, dbar: Vec<f64>) -> Result<Model> {
    let mut sites = model
        .extension()
        .ok_or_else(|| Error::State("model is not extended".into()))?
        .to_vec();
    let site = sites
        .iter_mut()
        .find(|s| s.target == target)
        .ok_or_else(|| Error::InvalidArgument(format!("no probe on `{target}`")))?;
    if d.len() != site.d.len() || dbar.len() != site.dbar.len() {
        return Err(Error::shape(
            "with_diagonals",
            format!("{} / {} values for {} channels", d.len(), dbar.len(), site.d.len()),
        ));
    }
    site.d = d;
    site.dbar = dbar;
    let mut out = model.clone();
    out.set_extension(Some(sites));
    Ok(out)
}

/// Drops the probes, returning the model exactly as it was before `extend`.
pub fn revert(model: &Model) -> Result<Model> {
    if model.extension().is_none() {
        return Err(Error::State("revert called on a model that is not extended".into()));
    }
    let mut original = model.clone();
    original.set_extension(None);
    Ok(original)
}

/// Diagonal gradients read out of a gradient table of the extended model.
pub fn d_gradient_from(model: &Model, grads: &GradTable) -> Result<Vec<DGradient>> {
    let sites = model
        .extension()
        .ok_or_else(|| Error::State("model is not extended".into()))?;
    sites
        .iter()
        .map(|s| {
            let get = |name: String| {
                grads
                    .get(&name)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::State(format!("no gradient for `{name}`")))
            };
            Ok(DGradient {
                target: s.target.clone(),
                d: get(s.d_param())?,
                dbar: get(s.dbar_param())?,
            })
        })
        .collect()
}

/// Train-mode forward/backward on one batch of the extended model,
/// returning the diagonal gradients. Normalization statistics are not
/// updated.
pub fn d_gradient(model: &Model, x: Tensor, labels: &[usize]) -> Result<Vec<DGradient>> {
    if model.extension().is_none() {
        return Err(Error::State("model is not extended".into()));
    }
    let mut g = ComputeGraph::new();
    model.loss(&mut g, x, labels, Mode::Train)?;
    let grads = g.backward()?;
    d_gradient_from(model, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LayerSpec, ModelSpec};

    fn chain() -> ModelSpec {
        ModelSpec {
            name: "chain".into(),
            input: vec![2, 4, 4],
            layers: vec![
                LayerSpec::conv("conv", 2, 3, 3, 1, 1),
                LayerSpec::bn("bn", 3),
                LayerSpec::relu("relu"),
                LayerSpec::flatten("flat"),
                LayerSpec::dense("fc", 48, 2),
            ],
        }
    }

    #[test]
    fn bn_target_wraps_relu_with_pair_norms() {
        let mut m = build_model(&chain(), 0).unwrap();
        m.params_mut().require_mut("bn.weight").unwrap().data_mut()[1] = 3.0;
        m.params_mut().require_mut("bn.bias").unwrap().data_mut()[1] = 4.0;
        let cfg = InjectionConfig {
            target: FilterTarget::BnParams,
            ..Default::default()
        };
        let ext = extend_all(&m, &cfg).unwrap();
        let site = &ext.extension().unwrap()[0];
        assert_eq!(site.wraps.as_deref(), Some("relu"));
        assert_eq!(site.sigma, Sigma::Relu);
        assert_eq!(site.d, vec![1.0, 5.0, 1.0]);
        assert_eq!(site.d, site.dbar);
    }

    #[test]
    fn conv_into_conv_is_unsupported() {
        let spec = ModelSpec {
            name: "cc".into(),
            input: vec![1, 4, 4],
            layers: vec![
                LayerSpec::conv("a", 1, 2, 3, 1, 1),
                LayerSpec::conv("b", 2, 2, 3, 1, 1),
                LayerSpec::flatten("f"),
                LayerSpec::dense("fc", 32, 2),
            ],
        };
        let m = build_model(&spec, 0).unwrap();
        let r = extend(&m, &["a".to_string()], &InjectionConfig::default());
        assert!(matches!(r, Err(Error::UnsupportedSite(_))));
    }

    #[test]
    fn policy_moves_the_probe() {
        let m = build_model(&chain(), 0).unwrap();
        let after_bn = extend_all(&m, &InjectionConfig::default()).unwrap();
        assert_eq!(after_bn.extension().unwrap()[0].anchor, "bn");
        let cfg = InjectionConfig {
            policy: SitePolicy::AfterTarget,
            ..Default::default()
        };
        let after_conv = extend_all(&m, &cfg).unwrap();
        let site = &after_conv.extension().unwrap()[0];
        assert_eq!(site.anchor, "conv");
        assert_eq!(site.sigma, Sigma::Identity);
        assert_eq!(site.wraps, None);
    }

    #[test]
    fn revert_round_trip_and_double_revert() {
        let m = build_model(&chain(), 4).unwrap();
        let ext = extend_all(&m, &InjectionConfig::default()).unwrap();
        let back = revert(&ext).unwrap();
        assert_eq!(back.checkpoint_bytes(), m.checkpoint_bytes());
        assert_eq!(back, m);
        assert!(matches!(revert(&back), Err(Error::State(_))));
    }

    #[test]
    fn d_gradient_needs_extension() {
        let m = build_model(&chain(), 0).unwrap();
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        assert!(matches!(d_gradient(&m, x, &[0]), Err(Error::State(_))));
    }
}
