//! Projective embedding of filters and the projective-offset score.
//!
//! A filter `F ∈ R^N` is sent to the homogeneous point `[‖F‖ : F_1 : … : F_N]`.
//! Points are lines through the origin of `R^{N+1}`, identified up to a
//! positive scalar; the distance between two points is the angle between
//! their lines. Every embedded filter sits at angle π/4 from the origin point
//! `[1 : 0 : … : 0]`, so the score below starts from `tan(π/4) = 1`.

use crate::error::{Error, Result};

/// Denominators below this magnitude are treated as the embedded point
/// landing on the hyperplane orthogonal to the extra axis.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Nonzero vector in `R^{N+1}` up to positive scaling.
#[derive(Clone, Debug)]
pub struct ProjectivePoint {
    coords: Vec<f64>,
}

impl ProjectivePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { op: "projective_point" });
        }
        if coords.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(
                "the zero vector is not a projective point".into(),
            ));
        }
        Ok(ProjectivePoint { coords })
    }

    /// The origin point `[1 : 0 : … : 0]` of `RP^n`.
    pub fn origin(n: usize) -> Self {
        let mut coords = vec![0.0; n + 1];
        coords[0] = 1.0;
        ProjectivePoint { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Unit-norm representative whose first nonzero coordinate is positive.
    pub fn normalized(&self) -> Vec<f64> {
        let norm = l2(&self.coords);
        let sign = self
            .coords
            .iter()
            .find(|&&v| v != 0.0)
            .map_or(1.0, |v| v.signum());
        self.coords.iter().map(|v| sign * v / norm).collect()
    }

    /// Equality of normalized representatives up to `tol` per coordinate.
    pub fn approx_eq(&self, other: &ProjectivePoint, tol: f64) -> bool {
        self.coords.len() == other.coords.len()
            && self
                .normalized()
                .iter()
                .zip(other.normalized())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl PartialEq for ProjectivePoint {
    fn eq(&self, other: &Self) -> bool {
        self.coords.len() == other.coords.len() && self.normalized() == other.normalized()
    }
}

pub fn l2(v: &[f64]) -> f64 {
    // scaled accumulation; avoids overflow for huge filters
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

pub fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `F ↦ [‖F‖ : F]`; the zero filter maps to `[1 : 0 : … : 0]`.
pub fn embed(filter: &[f64]) -> Result<ProjectivePoint> {
    if filter.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "embed" });
    }
    let norm = l2(filter);
    if norm == 0.0 {
        return Ok(ProjectivePoint::origin(filter.len()));
    }
    let mut coords = Vec::with_capacity(filter.len() + 1);
    coords.push(norm);
    coords.extend_from_slice(filter);
    Ok(ProjectivePoint { coords })
}

/// Angle between the lines through `p` and `q`, in `[0, π/2]`.
pub fn angular_distance(p: &ProjectivePoint, q: &ProjectivePoint) -> f64 {
    assert_eq!(
        p.coords.len(),
        q.coords.len(),
        "points live in different projective spaces"
    );
    let dot: f64 = p.coords.iter().zip(&q.coords).map(|(a, b)| a * b).sum();
    let cos = (dot.abs() / (l2(&p.coords) * l2(&q.coords))).clamp(0.0, 1.0);
    cos.acos()
}

/// Projective-offset score of one filter.
///
/// The embedded point `(D, F)` takes one gradient step of size `lambda` to
/// `(D − λ·∂L/∂D, F − λ·∇_F L)`; the score is the tangent of that point's
/// angle to the extra axis,
///
/// ```text
/// ‖F − λ·∇_F L‖ / |D − λ·∂L/∂D|
/// ```
///
/// where `D` is the injected diagonal entry (initialized to `‖F‖`).
/// A vanishing denominator returns `+∞` (never pruned first).
pub fn proscore(
    filter: &[f64],
    filter_grad: &[f64],
    d: f64,
    d_grad: f64,
    lambda: f64,
) -> Result<f64> {
    if filter.len() != filter_grad.len() {
        return Err(Error::shape(
            "proscore",
            format!("filter of {} entries with gradient of {}", filter.len(), filter_grad.len()),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if !lambda.is_finite()
        || !d.is_finite()
        || !d_grad.is_finite()
        || filter.iter().chain(filter_grad).any(|v| !v.is_finite())
    {
        return Err(Error::NumericFault { op: "proscore" });
    }
    let stepped: Vec<f64> = filter
        .iter()
        .zip(filter_grad)
        .map(|(f, g)| f - lambda * g)
        .collect();
    let numerator = l2(&stepped);
    let denominator = (d - lambda * d_grad).abs();
    if denominator < DENOMINATOR_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(numerator / denominator)
}
