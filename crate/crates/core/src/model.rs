//! Plant, feedback gains, state domain, diffusion coefficient and control sets.
//!
//! The plant is `ẋ = A x + Σ_i B_i u_i`; a feedback tuple closes every channel
//! with `u_i = γ_i x`. All types validate their structural invariants at
//! construction and are immutable afterwards.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Linear multi-channel plant `ẋ = A x + Σ B_i u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSystem {
    a: DMatrix<f64>,
    channels: Vec<DMatrix<f64>>,
}

impl MultiChannelSystem {
    pub fn new(a: DMatrix<f64>, channels: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::Dimension(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !all_finite(&a) {
            return Err(Error::NonFinite("A has non-finite entries".into()));
        }
        if channels.is_empty() {
            return Err(Error::Dimension("at least one input channel is required".into()));
        }
        for (i, b) in channels.iter().enumerate() {
            if b.nrows() != d {
                return Err(Error::Channel {
                    channel: i,
                    message: format!("B has {} rows, expected {d}", b.nrows()),
                });
            }
            if b.ncols() == 0 {
                return Err(Error::Channel { channel: i, message: "B has no columns".into() });
            }
            if !all_finite(b) {
                return Err(Error::Channel { channel: i, message: "B has non-finite entries".into() });
            }
        }
        Ok(Self { a, channels })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn input(&self, channel: usize) -> &DMatrix<f64> {
        &self.channels[channel]
    }

    pub fn inputs(&self) -> &[DMatrix<f64>] {
        &self.channels
    }
}

/// One gain matrix `γ_i` (r_i × d) per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTuple {
    gains: Vec<DMatrix<f64>>,
}

impl FeedbackTuple {
    pub fn new(gains: Vec<DMatrix<f64>>) -> Self {
        Self { gains }
    }

    /// All-zero gains, i.e. the open-loop plant.
    pub fn zeros(system: &MultiChannelSystem) -> Self {
        let d = system.dim();
        Self {
            gains: system.inputs().iter().map(|b| DMatrix::zeros(b.ncols(), d)).collect(),
        }
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn gain(&self, channel: usize) -> &DMatrix<f64> {
        &self.gains[channel]
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn check_against(&self, system: &MultiChannelSystem) -> Result<()> {
        if self.gains.len() != system.channel_count() {
            return Err(Error::Dimension(format!(
                "feedback tuple has {} gains for a {}-channel system",
                self.gains.len(),
                system.channel_count()
            )));
        }
        for (i, (g, b)) in self.gains.iter().zip(system.inputs()).enumerate() {
            if g.nrows() != b.ncols() || g.ncols() != system.dim() {
                return Err(Error::Channel {
                    channel: i,
                    message: format!(
                        "gain is {}x{}, expected {}x{}",
                        g.nrows(),
                        g.ncols(),
                        b.ncols(),
                        system.dim()
                    ),
                });
            }
            if !all_finite(g) {
                return Err(Error::Channel { channel: i, message: "gain has non-finite entries".into() });
            }
        }
        Ok(())
    }
}

/// `A + Σ_i B_i γ_i`.
pub fn closed_loop(system: &MultiChannelSystem, feedbacks: &FeedbackTuple) -> Result<DMatrix<f64>> {
    feedbacks.check_against(system)?;
    let mut m = system.a().clone();
    for (b, g) in system.inputs().iter().zip(feedbacks.gains()) {
        m += b * g;
    }
    Ok(m)
}

/// `A + Σ_{j≠skip} B_j γ_j`: the drift matrix seen by channel `skip` when the
/// other channels are frozen at their feedback gains.
pub fn closed_loop_except(
    system: &MultiChannelSystem,
    feedbacks: &FeedbackTuple,
    skip: usize,
) -> Result<DMatrix<f64>> {
    feedbacks.check_against(system)?;
    if skip >= system.channel_count() {
        return Err(Error::Channel { channel: skip, message: "no such channel".into() });
    }
    let mut m = system.a().clone();
    for (j, (b, g)) in system.inputs().iter().zip(feedbacks.gains()).enumerate() {
        if j != skip {
            m += b * g;
        }
    }
    Ok(m)
}

/// Bounded open state domain with exact membership and signed distance.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Box { lower: DVector<f64>, upper: DVector<f64> },
    Ball { center: DVector<f64>, radius: f64 },
}

impl Domain {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Domain(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || u <= l {
                return Err(Error::Domain(format!("axis {k}: need lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(Domain::Box { lower: DVector::from_vec(lower), upper: DVector::from_vec(upper) })
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("ball center must be a finite nonempty vector".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Domain(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Domain::Ball { center: DVector::from_vec(center), radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lower, .. } => lower.len(),
            Domain::Ball { center, .. } => center.len(),
        }
    }

    /// Signed distance to the boundary: negative inside, zero on it, positive outside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { lower, upper } => {
                let mut inside_margin = f64::INFINITY;
                let mut outside_sq = 0.0;
                let mut outside = false;
                for k in 0..lower.len() {
                    let below = lower[k] - x[k];
                    let above = x[k] - upper[k];
                    let excess = below.max(above);
                    if excess > 0.0 {
                        outside = true;
                        outside_sq += excess * excess;
                    } else {
                        inside_margin = inside_margin.min(-excess);
                    }
                }
                if outside {
                    outside_sq.sqrt()
                } else {
                    -inside_margin
                }
            }
            Domain::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center.iter()).map(|(a, c)| (a - c) * (a - c)).sum();
                r2.sqrt() - radius
            }
        }
    }

    /// Membership in the open set D.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box { lower, upper } => {
                x.iter().enumerate().all(|(k, &v)| v > lower[k] && v < upper[k])
            }
            Domain::Ball { .. } => self.signed_distance(x) < 0.0,
        }
    }

    /// Membership in the closure D̄ inflated by `tol`.
    pub fn contains_closed(&self, x: &[f64], tol: f64) -> bool {
        self.signed_distance(x) <= tol
    }

    /// Nearest point of D̄ (box clamp or radial projection).
    pub fn project(&self, x: &mut [f64]) {
        match self {
            Domain::Box { lower, upper } => {
                for (k, v) in x.iter_mut().enumerate() {
                    *v = v.clamp(lower[k], upper[k]);
                }
            }
            Domain::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center.iter()).map(|(a, c)| (a - c) * (a - c)).sum();
                let r = r2.sqrt();
                if r > *radius {
                    let s = radius / r;
                    for (v, c) in x.iter_mut().zip(center.iter()) {
                        *v = c + (*v - c) * s;
                    }
                }
            }
        }
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lower, upper } => (lower.iter().copied().collect(), upper.iter().copied().collect()),
            Domain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
        }
    }

    /// A point well inside D.
    pub fn center(&self) -> Vec<f64> {
        match self {
            Domain::Box { lower, upper } => lower.iter().zip(upper.iter()).map(|(l, u)| 0.5 * (l + u)).collect(),
            Domain::Ball { center, .. } => center.iter().copied().collect(),
        }
    }
}

/// Scalar factor multiplying the constant diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modulation {
    Constant,
    /// `x ↦ 1 + β |x|² / (1 + |x|²)` with β > −1.
    Saturating { beta: f64 },
}

impl Modulation {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            Modulation::Saturating { beta } => {
                let s: f64 = x.iter().map(|v| v * v).sum();
                1.0 + beta * s / (1.0 + s)
            }
        }
    }

    /// Gradient of [`Modulation::value`], written into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Modulation::Constant => out.iter_mut().for_each(|g| *g = 0.0),
            Modulation::Saturating { beta } => {
                let s: f64 = x.iter().map(|v| v * v).sum();
                let ds = beta / ((1.0 + s) * (1.0 + s));
                for (g, v) in out.iter_mut().zip(x) {
                    *g = 2.0 * v * ds;
                }
            }
        }
    }

    /// Exact infimum over all of R^d.
    pub fn infimum(&self) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            // t/(1+t) sweeps [0, 1) so the factor sweeps [1, 1+β) or (1+β, 1].
            Modulation::Saturating { beta } => 1.0_f64.min(1.0 + beta),
        }
    }
}

/// `σ(x) = m(x) σ₀` with a certified ellipticity bound `σσᵀ ⪰ κ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    base: DMatrix<f64>,
    modulation: Modulation,
    base_covariance: DMatrix<f64>,
    kappa: f64,
}

/// Largest κ provable for the family: `(inf m)² · λ_min(σ₀σ₀ᵀ)`.
pub fn validate_diffusion(base: &DMatrix<f64>, modulation: &Modulation) -> Result<f64> {
    if base.nrows() == 0 || base.nrows() != base.ncols() {
        return Err(Error::Dimension(format!(
            "diffusion base must be square, got {}x{}",
            base.nrows(),
            base.ncols()
        )));
    }
    if !all_finite(base) {
        return Err(Error::NonFinite("diffusion base has non-finite entries".into()));
    }
    if let Modulation::Saturating { beta } = modulation {
        if !beta.is_finite() || *beta <= -1.0 {
            return Err(Error::Ellipticity(format!("saturating modulation needs beta > -1, got {beta}")));
        }
    }
    let inf = modulation.infimum();
    if inf <= 0.0 {
        return Err(Error::Ellipticity("modulation infimum is zero".into()));
    }
    let cov = base * base.transpose();
    let scale = cov.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let lambda_min = cov.symmetric_eigenvalues().min();
    if !(lambda_min > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Ellipticity(format!(
            "σ₀σ₀ᵀ is singular (smallest eigenvalue {lambda_min:e})"
        )));
    }
    let kappa = inf * inf * lambda_min;
    if !(kappa > 0.0) {
        return Err(Error::Ellipticity(format!("certified kappa {kappa:e} is not positive")));
    }
    Ok(kappa)
}

impl DiffusionSpec {
    pub fn new(base: DMatrix<f64>, modulation: Modulation) -> Result<Self> {
        let kappa = validate_diffusion(&base, &modulation)?;
        let base_covariance = &base * base.transpose();
        Ok(Self { base, modulation, base_covariance, kappa })
    }

    /// `σ = I_d`, unmodulated.
    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim), Modulation::Constant).expect("identity is elliptic")
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    /// `σ₀σ₀ᵀ`.
    pub fn base_covariance(&self) -> &DMatrix<f64> {
        &self.base_covariance
    }

    pub fn sigma_at(&self, x: &[f64]) -> DMatrix<f64> {
        &self.base * self.modulation.value(x)
    }

    /// `a(x) = σ(x)σ(x)ᵀ`.
    pub fn covariance_at(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.modulation.value(x);
        &self.base_covariance * (m * m)
    }
}

/// Axis-aligned admissible control box `U_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "control box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::Input(format!("control axis {k}: need finite lower <= upper, got [{l}, {u}]")));
            }
        }
        Ok(Self { lower: DVector::from_vec(lower), upper: DVector::from_vec(upper) })
    }

    /// The box `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim() && u.iter().enumerate().all(|(k, &v)| v >= self.lower[k] && v <= self.upper[k])
    }
}

/// One control box per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    boxes: Vec<ControlBox>,
}

impl ControlSpec {
    pub fn new(system: &MultiChannelSystem, boxes: Vec<ControlBox>) -> Result<Self> {
        if boxes.len() != system.channel_count() {
            return Err(Error::Dimension(format!(
                "{} control boxes for a {}-channel system",
                boxes.len(),
                system.channel_count()
            )));
        }
        for (i, (bx, b)) in boxes.iter().zip(system.inputs()).enumerate() {
            if bx.dim() != b.ncols() {
                return Err(Error::Channel {
                    channel: i,
                    message: format!("control box has dimension {}, channel has {} inputs", bx.dim(), b.ncols()),
                });
            }
        }
        Ok(Self { boxes })
    }

    pub fn channel(&self, i: usize) -> &ControlBox {
        &self.boxes[i]
    }

    pub fn boxes(&self) -> &[ControlBox] {
        &self.boxes
    }
}

/// Noise intensity `ε ∈ (0, ε_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    epsilon: f64,
    epsilon_max: f64,
}

impl NoiseLevel {
    pub fn new(epsilon: f64, epsilon_max: f64) -> Result<Self> {
        if !(epsilon_max > 0.0) {
            return Err(Error::Input(format!("epsilon_max must be positive, got {epsilon_max}")));
        }
        if !(epsilon > 0.0 && epsilon < epsilon_max) {
            return Err(Error::Input(format!("epsilon must lie in (0, {epsilon_max}), got {epsilon}")));
        }
        Ok(Self { epsilon, epsilon_max })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn epsilon_max(&self) -> f64 {
        self.epsilon_max
    }
}
