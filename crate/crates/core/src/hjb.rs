//! Per-channel optimal exit rates by policy iteration over grid policies.
//!
//! Channel `i` sees the drift `(A + Σ_{j≠i} B_j γ_j) x + B_i u(x)` with `u`
//! ranging over grid fields valued in the box `U_i`. Each sweep solves the
//! eigenproblem for the current policy and then picks, node by node, the box
//! vertex that pushes along `∇ψ`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::drift::Drift;
use crate::eig::{self, discretize, principal_eigenpair, EigenPair, OperatorGrid, SparseOperator};
use crate::error::{Error, Result};
use crate::model::{closed_loop_except, ControlBox, ControlSpec, DiffusionSpec, FeedbackTuple, MultiChannelSystem};
use crate::pareto::RateVector;

/// Switching threshold on `B_iᵀ∇ψ`; smaller magnitudes select the box midpoint.
pub const TIE_TOLERANCE: f64 = 1e-12;
pub const HJB_TOL: f64 = 1e-9;
pub const HJB_MAX_SWEEPS: usize = 60;

/// Piecewise-constant feedback for one channel, one control vector per interior node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    channel: usize,
    grid: Arc<OperatorGrid>,
    values: Vec<DVector<f64>>,
}

impl PolicyField {
    pub fn new(channel: usize, grid: Arc<OperatorGrid>, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Input(format!("policy has {} values for {} interior nodes", values.len(), grid.len())));
        }
        Ok(Self { channel, grid, values })
    }

    pub fn constant(channel: usize, grid: Arc<OperatorGrid>, u: DVector<f64>) -> Self {
        let values = vec![u; grid.len()];
        Self { channel, grid, values }
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    pub fn grid(&self) -> &Arc<OperatorGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, node: usize) -> &DVector<f64> {
        &self.values[node]
    }

    /// Control at the interior node nearest to `x`.
    pub fn lookup(&self, x: &[f64]) -> &DVector<f64> {
        &self.values[self.grid.nearest_interior(x)]
    }

    pub fn within(&self, control: &ControlBox) -> bool {
        self.values.iter().all(|u| control.contains(u))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let m = self.values.first().map_or(0, |u| u.len());
        let names: Vec<String> = (1..=m).map(|k| format!("u{k}")).collect();
        let columns: Vec<&str> = names.iter().map(String::as_str).collect();
        let rows: Vec<Vec<f64>> = self.values.iter().map(|u| u.iter().copied().collect()).collect();
        self.grid.write_field_csv(w, &columns, &rows)
    }
}

/// Channel `i` with every other channel frozen at its feedback gain.
#[derive(Debug, Clone)]
pub struct ChannelProblem {
    channel: usize,
    frozen_drift: DMatrix<f64>,
    input: DMatrix<f64>,
    control: ControlBox,
    diffusion: DiffusionSpec,
    epsilon: f64,
    grid: Arc<OperatorGrid>,
}

impl ChannelProblem {
    pub fn new(
        system: &MultiChannelSystem,
        feedbacks: &FeedbackTuple,
        channel: usize,
        controls: &ControlSpec,
        diffusion: &DiffusionSpec,
        epsilon: f64,
        grid: Arc<OperatorGrid>,
    ) -> Result<Self> {
        let frozen_drift = closed_loop_except(system, feedbacks, channel)?;
        if controls.boxes().len() != system.channel_count() {
            return Err(Error::Dimension(format!(
                "{} control boxes for {} channels",
                controls.boxes().len(),
                system.channel_count()
            )));
        }
        if diffusion.dim() != system.dim() || grid.dim() != system.dim() {
            return Err(Error::Dimension(format!(
                "system dimension {}, diffusion {}, grid {}",
                system.dim(),
                diffusion.dim(),
                grid.dim()
            )));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            channel,
            frozen_drift,
            input: system.input(channel).clone(),
            control: controls.channel(channel).clone(),
            diffusion: diffusion.clone(),
            epsilon,
            grid,
        })
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    /// `A + Σ_{j≠i} B_j γ_j`.
    pub fn frozen_drift(&self) -> &DMatrix<f64> {
        &self.frozen_drift
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.input
    }

    pub fn control(&self) -> &ControlBox {
        &self.control
    }

    pub fn grid(&self) -> &Arc<OperatorGrid> {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn diffusion(&self) -> &DiffusionSpec {
        &self.diffusion
    }

    pub fn drift(&self, policy: &PolicyField) -> Drift {
        Drift::Controlled { matrix: self.frozen_drift.clone(), input: self.input.clone(), policy: policy.clone() }
    }

    pub fn midpoint_policy(&self) -> PolicyField {
        PolicyField::constant(self.channel, self.grid.clone(), self.control.midpoint())
    }
}

pub fn assemble_channel_operator(problem: &ChannelProblem, policy: &PolicyField) -> Result<SparseOperator> {
    if policy.len() != problem.grid.len() {
        return Err(Error::Input(format!(
            "policy covers {} nodes, grid has {}",
            policy.len(),
            problem.grid.len()
        )));
    }
    discretize(&problem.drift(policy), &problem.diffusion, problem.epsilon, &problem.grid)
}

/// Central-difference gradient of a grid function with zero Dirichlet data,
/// one-sided toward the interior next to the boundary.
pub fn gradient(grid: &OperatorGrid, psi: &[f64]) -> Vec<DVector<f64>> {
    let d = grid.dim();
    let h = grid.spacing();
    (0..grid.len())
        .map(|p| {
            let mut g = DVector::zeros(d);
            let mut off = [0i32; 3];
            for k in 0..d {
                off[k] = 1;
                let plus = grid.neighbor(p, &off[..d]);
                off[k] = -1;
                let minus = grid.neighbor(p, &off[..d]);
                off[k] = 0;
                g[k] = match (plus, minus) {
                    (Some(a), Some(b)) => (psi[a] - psi[b]) / (2.0 * h[k]),
                    (None, Some(b)) => (psi[p] - psi[b]) / h[k],
                    (Some(a), None) => (psi[a] - psi[p]) / h[k],
                    (None, None) => 0.0,
                };
            }
            g
        })
        .collect()
}

/// Per node, the box point maximizing `⟨B_iᵀ∇ψ, u⟩`.
pub fn improve_policy(
    grad_psi: &[DVector<f64>],
    input: &DMatrix<f64>,
    control: &ControlBox,
    grid: Arc<OperatorGrid>,
    channel: usize,
) -> Result<PolicyField> {
    let mid = control.midpoint();
    let values = grad_psi
        .iter()
        .map(|g| {
            let s = input.tr_mul(g);
            DVector::from_iterator(
                s.len(),
                s.iter().enumerate().map(|(k, &v)| {
                    if v > TIE_TOLERANCE {
                        control.upper()[k]
                    } else if v < -TIE_TOLERANCE {
                        control.lower()[k]
                    } else {
                        mid[k]
                    }
                }),
            )
        })
        .collect();
    PolicyField::new(channel, grid, values)
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub eigenpair: EigenPair,
    pub policy: PolicyField,
    /// Eigenvalue after each sweep.
    pub trace: Vec<f64>,
    /// False when the sweep budget ran out before the stopping rule fired.
    pub converged: bool,
}

/// Serializable digest of one channel's solve.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct HjbSummary {
    pub channel: usize,
    pub lambda: f64,
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl HjbSolution {
    pub fn lambda(&self) -> f64 {
        self.eigenpair.lambda
    }

    pub fn summary(&self) -> HjbSummary {
        HjbSummary {
            channel: self.policy.channel(),
            lambda: self.eigenpair.lambda,
            residual: self.eigenpair.residual,
            sweeps: self.trace.len(),
            converged: self.converged,
            trace: self.trace.clone(),
        }
    }
}

pub fn policy_iteration(problem: &ChannelProblem, tol: f64, max_sweeps: usize) -> Result<HjbSolution> {
    if max_sweeps == 0 {
        return Err(Error::Input("max_sweeps must be positive".into()));
    }
    let mut policy = problem.midpoint_policy();
    let mut trace = Vec::new();
    let mut best: Option<(EigenPair, PolicyField)> = None;
    let mut converged = false;
    for sweep in 1..=max_sweeps {
        let op = assemble_channel_operator(problem, &policy)?;
        let pair = principal_eigenpair(&op, eig::EIGEN_TOL, eig::EIGEN_MAX_ITER)?;
        let lambda = pair.lambda;
        let prev = trace.last().copied();
        trace.push(lambda);
        if let Some(prev) = prev {
            if lambda > prev * (1.0 + 10.0 * tol) {
                return Err(Error::ConventionViolation { sweep, from: prev, to: lambda });
            }
        }
        let improved = best.as_ref().is_none_or(|(b, _)| lambda < b.lambda);
        let grad = gradient(&problem.grid, &pair.psi);
        if improved {
            best = Some((pair, policy.clone()));
        }
        if let Some(prev) = prev {
            if prev - lambda < tol * prev {
                converged = true;
                break;
            }
        }
        let next = improve_policy(&grad, &problem.input, &problem.control, problem.grid.clone(), problem.channel)?;
        if next == policy {
            converged = true;
            break;
        }
        policy = next;
    }
    let (eigenpair, policy) = best.expect("at least one sweep ran");
    Ok(HjbSolution { eigenpair, policy, trace, converged })
}

/// Solve every channel problem in parallel.
pub fn solve_channels(
    system: &MultiChannelSystem,
    feedbacks: &FeedbackTuple,
    controls: &ControlSpec,
    diffusion: &DiffusionSpec,
    epsilon: f64,
    grid: &Arc<OperatorGrid>,
) -> Result<Vec<HjbSolution>> {
    let results: Vec<Result<HjbSolution>> = (0..system.channel_count())
        .into_par_iter()
        .map(|i| {
            let problem = ChannelProblem::new(system, feedbacks, i, controls, diffusion, epsilon, grid.clone())?;
            policy_iteration(&problem, HJB_TOL, HJB_MAX_SWEEPS)
        })
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(channel, r)| r.map_err(|e| Error::ChannelFailure { channel, source: Box::new(e) }))
        .collect()
}

/// Optimal exit rate of each channel under the frozen feedbacks.
pub fn rate_vector(
    system: &MultiChannelSystem,
    feedbacks: &FeedbackTuple,
    controls: &ControlSpec,
    diffusion: &DiffusionSpec,
    epsilon: f64,
    grid: &Arc<OperatorGrid>,
) -> Result<RateVector> {
    let solutions = solve_channels(system, feedbacks, controls, diffusion, epsilon, grid)?;
    RateVector::new(solutions.iter().map(HjbSolution::lambda).collect())
}
