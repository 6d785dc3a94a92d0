//! Principal Dirichlet eigenpair of the negated generator
//! `-(b·∇ + (ε/2) tr(a ∇²))` on a tensor grid over D.
//!
//! Diffusion uses central differences (with the 7-point mixed stencil for
//! off-diagonal `a`), drift uses first-order upwinding, so the assembled
//! matrix is an M-matrix. Its smallest eigenvalue is the positive decay rate
//! of the survival probability; it is found by inverse iteration on a banded
//! LU factorization that tracks row-sum surpluses instead of subtracting
//! (no cancellation on the pivots even when λ is exponentially small).

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use sprs::CsMat;

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::model::{DiffusionSpec, Domain};

/// Tensor grid over the bounding box of D with an interior mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorGrid {
    axes: Vec<Vec<f64>>,
    spacing: Vec<f64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    interior_of: Vec<Option<usize>>,
    nodes: Vec<usize>,
}

/// Uniform grid with `resolution[k]` nodes on axis `k` (endpoints included);
/// nodes not strictly inside D carry the zero Dirichlet value.
pub fn build_grid(domain: &Domain, resolution: &[usize]) -> Result<OperatorGrid> {
    let d = domain.dim();
    if d > 3 {
        return Err(Error::Input(format!("grid operators support d <= 3, got {d}")));
    }
    if resolution.len() != d {
        return Err(Error::Input(format!("resolution has {} entries for dimension {d}", resolution.len())));
    }
    if let Some(n) = resolution.iter().find(|&&n| n < 3) {
        return Err(Error::Input(format!("resolution must be at least 3 per axis, got {n}")));
    }
    let (lo, hi) = domain.bounding_box();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let n = resolution[k];
            (0..n)
                .map(|i| if i == n - 1 { hi[k] } else { lo[k] + (hi[k] - lo[k]) * i as f64 / (n - 1) as f64 })
                .collect()
        })
        .collect();
    let spacing: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / (resolution[k] - 1) as f64).collect();
    let mut strides = vec![1; d];
    for k in (0..d.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * resolution[k + 1];
    }
    let total: usize = resolution.iter().product();
    let mut interior_of = vec![None; total];
    let mut nodes = Vec::new();
    let mut x = vec![0.0; d];
    for (flat, slot) in interior_of.iter_mut().enumerate() {
        for k in 0..d {
            x[k] = axes[k][(flat / strides[k]) % resolution[k]];
        }
        if domain.contains(&x) {
            *slot = Some(nodes.len());
            nodes.push(flat);
        }
    }
    if nodes.len() < 3 {
        return Err(Error::DegenerateDomain(format!("only {} interior nodes", nodes.len())));
    }
    Ok(OperatorGrid { axes, spacing, shape: resolution.to_vec(), strides, interior_of, nodes })
}

impl OperatorGrid {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Number of interior (unknown) nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    fn multi_index(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for k in 0..self.dim() {
            idx[k] = (flat / self.strides[k]) % self.shape[k];
        }
        idx
    }

    /// Coordinates of interior node `p`.
    pub fn coords(&self, p: usize) -> Vec<f64> {
        let idx = self.multi_index(self.nodes[p]);
        (0..self.dim()).map(|k| self.axes[k][idx[k]]).collect()
    }

    /// Interior index of the node displaced from `p` by `offset` (each entry in
    /// −1..=1), or `None` when that node is a Dirichlet node.
    pub fn neighbor(&self, p: usize, offset: &[i32]) -> Option<usize> {
        let idx = self.multi_index(self.nodes[p]);
        let mut flat = 0usize;
        for k in 0..self.dim() {
            let i = idx[k] as i64 + i64::from(offset[k]);
            if i < 0 || i >= self.shape[k] as i64 {
                return None;
            }
            flat += i as usize * self.strides[k];
        }
        self.interior_of[flat]
    }

    /// Interior node closest to `x`.
    pub fn nearest_interior(&self, x: &[f64]) -> usize {
        let d = self.dim();
        let mut idx = [0usize; 3];
        for k in 0..d {
            let lo = self.axes[k][0];
            idx[k] = ((x[k] - lo) / self.spacing[k]).round().clamp(0.0, (self.shape[k] - 1) as f64) as usize;
        }
        let flat: usize = (0..d).map(|k| idx[k] * self.strides[k]).sum();
        if let Some(p) = self.interior_of[flat] {
            return p;
        }
        let dist = |p: usize| -> f64 { self.coords(p).iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum() };
        // Points near a curved boundary usually have an interior node within two cells.
        let mut best: Option<(usize, f64)> = None;
        for code in 0..5usize.pow(d as u32) {
            let mut rem = code;
            let mut flat = 0usize;
            let mut valid = true;
            for k in 0..d {
                let i = idx[k] as i64 + (rem % 5) as i64 - 2;
                rem /= 5;
                if i < 0 || i >= self.shape[k] as i64 {
                    valid = false;
                    break;
                }
                flat += i as usize * self.strides[k];
            }
            if let Some(p) = self.interior_of[flat].filter(|_| valid) {
                let dp = dist(p);
                if best.is_none_or(|(_, b)| dp < b) {
                    best = Some((p, dp));
                }
            }
        }
        let reach = self.spacing.iter().fold(0.0_f64, |m, h| m.max(*h)) * 1.5;
        match best {
            Some((p, dp)) if dp.sqrt() <= reach => p,
            _ => (0..self.len()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("grid has interior nodes"),
        }
    }

    /// CSV with node coordinates and one value column per node.
    pub fn write_field_csv<W: Write>(&self, mut w: W, columns: &[&str], values: &[Vec<f64>]) -> std::io::Result<()> {
        let header: Vec<String> =
            (1..=self.dim()).map(|k| format!("x{k}")).chain(columns.iter().map(|c| c.to_string())).collect();
        writeln!(w, "{}", header.join(","))?;
        for (p, row) in values.iter().enumerate() {
            let cells: Vec<String> =
                self.coords(p).iter().chain(row.iter()).map(|v| format!("{v}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// `L_h = −G_h` on the interior nodes, with the Dirichlet surplus of each row
/// (the weight that leaks to boundary nodes) kept exactly.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    matrix: CsMat<f64>,
    surplus: Vec<f64>,
}

impl SparseOperator {
    pub fn len(&self) -> usize {
        self.surplus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surplus.is_empty()
    }

    pub fn matrix(&self) -> &CsMat<f64> {
        &self.matrix
    }

    /// Row sums `Σ_j L_ij`, nonnegative by construction.
    pub fn surplus(&self) -> &[f64] {
        &self.surplus
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j).copied().unwrap_or(0.0)
    }

    pub fn bandwidth(&self) -> usize {
        self.matrix
            .outer_iterator()
            .enumerate()
            .flat_map(|(i, row)| row.indices().iter().map(move |&j| i.abs_diff(j)).collect::<Vec<_>>())
            .max()
            .unwrap_or(0)
    }

    /// `L x` evaluated as `s_i x_i + Σ_{j≠i} |L_ij| (x_i − x_j)`, which avoids
    /// cancelling the large diagonal against the neighbors.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .outer_iterator()
            .enumerate()
            .map(|(i, row)| {
                let mut acc = self.surplus[i] * x[i];
                for (j, &v) in row.iter() {
                    if j != i {
                        acc += -v * (x[i] - x[j]);
                    }
                }
                acc
            })
            .collect()
    }

    /// Plain CSR product `L x`.
    pub fn apply_plain(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.outer_iterator().map(|row| row.iter().map(|(j, &v)| v * x[j]).sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.matrix.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                m[(i, j)] = v;
            }
        }
        m
    }
}

const MAX_OFFSETS: usize = 27;

fn offset_index(offset: &[i32]) -> usize {
    offset.iter().rev().fold(0, |acc, &o| acc * 3 + (o + 1) as usize)
}

fn offset_of(index: usize, d: usize) -> [i32; 3] {
    let mut out = [0; 3];
    let mut rem = index;
    for o in out.iter_mut().take(d) {
        *o = (rem % 3) as i32 - 1;
        rem /= 3;
    }
    out
}

struct Row {
    entries: Vec<(usize, f64)>,
    surplus: f64,
    bad: bool,
}

/// Assemble `L_h` for the given drift, diffusion and noise level.
pub fn discretize(drift: &Drift, diffusion: &DiffusionSpec, epsilon: f64, grid: &OperatorGrid) -> Result<SparseOperator> {
    let d = grid.dim();
    if drift.dim() != d || diffusion.dim() != d {
        return Err(Error::Dimension(format!(
            "grid dimension {d}, drift dimension {}, diffusion dimension {}",
            drift.dim(),
            diffusion.dim()
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    if let Drift::Controlled { policy, .. } = drift {
        if policy.len() != grid.len() {
            return Err(Error::Input(format!(
                "policy covers {} nodes, grid has {} interior nodes",
                policy.len(),
                grid.len()
            )));
        }
    }
    let h = grid.spacing();
    let n_off = 3usize.pow(d as u32);
    let center = offset_index(&[0, 0, 0][..d]);

    let rows: Vec<Row> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let x = grid.coords(p);
            let a = diffusion.covariance_at(&x);
            let mut b = [0.0; 3];
            drift.at_node(p, &x, &mut b[..d]);
            let mut coef = [0.0; MAX_OFFSETS];
            let mut unit = [0i32; 3];
            for j in 0..d {
                unit[j] = 1;
                let plus = offset_index(&unit[..d]);
                unit[j] = -1;
                let minus = offset_index(&unit[..d]);
                unit[j] = 0;
                let diff = 0.5 * epsilon * a[(j, j)] / (h[j] * h[j]);
                coef[plus] += diff;
                coef[minus] += diff;
                if b[j] > 0.0 {
                    coef[plus] += b[j] / h[j];
                } else {
                    coef[minus] -= b[j] / h[j];
                }
            }
            for j in 0..d {
                for k in (j + 1)..d {
                    let c = 0.5 * epsilon * (a[(j, k)] + a[(k, j)]);
                    if c == 0.0 {
                        continue;
                    }
                    let f = c.abs() / (2.0 * h[j] * h[k]);
                    let mut off = [0i32; 3];
                    // Diagonal neighbors along the correlation direction gain weight.
                    let s = if c > 0.0 { 1 } else { -1 };
                    off[j] = 1;
                    off[k] = s;
                    coef[offset_index(&off[..d])] += f;
                    off[j] = -1;
                    off[k] = -s;
                    coef[offset_index(&off[..d])] += f;
                    for axis in [j, k] {
                        for sign in [1, -1] {
                            let mut o = [0i32; 3];
                            o[axis] = sign;
                            coef[offset_index(&o[..d])] -= f;
                        }
                    }
                }
            }
            let scale = coef.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let mut bad = false;
            let mut entries = Vec::with_capacity(2 * d + 1);
            let mut diag = 0.0;
            let mut surplus = 0.0;
            for (o, &c) in coef.iter().enumerate().take(n_off) {
                if o == center || c == 0.0 {
                    continue;
                }
                if c < -1e-12 * scale {
                    bad = true;
                }
                let c = c.max(0.0);
                diag += c;
                match grid.neighbor(p, &offset_of(o, d)[..d]) {
                    Some(q) => entries.push((q, -c)),
                    None => surplus += c,
                }
            }
            entries.push((p, diag));
            entries.sort_by_key(|&(q, _)| q);
            Row { entries, surplus, bad }
        })
        .collect();

    let bad_nodes: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.bad)
        .take(32)
        .map(|(p, _)| grid.coords(p))
        .collect();
    if !bad_nodes.is_empty() {
        return Err(Error::MMatrix { nodes: bad_nodes });
    }

    let n = grid.len();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    let mut surplus = Vec::with_capacity(n);
    indptr.push(0);
    for row in rows {
        for (q, v) in row.entries {
            indices.push(q);
            data.push(v);
        }
        indptr.push(indices.len());
        surplus.push(row.surplus);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator has non-finite entries".into()));
    }
    Ok(SparseOperator { matrix: CsMat::new((n, n), indptr, indices, data), surplus })
}

/// Banded LU without pivoting for M-matrices; each pivot is rebuilt from the
/// row surplus minus the (nonpositive) off-diagonals of its Schur row.
struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    band: Vec<f64>,
}

impl BandedLu {
    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * self.width() + (j + self.kl - i)]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let w = self.width();
        &mut self.band[i * w + (j + self.kl - i)]
    }

    fn factor(op: &SparseOperator) -> Result<Self> {
        let n = op.len();
        let bw = op.bandwidth();
        let mut lu = BandedLu { n, kl: bw, ku: bw, band: vec![0.0; n * (2 * bw + 1)] };
        for (i, row) in op.matrix.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                *lu.at_mut(i, j) = v;
            }
        }
        let mut s = op.surplus.clone();
        for k in 0..n {
            let jmax = (k + lu.ku).min(n - 1);
            let mut pivot = s[k];
            for j in (k + 1)..=jmax {
                pivot -= lu.at(k, j);
            }
            if !(pivot > 0.0 && pivot.is_finite()) {
                return Err(Error::Perron { min: pivot });
            }
            *lu.at_mut(k, k) = pivot;
            for i in (k + 1)..=(k + lu.kl).min(n - 1) {
                let aik = lu.at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let l = aik / pivot;
                *lu.at_mut(i, k) = l;
                for j in (k + 1)..=jmax {
                    let akj = lu.at(k, j);
                    if akj != 0.0 {
                        *lu.at_mut(i, j) -= l * akj;
                    }
                }
                s[i] -= l * s[k];
            }
        }
        Ok(lu)
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for j in i.saturating_sub(self.kl)..i {
                acc -= self.at(i, j) * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..=(i + self.ku).min(n - 1) {
                acc -= self.at(i, j) * y[j];
            }
            y[i] = acc / self.at(i, i);
        }
        y
    }
}

/// Principal eigenvalue (positive decay rate) and max-normalized positive eigenvector.
#[derive(Debug, Clone, Serialize)]
pub struct EigenPair {
    pub lambda: f64,
    #[serde(skip)]
    pub psi: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn residual_floor(op: &SparseOperator, psi: &[f64]) -> f64 {
    // Rounding floor of evaluating L ψ with ψ stored in double precision: a few
    // ulps of |L| |ψ|, which dominates 1e-8 λ once λ is exponentially small.
    let worst = op
        .matrix
        .outer_iterator()
        .map(|row| row.iter().map(|(j, v)| v.abs() * psi[j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    16.0 * f64::EPSILON * worst
}

fn residual_norm(op: &SparseOperator, psi: &[f64], lambda: f64) -> f64 {
    op.apply(psi).iter().zip(psi).map(|(l, p)| (l - lambda * p).abs()).fold(0.0, f64::max)
}

/// Accepted residual for an eigenpair: `1e-8·λ`, or the floating-point floor of
/// the product when that is larger.
pub fn residual_tolerance(op: &SparseOperator, psi: &[f64], lambda: f64) -> f64 {
    (1e-8 * lambda).max(residual_floor(op, psi))
}

/// Inverse iteration from the all-ones vector.
pub fn principal_eigenpair(op: &SparseOperator, tol: f64, max_iter: usize) -> Result<EigenPair> {
    principal_eigenpair_from(op, &vec![1.0; op.len()], tol, max_iter)
}

/// Inverse iteration from a caller-supplied start vector.
pub fn principal_eigenpair_from(op: &SparseOperator, start: &[f64], tol: f64, max_iter: usize) -> Result<EigenPair> {
    if start.len() != op.len() {
        return Err(Error::Dimension(format!("start vector has {} entries, operator {}", start.len(), op.len())));
    }
    let lu = BandedLu::factor(op)?;
    let vmax = start.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(vmax > 0.0) {
        return Err(Error::Input("start vector is zero".into()));
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / vmax).collect();
    let mut mu_prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let w = lu.solve(&v);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let vw: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let mu = vv / vw;
        let (wmax, wmin) = w.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), &x| (a.max(x), b.min(x)));
        // Normalize by the dominant-magnitude entry so a sign-flipped iterate becomes positive.
        let scale = if wmax.abs() >= wmin.abs() { wmax } else { wmin };
        if !(mu.is_finite() && scale.is_finite() && scale != 0.0) {
            return Err(Error::NonFinite(format!("inverse iteration diverged at iteration {it}")));
        }
        let psi: Vec<f64> = w.iter().map(|x| x / scale).collect();
        if (mu - mu_prev).abs() <= tol * mu.abs() {
            residual = residual_norm(op, &psi, mu);
            if residual <= residual_tolerance(op, &psi, mu) {
                let min = psi.iter().copied().fold(f64::INFINITY, f64::min);
                if min < -1e-10 {
                    return Err(Error::Perron { min });
                }
                if !(mu > 0.0) {
                    return Err(Error::Perron { min: mu });
                }
                return Ok(EigenPair { lambda: mu, psi, residual, iterations: it });
            }
        }
        mu_prev = mu;
        v = psi;
    }
    Err(Error::NotConverged { iterations: max_iter, residual })
}

/// Residual recomputed through the operator, independent of the factorization.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualReport {
    pub residual: f64,
    pub relative: f64,
    pub tolerance: f64,
    pub ok: bool,
}

pub fn verify_residual(op: &SparseOperator, pair: &EigenPair) -> ResidualReport {
    let residual = residual_norm(op, &pair.psi, pair.lambda);
    let tolerance = residual_tolerance(op, &pair.psi, pair.lambda);
    ResidualReport { residual, relative: residual / pair.lambda, tolerance, ok: residual <= tolerance }
}

/// Default tolerances used throughout the crate.
pub const EIGEN_TOL: f64 = 1e-12;
pub const EIGEN_MAX_ITER: usize = 2000;

/// Principal eigenpair of the closed loop `ẋ = M x`.
pub fn linear_eigenpair(
    m: &DMatrix<f64>,
    diffusion: &DiffusionSpec,
    epsilon: f64,
    grid: &OperatorGrid,
) -> Result<EigenPair> {
    let op = discretize(&Drift::Linear(m.clone()), diffusion, epsilon, grid)?;
    principal_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modulation;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn interval() -> Domain {
        Domain::new_box(vec![-1.0], vec![1.0]).unwrap()
    }

    fn zero1() -> Drift {
        Drift::Linear(DMatrix::zeros(1, 1))
    }

    #[test]
    fn grid_counts() {
        let g = build_grid(&interval(), &[5]).unwrap();
        assert_eq!(g.len(), 3);
        let xs: Vec<f64> = (0..3).map(|p| g.coords(p)[0]).collect();
        assert_eq!(xs, vec![-0.5, 0.0, 0.5]);

        let sq = Domain::new_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(build_grid(&sq, &[8, 8]).unwrap().len(), 36);

        let ball = Domain::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let g = build_grid(&ball, &[21, 21]).unwrap();
        assert!(g.len() < 19 * 19);
        assert!((0..g.len()).all(|p| ball.contains(&g.coords(p))));
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(build_grid(&interval(), &[2]), Err(Error::Input(_))));
        assert!(matches!(build_grid(&interval(), &[4]), Err(Error::DegenerateDomain(_))));
        let cube4 = Domain::new_box(vec![0.0; 4], vec![1.0; 4]).unwrap();
        assert!(build_grid(&cube4, &[5; 4]).is_err());
    }

    #[test]
    fn pure_diffusion_is_laplacian() {
        let g = build_grid(&interval(), &[11]).unwrap();
        let op = discretize(&zero1(), &DiffusionSpec::identity(1), 2.0, &g).unwrap();
        let h2 = 0.2 * 0.2;
        let dense = op.to_dense();
        for i in 0..g.len() {
            for j in 0..g.len() {
                let expected = match i.abs_diff(j) {
                    0 => 2.0 / h2,
                    1 => -1.0 / h2,
                    _ => 0.0,
                };
                assert_relative_eq!(dense[(i, j)], expected, epsilon = 1e-9);
            }
        }
        assert_relative_eq!(op.surplus()[0], 1.0 / h2, epsilon = 1e-9);
        assert_eq!(op.surplus()[4], 0.0);
    }

    #[test]
    fn drift_rows_differentiate_linear_functions() {
        // b(x) = 2x; L applied to f(x) = x equals -b(x) on rows away from the boundary.
        let g = build_grid(&interval(), &[21]).unwrap();
        let op = discretize(&Drift::Linear(DMatrix::from_element(1, 1, 2.0)), &DiffusionSpec::identity(1), 0.5, &g)
            .unwrap();
        let f: Vec<f64> = (0..g.len()).map(|p| g.coords(p)[0]).collect();
        let lf = op.apply_plain(&f);
        for p in 1..g.len() - 1 {
            assert_relative_eq!(lf[p], -2.0 * f[p], epsilon = 1e-9);
        }
    }

    #[test]
    fn interior_rows_conserve() {
        let sq = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&sq, &[9, 9]).unwrap();
        let diff = DiffusionSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]), Modulation::Constant).unwrap();
        let op = discretize(&Drift::Linear(DMatrix::zeros(2, 2)), &diff, 0.7, &g).unwrap();
        let ones = vec![1.0; g.len()];
        let sums = op.apply_plain(&ones);
        for p in 0..g.len() {
            let x = g.coords(p);
            if x.iter().all(|v| v.abs() < 0.7) {
                assert!(sums[p].abs() < 1e-12 * op.get(p, p), "row {p} sums to {}", sums[p]);
            }
        }
    }

    #[test]
    fn m_matrix_structure() {
        let ball = Domain::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let g = build_grid(&ball, &[25, 25]).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -0.5, 0.3]);
        let diff = DiffusionSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -0.4, 0.9]), Modulation::Saturating { beta: 0.5 })
            .unwrap();
        let op = discretize(&Drift::Linear(m), &diff, 0.3, &g).unwrap();
        let mut boundary_rows = 0;
        for (i, row) in op.matrix().outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                if i == j {
                    assert!(v > 0.0);
                } else {
                    assert!(v <= 0.0);
                }
            }
            assert!(op.surplus()[i] >= 0.0);
            let sum: f64 = row.iter().map(|(_, v)| v).sum();
            assert!((sum - op.surplus()[i]).abs() <= 1e-9 * op.get(i, i));
            if op.surplus()[i] > 0.0 {
                boundary_rows += 1;
            }
        }
        assert!(boundary_rows > 0);
    }

    #[test]
    fn strong_correlation_on_coarse_grid_is_diagnosed() {
        let sq = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&sq, &[9, 5]).unwrap();
        let diff = DiffusionSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.95, 0.3]), Modulation::Constant).unwrap();
        let err = discretize(&Drift::Linear(DMatrix::zeros(2, 2)), &diff, 1.0, &g).unwrap_err();
        match err {
            Error::MMatrix { nodes } => assert!(!nodes.is_empty()),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn laplacian_eigenvalue_and_mode() {
        let g = build_grid(&interval(), &[202]).unwrap();
        let op = discretize(&zero1(), &DiffusionSpec::identity(1), 2.0, &g).unwrap();
        let pair = principal_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert!((pair.lambda - PI * PI / 4.0).abs() / (PI * PI / 4.0) < 0.01);
        for p in 0..g.len() {
            let x = g.coords(p)[0];
            assert!((pair.psi[p] - (PI * x / 2.0).cos()).abs() < 1e-3);
            assert!(pair.psi[p] > 0.0);
        }
        assert!(pair.residual <= 1e-8 * pair.lambda);
        let rep = verify_residual(&op, &pair);
        assert!(rep.ok && rep.residual <= 1e-8 * pair.lambda);
    }

    #[test]
    fn smaller_domain_has_larger_eigenvalue() {
        let wide = build_grid(&interval(), &[201]).unwrap();
        let narrow = build_grid(&Domain::new_box(vec![-0.5], vec![0.5]).unwrap(), &[101]).unwrap();
        let diff = DiffusionSpec::identity(1);
        let lw = linear_eigenpair(&DMatrix::zeros(1, 1), &diff, 2.0, &wide).unwrap();
        let ln = linear_eigenpair(&DMatrix::zeros(1, 1), &diff, 2.0, &narrow).unwrap();
        assert!(lw.lambda < ln.lambda);
        // λ ∝ 1/length²
        assert_relative_eq!(ln.lambda / lw.lambda, 4.0, max_relative = 1e-3);
    }

    #[test]
    fn epsilon_scaling_without_drift() {
        let g = build_grid(&interval(), &[60]).unwrap();
        let diff = DiffusionSpec::identity(1);
        let a = linear_eigenpair(&DMatrix::zeros(1, 1), &diff, 0.4, &g).unwrap();
        let b = linear_eigenpair(&DMatrix::zeros(1, 1), &diff, 1.2, &g).unwrap();
        assert_relative_eq!(b.lambda, 3.0 * a.lambda, max_relative = 1e-9);
    }

    #[test]
    fn eigenvalue_is_simple() {
        let sq = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&sq, &[31, 31]).unwrap();
        let op = discretize(
            &Drift::Linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -0.5])),
            &DiffusionSpec::identity(2),
            0.6,
            &g,
        )
        .unwrap();
        let a = principal_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        let start: Vec<f64> = (0..g.len()).map(|p| if p % 2 == 0 { 1.0 } else { 1e-3 }).collect();
        let b = principal_eigenpair_from(&op, &start, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert_relative_eq!(a.lambda, b.lambda, max_relative = 1e-6);
        assert!(a.psi.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dense_cross_check() {
        // The smallest real eigenvalue of the dense matrix agrees with inverse iteration.
        let sq = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&sq, &[9, 9]).unwrap();
        let diff = DiffusionSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.8]), Modulation::Constant).unwrap();
        let op = discretize(&Drift::Linear(DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -1.0, 0.3])), &diff, 0.8, &g).unwrap();
        let pair = principal_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        let smallest = op
            .to_dense()
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() < 1e-9)
            .map(|z| z.re)
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(pair.lambda, smallest, max_relative = 1e-9);
    }

    #[test]
    fn first_order_grid_convergence() {
        // Nested grids: h, h/2, h/4.
        let diff = DiffusionSpec::identity(1);
        let m = DMatrix::from_element(1, 1, -1.0);
        let lam: Vec<f64> = [41, 81, 161]
            .iter()
            .map(|&n| linear_eigenpair(&m, &diff, 0.5, &build_grid(&interval(), &[n]).unwrap()).unwrap().lambda)
            .collect();
        let ratio = (lam[0] - lam[1]) / (lam[1] - lam[2]);
        assert!(ratio >= 1.7, "convergence ratio {ratio}");
    }

    #[test]
    fn tiny_eigenvalues_keep_their_accuracy() {
        // OU at small noise: λ is exponentially small yet residual-certified.
        let g = build_grid(&interval(), &[2002]).unwrap();
        let op = discretize(&Drift::Linear(DMatrix::from_element(1, 1, -1.0)), &DiffusionSpec::identity(1), 0.0625, &g)
            .unwrap();
        let pair = principal_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert!(pair.lambda > 0.0 && pair.lambda < 1e-5);
        assert!(verify_residual(&op, &pair).ok);
        let start: Vec<f64> = (0..g.len()).map(|p| 1.0 + 0.5 * (p as f64).sin()).collect();
        let again = principal_eigenpair_from(&op, &start, EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert_relative_eq!(pair.lambda, again.lambda, max_relative = 1e-9);
    }
}
