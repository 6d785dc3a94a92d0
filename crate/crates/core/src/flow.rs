//! Deterministic closed-loop flow `x(t) = exp(M t) x₀`: trajectories,
//! equilibria, grid estimates of the maximal invariant set in D̄, and
//! deterministic exit times.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Domain;

/// Sampled orbit of the linear flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} has non-finite entries")))
    }
}

/// `exp(M t)` by scaling and squaring with a Padé approximant.
pub fn propagator(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_finite(m, "flow matrix")?;
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("flow matrix is {}x{}", m.nrows(), m.ncols())));
    }
    let p = (m * t).exp();
    check_finite(&p, "matrix exponential")?;
    Ok(p)
}

/// Exact stepping `x_{k+1} = exp(M dt) x_k` on `[0, horizon]`; the last step is
/// shortened so the final time is exactly `horizon`.
pub fn integrate_flow(m: &DMatrix<f64>, x0: &DVector<f64>, horizon: f64, dt: f64) -> Result<Trajectory> {
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::Input(format!("need horizon > 0 and dt > 0, got {horizon}, {dt}")));
    }
    if x0.len() != m.nrows() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("initial state must be finite with matching dimension".into()));
    }
    let step = propagator(m, dt)?;
    let full = (horizon / dt * (1.0 + 1e-12)).floor() as usize;
    let mut times = Vec::with_capacity(full + 2);
    let mut states = Vec::with_capacity(full + 2);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0.clone();
    for k in 1..=full {
        x = &step * &x;
        times.push(k as f64 * dt);
        states.push(x.clone());
    }
    let last = *times.last().unwrap();
    let rest = horizon - last;
    if rest > 1e-12 * horizon {
        x = propagator(m, rest)? * x;
        times.push(horizon);
        states.push(x);
    } else if let Some(t) = times.last_mut() {
        *t = horizon;
    }
    Ok(Trajectory { times, states })
}

/// Intersection of the line `{s v}` with D̄ as an interval of `s`.
fn line_interval(domain: &Domain, v: &DVector<f64>) -> Option<(f64, f64)> {
    match domain {
        Domain::Box { lower, upper } => {
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..v.len() {
                if v[k].abs() < 1e-300 {
                    if lower[k] > 0.0 || upper[k] < 0.0 {
                        return None;
                    }
                } else {
                    let (a, b) = (lower[k] / v[k], upper[k] / v[k]);
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
            }
            (lo <= hi).then_some((lo, hi))
        }
        Domain::Ball { center, radius } => {
            // |s v - c|² = r²  ->  s²|v|² - 2 s v·c + |c|² - r² = 0
            let vv = v.dot(v);
            let vc = v.dot(center);
            let disc = vc * vc - vv * (center.dot(center) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            Some(((vc - sq) / vv, (vc + sq) / vv))
        }
    }
}

/// An equilibrium of `ẋ = M x` lying in D̄, if one exists along the origin or
/// a kernel basis direction.
pub fn equilibrium_in_domain(m: &DMatrix<f64>, domain: &Domain) -> Option<DVector<f64>> {
    let d = m.nrows();
    let origin = DVector::zeros(d);
    if domain.contains_closed(origin.as_slice(), 0.0) {
        return Some(origin);
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref()?;
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let tol = 1e-10 * smax.max(1.0);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            continue;
        }
        let dir: DVector<f64> = v_t.row(k).transpose();
        if let Some((lo, hi)) = line_interval(domain, &dir) {
            let mut x = dir * (0.5 * (lo + hi));
            domain.project(x.as_mut_slice());
            if (m * &x).amax() <= 1e-10 {
                return Some(x);
            }
        }
    }
    None
}

/// One classified grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedNode {
    pub x: DVector<f64>,
    pub invariant: bool,
}

/// Grid under-approximation of the maximal invariant set `Λ(D)`.
#[derive(Debug, Clone)]
pub struct InvariantSetEstimate {
    pub nodes: Vec<ClassifiedNode>,
    pub nonempty: bool,
    pub horizon: f64,
    pub equilibrium: Option<DVector<f64>>,
    /// Inflation tolerance applied to D̄ (the grid spacing).
    pub tolerance: f64,
}

impl InvariantSetEstimate {
    pub fn invariant_nodes(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.nodes.iter().filter(|n| n.invariant).map(|n| &n.x)
    }

    pub fn invariant_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.invariant).count()
    }

    /// CSV with columns `x1..xd,invariant`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.nodes.first().map_or(0, |n| n.x.len());
        let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).chain(["invariant".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for n in &self.nodes {
            for v in n.x.iter() {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", u8::from(n.invariant))?;
        }
        Ok(())
    }
}

/// Recommended horizon `10 / max(1e-6, |Re λ_max(M)|)`, capped at `cap`.
pub fn default_horizon(m: &DMatrix<f64>, cap: f64) -> f64 {
    let re_max = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    (10.0 / re_max.abs().max(1e-6)).min(cap)
}

fn grid_points(domain: &Domain, resolution: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let (lo, hi) = domain.bounding_box();
    let axes: Vec<Vec<f64>> = (0..lo.len())
        .map(|k| {
            let n = resolution[k];
            (0..n).map(|i| lo[k] + (hi[k] - lo[k]) * i as f64 / (n - 1) as f64).collect()
        })
        .collect();
    let h = (0..lo.len()).map(|k| (hi[k] - lo[k]) / (resolution[k] - 1) as f64).fold(0.0, f64::max);
    let total: usize = resolution.iter().product();
    let mut pts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0; axes.len()];
        for k in (0..axes.len()).rev() {
            x[k] = axes[k][rem % resolution[k]];
            rem /= resolution[k];
        }
        pts.push(x);
    }
    (pts, h)
}

/// Classify grid nodes of D̄ whose sampled forward orbit up to `horizon`
/// stays within D̄ inflated by the grid spacing.
pub fn estimate_invariant_set(
    m: &DMatrix<f64>,
    domain: &Domain,
    resolution: &[usize],
    horizon: f64,
    dt: f64,
) -> Result<InvariantSetEstimate> {
    let d = domain.dim();
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Dimension(format!("flow matrix is {}x{}, domain has dimension {d}", m.nrows(), m.ncols())));
    }
    if d > 3 {
        return Err(Error::Input(format!("grid estimates support d <= 3, got {d}")));
    }
    if resolution.len() != d || resolution.iter().any(|&n| n < 2) {
        return Err(Error::Input(format!("resolution needs {d} entries of at least 2, got {resolution:?}")));
    }
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::Input(format!("need horizon > 0 and dt > 0, got {horizon}, {dt}")));
    }
    let step = propagator(m, dt)?;
    let steps = (horizon / dt).ceil() as usize;
    let (pts, h) = grid_points(domain, resolution);
    let nodes: Vec<ClassifiedNode> = pts
        .into_par_iter()
        .filter(|x| domain.contains_closed(x, 0.0))
        .map(|x| {
            let mut state = DVector::from_vec(x);
            let start = state.clone();
            let mut stays = true;
            for _ in 0..steps {
                state = &step * &state;
                if !domain.contains_closed(state.as_slice(), h) {
                    stays = false;
                    break;
                }
            }
            ClassifiedNode { x: start, invariant: stays }
        })
        .collect();
    let equilibrium = equilibrium_in_domain(m, domain);
    let nonempty = nodes.iter().any(|n| n.invariant) || equilibrium.is_some();
    Ok(InvariantSetEstimate { nodes, nonempty, horizon, equilibrium, tolerance: h })
}

/// Outcome of [`exit_time_deterministic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeterministicExit {
    Exited(f64),
    Capped,
}

impl DeterministicExit {
    pub fn time(&self) -> Option<f64> {
        match self {
            DeterministicExit::Exited(t) => Some(*t),
            DeterministicExit::Capped => None,
        }
    }
}

/// First time the orbit from `x0 ∈ D̄` leaves D̄, refined by bisection to `dt·1e-3`.
pub fn exit_time_deterministic(
    m: &DMatrix<f64>,
    x0: &DVector<f64>,
    domain: &Domain,
    dt: f64,
    t_cap: f64,
) -> Result<DeterministicExit> {
    if !(dt > 0.0 && t_cap > 0.0) {
        return Err(Error::Input(format!("need dt > 0 and t_cap > 0, got {dt}, {t_cap}")));
    }
    if !domain.contains_closed(x0.as_slice(), 1e-12) {
        return Err(Error::Precondition("initial state is outside the closed domain".into()));
    }
    let step = propagator(m, dt)?;
    let mut x = x0.clone();
    let mut t = 0.0;
    while t < t_cap {
        let next = &step * &x;
        if domain.signed_distance(next.as_slice()) > 0.0 {
            // sd(lo) <= 0 < sd(hi) on [t, t + dt]
            let (mut lo, mut hi) = (0.0, dt);
            let tol = dt * 1e-3;
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                let xm = propagator(m, mid)? * &x;
                if domain.signed_distance(xm.as_slice()) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(DeterministicExit::Exited(t + 0.5 * (lo + hi)));
        }
        x = next;
        t += dt;
    }
    Ok(DeterministicExit::Capped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn mat(rows: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, v.len() / rows, v)
    }

    #[test]
    fn scalar_decay() {
        let tr = integrate_flow(&mat(1, &[-1.0]), &DVector::from_vec(vec![1.0]), 1.0, 0.01).unwrap();
        assert_abs_diff_eq!(tr.final_state()[0], (-1.0_f64).exp(), epsilon = 1e-10);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_matrix_is_constant() {
        let x0 = DVector::from_vec(vec![0.3, -0.7]);
        let tr = integrate_flow(&DMatrix::zeros(2, 2), &x0, 2.0, 0.3).unwrap();
        assert!(tr.states.iter().all(|s| s == &x0));
    }

    #[test]
    fn rotation_matches_closed_form() {
        // exp(M t) [1, 0] = [cos t, -sin t] for M = [[0, 1], [-1, 0]].
        let m = mat(2, &[0.0, 1.0, -1.0, 0.0]);
        let tr = integrate_flow(&m, &DVector::from_vec(vec![1.0, 0.0]), FRAC_PI_2, 0.01).unwrap();
        let x = tr.final_state();
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(x[1], -1.0, epsilon = 1e-10);
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert_abs_diff_eq!(s[0], t.cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(s[1], -t.sin(), epsilon = 1e-10);
        }
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let r = integrate_flow(&mat(1, &[f64::NAN]), &DVector::from_vec(vec![1.0]), 1.0, 0.1);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn equilibria() {
        let unit = Domain::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let far = Domain::new_ball(vec![5.0, 0.0], 1.0).unwrap();
        let neg = -DMatrix::<f64>::identity(2, 2);
        assert_eq!(equilibrium_in_domain(&neg, &unit), Some(DVector::zeros(2)));
        assert_eq!(equilibrium_in_domain(&neg, &far), None);

        let sq = Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let singular = mat(2, &[0.0, 0.0, 0.0, -1.0]);
        let eq = equilibrium_in_domain(&singular, &sq).unwrap();
        assert!(sq.contains_closed(eq.as_slice(), 0.0));
        assert!((&singular * &eq).amax() <= 1e-10);

        // Kernel line e1 crosses the shifted ball; the origin does not.
        let shifted = Domain::new_ball(vec![5.0, 0.0], 1.0).unwrap();
        let eq = equilibrium_in_domain(&singular, &shifted).unwrap();
        assert!(shifted.contains_closed(eq.as_slice(), 1e-12));
        assert!((&singular * &eq).amax() <= 1e-10);
        assert_abs_diff_eq!(eq[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn invariant_set_examples() {
        let unit = Domain::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);

        let stable = estimate_invariant_set(&(-&id), &unit, &[21, 21], 10.0, 0.05).unwrap();
        assert!(stable.nonempty);
        assert_eq!(stable.invariant_count(), stable.nodes.len());

        let unstable = estimate_invariant_set(&id, &unit, &[21, 21], default_horizon(&id, 1e3), 0.05).unwrap();
        assert!(unstable.nonempty);
        let inv: Vec<_> = unstable.invariant_nodes().collect();
        assert_eq!(inv.len(), 1);
        assert!(inv[0].amax() < 1e-12);

        let far = Domain::new_ball(vec![5.0, 0.0], 1.0).unwrap();
        let empty = estimate_invariant_set(&(-&id), &far, &[21, 21], 10.0, 0.05).unwrap();
        assert!(!empty.nonempty);
        // Every node really leaves: the deterministic exit time is finite.
        for n in &empty.nodes {
            let t = exit_time_deterministic(&(-&id), &n.x, &far, 0.01, 20.0).unwrap();
            assert!(t.time().is_some());
        }
    }

    #[test]
    fn coarse_resolution_rejected() {
        let unit = Domain::new_ball(vec![0.0], 1.0).unwrap();
        assert!(estimate_invariant_set(&mat(1, &[-1.0]), &unit, &[1], 1.0, 0.1).is_err());
    }

    #[test]
    fn nested_domains_give_nested_sets() {
        // Rotation with mild growth: outer rings leave, the same grid is used for both.
        let m = mat(2, &[0.05, 1.0, -1.0, 0.05]);
        let outer = Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let inner = Domain::new_ball(vec![0.0, 0.0], 2.0).unwrap();
        let a = estimate_invariant_set(&m, &outer, &[17, 17], 30.0, 0.05).unwrap();
        let b = estimate_invariant_set(&m, &inner, &[17, 17], 30.0, 0.05).unwrap();
        let big: Vec<_> = a.invariant_nodes().cloned().collect();
        for x in b.invariant_nodes() {
            assert!(big.contains(x), "{x:?} invariant for the ball but not the box");
        }
    }

    #[test]
    fn deterministic_exit_examples() {
        let d = Domain::new_box(vec![-1.0], vec![1.0]).unwrap();
        let x0 = DVector::from_vec(vec![0.5]);
        let t = exit_time_deterministic(&mat(1, &[1.0]), &x0, &d, 1e-3, 10.0).unwrap();
        assert_abs_diff_eq!(t.time().unwrap(), LN_2, epsilon = 1e-6);
        let t = exit_time_deterministic(&mat(1, &[-1.0]), &x0, &d, 1e-3, 10.0).unwrap();
        assert_eq!(t, DeterministicExit::Capped);
        let edge = DVector::from_vec(vec![1.0]);
        let t = exit_time_deterministic(&mat(1, &[1.0]), &edge, &d, 1e-2, 10.0).unwrap();
        assert!(t.time().unwrap() < 1e-2);
    }

    #[test]
    fn csv_export() {
        let d = Domain::new_box(vec![-1.0], vec![1.0]).unwrap();
        let est = estimate_invariant_set(&mat(1, &[-1.0]), &d, &[3], 1.0, 0.1).unwrap();
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x1,invariant\n-1,1\n0,1\n1,1\n");
    }

    proptest! {
        #[test]
        fn semigroup(
            entries in proptest::collection::vec(-1.0..1.0f64, 4),
            x in proptest::collection::vec(-1.0..1.0f64, 2),
            s in 0.1..2.0f64,
            t in 0.1..2.0f64,
        ) {
            let m = DMatrix::from_vec(2, 2, entries);
            let x0 = DVector::from_vec(x);
            let whole = integrate_flow(&m, &x0, s + t, 0.01).unwrap();
            let first = integrate_flow(&m, &x0, s, 0.01).unwrap();
            let second = integrate_flow(&m, first.final_state(), t, 0.01).unwrap();
            let (a, b) = (whole.final_state(), second.final_state());
            prop_assert!((a - b).amax() <= 1e-9 * (1.0 + a.amax()));
        }
    }
}
