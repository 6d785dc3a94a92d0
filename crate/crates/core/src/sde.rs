//! Euler–Maruyama exit-time sampling and tail-rate estimation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::model::{DiffusionSpec, Domain};

/// Static description of one exit experiment.
#[derive(Debug, Clone, Copy)]
pub struct ExitProblem<'a> {
    pub drift: &'a Drift,
    pub diffusion: &'a DiffusionSpec,
    /// Noise intensity; zero gives the deterministic flow.
    pub epsilon: f64,
    pub domain: &'a Domain,
    pub dt: f64,
    pub t_max: f64,
}

impl ExitProblem<'_> {
    fn validate(&self) -> Result<()> {
        let d = self.domain.dim();
        if self.drift.dim() != d || self.diffusion.dim() != d {
            return Err(Error::Dimension(format!(
                "domain dimension {d}, drift {}, diffusion {}",
                self.drift.dim(),
                self.diffusion.dim()
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Input(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Input(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max.is_finite() && self.t_max >= self.dt) {
            return Err(Error::Input(format!("t_max must be at least dt, got {}", self.t_max)));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.t_max / self.dt * (1.0 + 1e-12)).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitOutcome {
    Exited(f64),
    Censored,
}

impl ExitOutcome {
    pub fn time(&self) -> Option<f64> {
        match self {
            ExitOutcome::Exited(t) => Some(*t),
            ExitOutcome::Censored => None,
        }
    }
}

/// One path from `x0`; exit is checked at the end of each step.
pub fn simulate_exit(problem: &ExitProblem<'_>, x0: &[f64], seed: u64) -> Result<ExitOutcome> {
    problem.validate()?;
    let d = problem.domain.dim();
    if x0.len() != d {
        return Err(Error::Dimension(format!("x0 has {} entries, domain dimension {d}", x0.len())));
    }
    if !problem.domain.contains(x0) {
        return Err(Error::Precondition(format!("x0 = {x0:?} is not inside the domain")));
    }
    let base = problem.diffusion.base();
    let modulation = problem.diffusion.modulation();
    let noise_dim = base.ncols();
    let scale = (problem.epsilon * problem.dt).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut xi = vec![0.0; noise_dim];
    for k in 0..problem.steps() {
        problem.drift.at_point(&x, &mut b);
        let m = modulation.value(&x);
        if scale > 0.0 {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        for i in 0..d {
            let noise: f64 = if scale > 0.0 { (0..noise_dim).map(|j| base[(i, j)] * xi[j]).sum() } else { 0.0 };
            x[i] += b[i] * problem.dt + scale * m * noise;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k + 1, message: "state became non-finite".into() });
        }
        if !problem.domain.contains(&x) {
            return Ok(ExitOutcome::Exited(((k + 1) as f64 * problem.dt).min(problem.t_max)));
        }
    }
    Ok(ExitOutcome::Censored)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMeta {
    pub epsilon: f64,
    pub dt: f64,
    pub t_max: f64,
    pub base_seed: u64,
    pub samples: usize,
}

/// Exit times of N runs in run order; `None` marks a censored run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitSampleSet {
    outcomes: Vec<Option<f64>>,
    meta: SampleMeta,
}

impl ExitSampleSet {
    /// Wrap externally produced exit times (e.g. synthetic draws) with `censored` runs beyond `t_max`.
    pub fn from_exit_times(exit_times: Vec<f64>, censored: usize, t_max: f64) -> Result<Self> {
        if let Some(t) = exit_times.iter().find(|t| !(**t > 0.0 && **t <= t_max)) {
            return Err(Error::Input(format!("exit time {t} outside (0, {t_max}]")));
        }
        let samples = exit_times.len() + censored;
        if samples == 0 {
            return Err(Error::Input("sample set is empty".into()));
        }
        let outcomes = exit_times.into_iter().map(Some).chain(std::iter::repeat_n(None, censored)).collect();
        Ok(Self { outcomes, meta: SampleMeta { epsilon: f64::NAN, dt: f64::NAN, t_max, base_seed: 0, samples } })
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.outcomes
    }

    pub fn meta(&self) -> &SampleMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn exit_times(&self) -> Vec<f64> {
        self.outcomes.iter().flatten().copied().collect()
    }

    pub fn censored_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_none()).count()
    }

    /// CSV with columns `run,exit_time,censored`; censored runs leave the time empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "run,exit_time,censored")?;
        for (i, o) in self.outcomes.iter().enumerate() {
            match o {
                Some(t) => writeln!(w, "{i},{t},0")?,
                None => writeln!(w, "{i},,1")?,
            }
        }
        Ok(())
    }
}

/// N independent runs seeded `base_seed + run`; output does not depend on thread count.
pub fn sample_exit_times(problem: &ExitProblem<'_>, x0: &[f64], samples: usize, base_seed: u64) -> Result<ExitSampleSet> {
    if samples == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    problem.validate()?;
    let results: Vec<Result<ExitOutcome>> = (0..samples)
        .into_par_iter()
        .map(|run| simulate_exit(problem, x0, base_seed.wrapping_add(run as u64)))
        .collect();
    let mut outcomes = Vec::with_capacity(samples);
    for (run, r) in results.into_iter().enumerate() {
        outcomes.push(r.map_err(|e| Error::Run { run, source: Box::new(e) })?.time());
    }
    Ok(ExitSampleSet {
        outcomes,
        meta: SampleMeta { epsilon: problem.epsilon, dt: problem.dt, t_max: problem.t_max, base_seed, samples },
    })
}

/// Empirical survival `Ŝ(t)` on an increasing grid.
pub fn survival_curve(samples: &ExitSampleSet, t_grid: &[f64]) -> Result<Vec<f64>> {
    if t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Input("time grid must be strictly increasing".into()));
    }
    let mut times = samples.exit_times();
    times.sort_by(f64::total_cmp);
    let censored = samples.censored_count() as f64;
    let n = samples.len() as f64;
    Ok(t_grid
        .iter()
        .map(|&t| {
            let exited_by = times.partition_point(|&s| s <= t);
            let alive = (times.len() - exited_by) as f64 + if t <= samples.meta.t_max { censored } else { 0.0 };
            alive / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub rate: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
}

pub const FIT_POINTS: usize = 64;
const MIN_DISTINCT: usize = 10;
const MIN_TAIL_COUNT: f64 = 5.0;

/// Quantile of the exit-time law with censored runs placed at +∞, clamped to `t_max`.
fn quantile(samples: &ExitSampleSet, q: f64) -> f64 {
    let mut times = samples.exit_times();
    times.sort_by(f64::total_cmp);
    let k = ((q * samples.len() as f64).ceil() as usize).max(1) - 1;
    times.get(k).copied().unwrap_or(samples.meta.t_max)
}

/// Default tail window: median exit time to the 0.9 quantile.
pub fn default_window(samples: &ExitSampleSet) -> (f64, f64) {
    (quantile(samples, 0.5), quantile(samples, 0.9))
}

/// Negated least-squares slope of `log Ŝ` over the window.
pub fn estimate_exit_rate(samples: &ExitSampleSet, window: Option<(f64, f64)>) -> Result<RateEstimate> {
    let (t_lo, t_hi) = window.unwrap_or_else(|| default_window(samples));
    let t_max = samples.meta.t_max;
    if !(t_lo >= 0.0 && t_lo < t_hi && t_hi <= t_max) {
        return Err(Error::Input(format!("window ({t_lo}, {t_hi}) must satisfy 0 <= t_lo < t_hi <= {t_max}")));
    }
    let n = samples.len() as f64;
    let grid: Vec<f64> =
        (0..FIT_POINTS).map(|k| t_lo + (t_hi - t_lo) * k as f64 / (FIT_POINTS - 1) as f64).collect();
    let surv = survival_curve(samples, &grid)?;
    let tail = surv[FIT_POINTS - 1];
    if tail * n < MIN_TAIL_COUNT - 1e-9 {
        return Err(Error::TailStarved(format!(
            "only {:.0} of {} runs survive past t = {t_hi}",
            tail * n,
            samples.len()
        )));
    }
    let mut distinct = surv.clone();
    distinct.dedup();
    if distinct.len() < MIN_DISTINCT {
        return Err(Error::TailStarved(format!(
            "{} distinct survival values in ({t_lo}, {t_hi}), need {MIN_DISTINCT}",
            distinct.len()
        )));
    }
    let ys: Vec<f64> = surv.iter().map(|s| s.ln()).collect();
    let fit = least_squares(&grid, &ys);
    let rate = -fit.slope;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::TailStarved(format!("survival does not decay over ({t_lo}, {t_hi})")));
    }
    Ok(RateEstimate { rate, stderr: fit.slope_stderr, window: (t_lo, t_hi), r_squared: fit.r_squared })
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub r_squared: f64,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let sigma2 = if xs.len() > 2 { ssr / (n - 2.0) } else { 0.0 };
    let r_squared = if syy > 0.0 { (1.0 - ssr / syy).clamp(0.0, 1.0) } else { 1.0 };
    LineFit {
        intercept,
        slope,
        slope_stderr: (sigma2 / sxx).sqrt(),
        intercept_stderr: (sigma2 * (1.0 / n + mx * mx / sxx)).sqrt(),
        r_squared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand_distr::Exp;

    fn interval() -> Domain {
        Domain::new_box(vec![-1.0], vec![1.0]).unwrap()
    }

    fn scalar(v: f64) -> Drift {
        Drift::Linear(DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn noiseless_stable_run_is_censored() {
        let drift = scalar(-1.0);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 0.0, domain: &dom, dt: 0.01, t_max: 5.0 };
        assert_eq!(simulate_exit(&p, &[0.5], 1).unwrap(), ExitOutcome::Censored);
    }

    #[test]
    fn noiseless_unstable_exit_time() {
        let drift = scalar(1.0);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let dt = 1e-3;
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 0.0, domain: &dom, dt, t_max: 5.0 };
        let t = simulate_exit(&p, &[0.5], 1).unwrap().time().unwrap();
        assert!((t - 2f64.ln()).abs() <= 2.0 * dt);
    }

    #[test]
    fn seeds_are_reproducible() {
        let drift = scalar(-0.5);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 0.8, domain: &dom, dt: 1e-3, t_max: 50.0 };
        let a = simulate_exit(&p, &[0.1], 42).unwrap();
        let b = simulate_exit(&p, &[0.1], 42).unwrap();
        assert_eq!(a.time().unwrap().to_bits(), b.time().unwrap().to_bits());
        let s1 = sample_exit_times(&p, &[0.0], 200, 9).unwrap();
        let s2 = sample_exit_times(&p, &[0.0], 200, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.outcomes()[3].map(f64::to_bits), simulate_exit(&p, &[0.0], 12).unwrap().time().map(f64::to_bits));
        assert_eq!(sample_exit_times(&p, &[0.0], 1, 9).unwrap().len(), 1);
    }

    #[test]
    fn start_outside_domain_is_rejected() {
        let drift = scalar(0.0);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 1.0, domain: &dom, dt: 0.01, t_max: 1.0 };
        assert!(matches!(simulate_exit(&p, &[1.0], 0), Err(Error::Precondition(_))));
        let err = sample_exit_times(&p, &[2.0], 4, 0).unwrap_err();
        assert!(matches!(err, Error::Run { run: 0, .. }));
    }

    #[test]
    fn blow_up_reports_step() {
        let drift = scalar(1e300);
        let diff = DiffusionSpec::identity(1);
        let dom = Domain::new_box(vec![-f64::MAX], vec![f64::MAX]).unwrap();
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 0.0, domain: &dom, dt: 1.0, t_max: 10.0 };
        assert!(matches!(simulate_exit(&p, &[1.0], 0), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn survival_counting() {
        let s = ExitSampleSet::from_exit_times(vec![1.0, 2.0, 3.0, 4.0], 0, 5.0).unwrap();
        assert_eq!(survival_curve(&s, &[1e-9, 0.999, 2.5, 4.0]).unwrap(), vec![1.0, 1.0, 0.5, 0.0]);
        let c = ExitSampleSet::from_exit_times(vec![1.0, 2.0], 2, 5.0).unwrap();
        assert_eq!(survival_curve(&c, &[3.0, 5.0, 6.0]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert!(survival_curve(&s, &[2.0, 1.0]).is_err());
    }

    fn exponential(rate: f64, n: usize, seed: u64, shift: f64) -> ExitSampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let law = Exp::new(rate).unwrap();
        let times: Vec<f64> = (0..n).map(|_| law.sample(&mut rng) + shift).collect();
        let t_max = times.iter().copied().fold(0.0, f64::max);
        ExitSampleSet::from_exit_times(times, 0, t_max).unwrap()
    }

    #[test]
    fn exponential_rate_is_recovered() {
        let s = exponential(2.0, 100_000, 5, 0.0);
        let est = estimate_exit_rate(&s, None).unwrap();
        assert!((est.rate - 2.0).abs() < 0.05, "{est:?}");
        assert!(est.r_squared > 0.99);
        assert!(est.window.0 < est.window.1);
    }

    #[test]
    fn time_shift_leaves_slope_unchanged() {
        let a = exponential(1.5, 20_000, 8, 0.0);
        let b = exponential(1.5, 20_000, 8, 3.25);
        let ea = estimate_exit_rate(&a, Some((0.4, 1.6))).unwrap();
        let eb = estimate_exit_rate(&b, Some((3.65, 4.85))).unwrap();
        assert!((ea.rate - eb.rate).abs() <= 1e-9 * ea.rate, "{} vs {}", ea.rate, eb.rate);
    }

    #[test]
    fn thin_tails_are_refused() {
        let s = exponential(2.0, 100, 1, 0.0);
        let t_hi = s.exit_times().iter().copied().fold(0.0, f64::max) * 0.999;
        assert!(matches!(estimate_exit_rate(&s, Some((0.1, t_hi))), Err(Error::TailStarved(_))));
        let few = ExitSampleSet::from_exit_times((1..=30).map(|k| k as f64 / 10.0).collect(), 0, 3.0).unwrap();
        assert!(matches!(estimate_exit_rate(&few, Some((0.1, 0.5))), Err(Error::TailStarved(_))));
    }

    #[test]
    fn censored_fraction_matches_fitted_tail() {
        let drift = scalar(-1.0);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let t_max = 8.0;
        let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 0.5, domain: &dom, dt: 2e-3, t_max };
        let n = 10_000;
        let s = sample_exit_times(&p, &[0.0], n, 100).unwrap();
        let (lo, hi) = (1.0, 5.0);
        let est = estimate_exit_rate(&s, Some((lo, hi))).unwrap();
        let s_hi = survival_curve(&s, &[hi]).unwrap()[0];
        let predicted = s_hi * (-est.rate * (t_max - hi)).exp();
        let observed = s.censored_count() as f64 / n as f64;
        let sd = (predicted * (1.0 - predicted) / n as f64).sqrt();
        assert!((observed - predicted).abs() <= 3.0 * sd + 3.0 * est.stderr * (t_max - hi) * predicted, "{observed} vs {predicted}");
    }

    #[test]
    fn halving_dt_moves_rate_within_noise() {
        let drift = scalar(-1.0);
        let diff = DiffusionSpec::identity(1);
        let dom = interval();
        let rate = |dt: f64| {
            let p = ExitProblem { drift: &drift, diffusion: &diff, epsilon: 1.0, domain: &dom, dt, t_max: 20.0 };
            estimate_exit_rate(&sample_exit_times(&p, &[0.0], 8000, 77).unwrap(), None).unwrap()
        };
        let a = rate(4e-4);
        let b = rate(2e-4);
        assert!((a.rate - b.rate).abs() < 3.0 * (a.stderr + b.stderr), "{a:?} {b:?}");
    }

    #[test]
    fn least_squares_on_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 1.5 - 0.5 * x).collect();
        let f = least_squares(&xs, &ys);
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 1.5).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12 && f.r_squared == 1.0);
    }
}
