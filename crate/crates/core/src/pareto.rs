//! Attainable rate vectors over a finite candidate set, their partial order,
//! the non-dominated front and weighted-sum selection.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::eig::OperatorGrid;
use crate::error::{Error, Result};
use crate::flow::{default_horizon, estimate_invariant_set};
use crate::hjb::{solve_channels, HjbSolution, HjbSummary};
use crate::model::{closed_loop, ControlSpec, DiffusionSpec, Domain, FeedbackTuple, MultiChannelSystem};

/// Per-channel exit rates, all positive and finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RateVector(Vec<f64>);

impl RateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("rate vector is empty".into()));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::NonFinite(format!("rate {i} is {v}, expected positive and finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `a ≺ b`: no worse in every channel and strictly better in at least one.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cannot compare rate vectors of lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y))
}

/// Positive weights normalized to sum one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Dimension("weight vector is empty".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Input(format!("weight {i} is {w}, expected positive")));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn utility(&self, rates: &[f64]) -> f64 {
        self.0.iter().zip(rates).map(|(w, r)| w * r).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParetoRecord {
    /// Position of the candidate in the input list.
    pub id: usize,
    #[serde(skip)]
    pub candidate: FeedbackTuple,
    pub rates: RateVector,
    pub dominated: bool,
    pub provenance: Vec<HjbSummary>,
}

impl ParetoRecord {
    pub fn from_solutions(id: usize, candidate: FeedbackTuple, solutions: &[HjbSolution]) -> Result<Self> {
        Ok(Self {
            id,
            candidate,
            rates: RateVector::new(solutions.iter().map(HjbSolution::lambda).collect())?,
            dominated: false,
            provenance: solutions.iter().map(HjbSolution::summary).collect(),
        })
    }
}

/// Flag dominated records in place and return the non-dominated ones in input order.
pub fn pareto_front(records: &mut [ParetoRecord]) -> Result<Vec<ParetoRecord>> {
    let mut flags = vec![false; records.len()];
    for (i, flag) in flags.iter_mut().enumerate() {
        for (j, other) in records.iter().enumerate() {
            if i != j && dominates(other.rates.values(), records[i].rates.values())? {
                *flag = true;
                break;
            }
        }
    }
    for (r, f) in records.iter_mut().zip(flags) {
        r.dominated = f;
    }
    Ok(records.iter().filter(|r| !r.dominated).cloned().collect())
}

/// Index of the record minimizing `⟨ω, λ⟩`; the earliest wins ties.
pub fn scalarize(records: &[ParetoRecord], weights: &WeightVector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if r.rates.len() != weights.values().len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} rates",
                weights.values().len(),
                r.rates.len()
            )));
        }
        let u = weights.utility(r.rates.values());
        if best.is_none_or(|(_, b)| u < b) {
            best = Some((i, u));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Input("no records to scalarize".into()))
}

/// Grid settings for the invariant-set screen applied to each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceScreen {
    pub resolution: Vec<usize>,
    pub horizon_cap: f64,
    pub dt: f64,
}

/// Everything except the candidates that a sweep needs.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub system: &'a MultiChannelSystem,
    pub controls: &'a ControlSpec,
    pub diffusion: &'a DiffusionSpec,
    pub epsilon: f64,
    pub domain: &'a Domain,
    pub grid: &'a Arc<OperatorGrid>,
    pub screen: InvarianceScreen,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Exclusion {
    pub id: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<ParetoRecord>,
    pub excluded: Vec<Exclusion>,
}

/// Rate vector for every candidate whose closed loop keeps a nonempty invariant set in D.
pub fn sweep(candidates: &[FeedbackTuple], setup: &SweepSetup<'_>) -> Result<SweepOutcome> {
    if candidates.is_empty() {
        return Err(Error::EmptyGamma("candidate list is empty".into()));
    }
    let results: Vec<Result<std::result::Result<ParetoRecord, Exclusion>>> = candidates
        .par_iter()
        .enumerate()
        .map(|(id, fb)| {
            let m = closed_loop(setup.system, fb)?;
            let horizon = default_horizon(&m, setup.screen.horizon_cap);
            let set = estimate_invariant_set(&m, setup.domain, &setup.screen.resolution, horizon, setup.screen.dt)?;
            if !set.nonempty {
                return Ok(Err(Exclusion {
                    id,
                    reason: format!("no grid node stays in the domain over horizon {horizon} and no equilibrium lies in it"),
                }));
            }
            let solutions = solve_channels(setup.system, fb, setup.controls, setup.diffusion, setup.epsilon, setup.grid)?;
            Ok(Ok(ParetoRecord::from_solutions(id, fb.clone(), &solutions)?))
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r.map_err(|e| Error::Run { run: id, source: Box::new(e) })? {
            Ok(rec) => records.push(rec),
            Err(ex) => {
                log::warn!("candidate {}: excluded, {}", ex.id, ex.reason);
                excluded.push(ex);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyGamma(format!(
            "all {} candidates failed the invariant-set check",
            candidates.len()
        )));
    }
    Ok(SweepOutcome { records, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::build_grid;
    use crate::model::ControlBox;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: usize, rates: &[f64]) -> ParetoRecord {
        ParetoRecord {
            id,
            candidate: FeedbackTuple::new(vec![]),
            rates: RateVector::new(rates.to_vec()).unwrap(),
            dominated: false,
            provenance: vec![],
        }
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&[1.0, 2.0], &[2.0, 2.0]).unwrap());
        assert!(!dominates(&[1.0, 2.0], &[2.0, 1.0]).unwrap());
        assert!(!dominates(&[2.0, 1.0], &[1.0, 2.0]).unwrap());
        assert!(!dominates(&[1.0, 2.0], &[1.0, 2.0]).unwrap());
        assert!(matches!(dominates(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn front_examples() {
        let mut recs = vec![record(0, &[1.0, 2.0]), record(1, &[2.0, 1.0]), record(2, &[2.0, 2.0])];
        let front = pareto_front(&mut recs).unwrap();
        assert_eq!(front.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1]);
        assert!(recs[2].dominated);
        let mut one = vec![record(0, &[3.0, 4.0])];
        assert_eq!(pareto_front(&mut one).unwrap().len(), 1);
    }

    fn random_records(seed: u64, count: usize, dim: usize) -> Vec<ParetoRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| record(i, &(0..dim).map(|_| rng.gen_range(1e-6..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn front_matches_brute_force() {
        let mut recs = random_records(7, 200, 3);
        let front: Vec<usize> = pareto_front(&mut recs).unwrap().iter().map(|r| r.id).collect();
        let oracle: Vec<usize> = (0..recs.len())
            .filter(|&i| {
                !(0..recs.len()).any(|j| {
                    let a = recs[j].rates.values();
                    let b = recs[i].rates.values();
                    a.iter().zip(b).all(|(x, y)| x <= y) && a != b
                })
            })
            .collect();
        assert_eq!(front, oracle);
    }

    #[test]
    fn scalarization_examples() {
        let recs = vec![record(0, &[1.0, 2.0]), record(1, &[2.0, 1.0])];
        assert_eq!(scalarize(&recs, &WeightVector::new(vec![0.99, 0.01]).unwrap()).unwrap(), 0);
        assert_eq!(scalarize(&recs, &WeightVector::new(vec![0.5, 0.5]).unwrap()).unwrap(), 0);
        assert_eq!(scalarize(&recs, &WeightVector::new(vec![1.0, 3.0]).unwrap()).unwrap(), 1);
        assert_eq!(WeightVector::new(vec![1.0, 3.0]).unwrap().values(), &[0.25, 0.75]);
        assert!(WeightVector::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn scalarized_choice_is_on_the_front() {
        let mut recs = random_records(11, 150, 3);
        let front: Vec<usize> = pareto_front(&mut recs).unwrap().iter().map(|r| r.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = WeightVector::new((0..3).map(|_| rng.gen_range(1e-3..1.0)).collect()).unwrap();
            let pick = scalarize(&recs, &w).unwrap();
            assert!(front.contains(&recs[pick].id));
        }
    }

    proptest! {
        #[test]
        fn order_laws(a in prop::collection::vec(0.0..1.0f64, 3), b in prop::collection::vec(0.0..1.0f64, 3), c in prop::collection::vec(0.0..1.0f64, 3)) {
            prop_assert!(!dominates(&a, &a).unwrap());
            prop_assert!(!(dominates(&a, &b).unwrap() && dominates(&b, &a).unwrap()));
            if dominates(&a, &b).unwrap() && dominates(&b, &c).unwrap() {
                prop_assert!(dominates(&a, &c).unwrap());
            }
        }

        #[test]
        fn dominance_lowers_every_utility(a in prop::collection::vec(0.01..1.0f64, 3), shift in prop::collection::vec(0.0..0.5f64, 3), k in 0usize..3, w in prop::collection::vec(0.01..1.0f64, 3)) {
            let mut b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            b[k] += 0.1;
            prop_assert!(dominates(&a, &b).unwrap());
            let w = WeightVector::new(w).unwrap();
            prop_assert!(w.utility(&a) < w.utility(&b));
        }
    }

    fn two_channel() -> (MultiChannelSystem, ControlSpec, Domain, Arc<OperatorGrid>) {
        let system = MultiChannelSystem::new(
            DMatrix::identity(2, 2) * 0.5,
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DMatrix::from_column_slice(2, 1, &[0.0, 1.0])],
        )
        .unwrap();
        let bx = ControlBox::symmetric(1, 0.5).unwrap();
        let controls = ControlSpec::new(&system, vec![bx.clone(), bx]).unwrap();
        let domain = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let grid = Arc::new(build_grid(&domain, &[21, 21]).unwrap());
        (system, controls, domain, grid)
    }

    fn gains(g1: [f64; 2], g2: [f64; 2]) -> FeedbackTuple {
        FeedbackTuple::new(vec![DMatrix::from_row_slice(1, 2, &g1), DMatrix::from_row_slice(1, 2, &g2)])
    }

    #[test]
    fn sweep_records_and_symmetry() {
        let (system, controls, domain, grid) = two_channel();
        let diffusion = DiffusionSpec::identity(2);
        let setup = SweepSetup {
            system: &system,
            controls: &controls,
            diffusion: &diffusion,
            epsilon: 0.5,
            domain: &domain,
            grid: &grid,
            screen: InvarianceScreen { resolution: vec![11, 11], horizon_cap: 50.0, dt: 0.01 },
        };
        let a = gains([-2.0, 0.0], [0.0, -1.0]);
        let swapped = gains([-1.0, 0.0], [0.0, -2.0]);
        let out = sweep(&[a.clone(), a, swapped], &setup).unwrap();
        assert_eq!(out.records.len(), 3);
        let r0 = out.records[0].rates.values();
        let r1 = out.records[1].rates.values();
        let r2 = out.records[2].rates.values();
        for k in 0..2 {
            assert!((r0[k] - r1[k]).abs() <= 1e-10 * r0[k]);
        }
        assert!((r0[0] - r2[1]).abs() <= 1e-8 * r0[0]);
        assert!((r0[1] - r2[0]).abs() <= 1e-8 * r0[1]);
        assert!(out.excluded.is_empty());
        assert!(matches!(sweep(&[], &setup), Err(Error::EmptyGamma(_))));
    }

    #[test]
    fn sweep_excludes_candidates_without_invariant_set() {
        // Unstable translation-free flows still have the origin; use a domain away from it.
        let system = MultiChannelSystem::new(DMatrix::identity(1, 1), vec![DMatrix::identity(1, 1)]).unwrap();
        let controls = ControlSpec::new(&system, vec![ControlBox::symmetric(1, 0.1).unwrap()]).unwrap();
        let domain = Domain::new_box(vec![0.5], vec![1.5]).unwrap();
        let grid = Arc::new(build_grid(&domain, &[21]).unwrap());
        let diffusion = DiffusionSpec::identity(1);
        let setup = SweepSetup {
            system: &system,
            controls: &controls,
            diffusion: &diffusion,
            epsilon: 0.5,
            domain: &domain,
            grid: &grid,
            screen: InvarianceScreen { resolution: vec![21], horizon_cap: 50.0, dt: 0.01 },
        };
        let err = sweep(&[FeedbackTuple::new(vec![DMatrix::from_element(1, 1, 0.0)])], &setup).unwrap_err();
        assert!(matches!(err, Error::EmptyGamma(_)));
    }
}
