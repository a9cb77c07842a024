use rayon::prelude::*;

use super::cost::expected_cost;
use super::rank::RankModel;
use super::selection::SelectionModel;
use crate::cache::{Pool, PoolPlan};
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;

/// Memory-ratio vectors on the `step` grid over `pools`, summing to one.
/// Each point is returned as grid units per pool in hierarchy order.
pub fn grid_points(pools: &[Pool], step: f64) -> Result<Vec<[u32; 4]>> {
    if pools.is_empty() {
        return Err(Error::invalid("at least one pool is required"));
    }
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::invalid(format!("grid step {step} must lie in (0, 1)")));
    }
    let units = (1.0 / step).round();
    if (units * step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("grid step {step} does not divide 1")));
    }
    let mut active: Vec<usize> = pools.iter().map(|p| p.index()).collect();
    active.sort_unstable();
    active.dedup();
    let mut out = Vec::new();
    let mut cur = [0u32; 4];
    compositions(&active, units as u32, &mut cur, &mut out);
    Ok(out)
}

fn compositions(active: &[usize], left: u32, cur: &mut [u32; 4], out: &mut Vec<[u32; 4]>) {
    match active {
        [] => {}
        [last] => {
            cur[*last] = left;
            out.push(*cur);
            cur[*last] = 0;
        }
        [first, rest @ ..] => {
            for x in 0..=left {
                cur[*first] = x;
                compositions(rest, left - x, cur, out);
            }
            cur[*first] = 0;
        }
    }
}

/// Expert capacities for a grid point: each pool gets its byte share, then
/// capacities are cut so that the pools together hold at most every expert.
pub fn capacities_for(
    units: [u32; 4],
    budget: u64,
    num_experts: usize,
    profile: &ExecutionProfile,
) -> Result<[usize; 4]> {
    let elements = profile.elements_per_tensor.ok_or_else(|| Error::invalid("profile lacks elements_per_tensor"))?;
    let total_units: u32 = units.iter().sum();
    let mut left = num_experts;
    let mut caps = [0usize; 4];
    for p in Pool::ALL {
        let bytes = p.expert_bytes(profile.n, elements, profile.rho);
        let share = units[p.index()] as f64 / total_units.max(1) as f64;
        let c = ((share * budget as f64) / bytes).floor() as usize;
        caps[p.index()] = c.min(left);
        left -= caps[p.index()];
    }
    Ok(caps)
}

/// Grid search over memory ratios for the layout with the least expected
/// estimated makespan. Ties go to the lexicographically largest ratios.
pub fn plan_pools(
    model: &RankModel,
    selection: &SelectionModel,
    pools: &[Pool],
    budget: u64,
    profile: &ExecutionProfile,
    step: f64,
) -> Result<PoolPlan> {
    profile.validate()?;
    let points = grid_points(pools, step)?;
    let n_experts = model.num_experts();
    let delta = PoolPlan::default_delta(n_experts);
    let elements = profile.elements_per_tensor.ok_or_else(|| Error::invalid("profile lacks elements_per_tensor"))?;
    let q = &selection.q;
    if q.len() != n_experts {
        return Err(Error::invalid("selection model and rank model disagree on expert count"));
    }

    let smallest = Pool::E.expert_bytes(profile.n, elements, profile.rho);
    if (budget as f64) < smallest {
        let mut plan = PoolPlan::new([0; 4], delta);
        plan.expected_cost = Some(expected_cost(q, model.k, [0; 4], profile)?);
        plan.warning = Some(format!("budget of {budget} bytes holds no expert (smallest needs {smallest})"));
        return Ok(plan);
    }

    let evaluated: Vec<([u32; 4], [usize; 4], f64)> = points
        .par_iter()
        .map(|&units| {
            let caps = capacities_for(units, budget, n_experts, profile)?;
            Ok((units, caps, expected_cost(q, model.k, caps, profile)?))
        })
        .collect::<Result<_>>()?;

    let (units, caps, cost) = evaluated
        .into_iter()
        .reduce(|best, cand| if cand.2 < best.2 || (cand.2 == best.2 && cand.0 > best.0) { cand } else { best })
        .expect("grid is non-empty");
    let total: u32 = units.iter().sum();
    let mut plan = PoolPlan::new(caps, delta);
    plan.gamma = units.map(|u| u as f64 / total as f64);
    plan.expected_cost = Some(cost);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{fit_selection_probs, DEFAULT_MAX_ITER, DEFAULT_TOL};

    fn profile() -> ExecutionProfile {
        ExecutionProfile::new(1.0, 0.3, 0.5, 2, 2, 2).with_elements_per_tensor(100)
    }

    fn skewed() -> (RankModel, SelectionModel) {
        let m = RankModel::from_marginals(vec![0.98, 0.97, 0.02, 0.01, 0.01, 0.01], 2).unwrap();
        let s = fit_selection_probs(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        (m, s)
    }

    #[test]
    fn grid_enumeration() {
        let pts = grid_points(&[Pool::F, Pool::E], 0.5).unwrap();
        assert_eq!(pts, vec![[0, 0, 0, 2], [1, 0, 0, 1], [2, 0, 0, 0]]);
        assert_eq!(grid_points(&Pool::ALL, 0.1).unwrap().len(), 286);
        assert!(grid_points(&[], 0.1).is_err());
        assert!(grid_points(&[Pool::F], 0.3).is_err());
        assert!(grid_points(&[Pool::F], 1.0).is_err());
    }

    #[test]
    fn full_budget_caches_everything() {
        let (m, s) = skewed();
        let plan = plan_pools(&m, &s, &[Pool::F], 10_000, &profile(), 0.1).unwrap();
        assert_eq!(plan.gamma[0], 1.0);
        assert_eq!(plan.capacities[0], 6);
        assert_eq!(plan.expected_cost, Some(0.0));
    }

    #[test]
    fn zero_budget_is_all_miss() {
        let (m, s) = skewed();
        let prof = profile();
        let plan = plan_pools(&m, &s, &Pool::ALL, 0, &prof, 0.1).unwrap();
        assert_eq!(plan.capacities, [0; 4]);
        assert!(plan.warning.is_some());
        let miss = super::super::estimate_makespan(2, &Default::default(), &prof);
        assert!((plan.expected_cost.unwrap() - miss).abs() < 1e-12);
    }

    #[test]
    fn skewed_head_goes_full() {
        let (m, s) = skewed();
        let prof = profile();
        // room for two full experts
        let plan = plan_pools(&m, &s, &[Pool::F, Pool::E], 800, &prof, 0.1).unwrap();
        assert!(plan.capacities[0] >= 2, "{plan:?}");
        for units in grid_points(&[Pool::F, Pool::E], 0.1).unwrap() {
            let caps = capacities_for(units, 800, 6, &prof).unwrap();
            assert!(plan.expected_cost.unwrap() <= expected_cost(&s.q, 2, caps, &prof).unwrap());
        }
    }

    #[test]
    fn capacities_respect_budget_and_experts() {
        let prof = profile();
        let caps = capacities_for([5, 0, 0, 5], 1000, 6, &prof).unwrap();
        // F: 500 / 400 = 1, E: 500 / 100 = 5
        assert_eq!(caps, [1, 0, 0, 5]);
        let caps = capacities_for([0, 0, 0, 10], 10_000, 6, &prof).unwrap();
        assert_eq!(caps, [0, 0, 0, 6]);
    }
}
