//! Treatment selection and list construction.
//!
//! `best_treatment` solves the slot-allocation knapsack over a dose-response
//! matrix: allocate the K exposure slots across categories, each category
//! deviating at most epsilon slots from the backend allocation, maximizing
//! the summed per-slot CTR. `allocate_list` turns a slot allocation into a
//! top-N list; `rerank_mtef` instead adds weighted marginal effects to the
//! backend scores.

use crate::causal::{apportion, AdrfMatrix, DiscreteTreatment, MtefVector};
use crate::data::CategoryMap;
use crate::error::{Error, Result};
use crate::ItemId;

/// Dynamic-programming table for the slot allocation.
///
/// `f[c][k]` is the best objective over the first `c` categories using
/// exactly `k` slots, `NEG_INF` marking unreachable states. `choice[c][k]`
/// records the slot count taken by category `c` on the best path.
#[derive(Debug, Clone)]
pub struct DpTable {
    pub f: Vec<Vec<f64>>,
    pub choice: Vec<Vec<Option<u32>>>,
}

pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Per-category candidate slot counts, ordered so that the preferred
/// tie-break (closest to the backend allocation, then smaller) comes first.
fn candidates(t0_c: u32, epsilon: u32, k: u32) -> Vec<u32> {
    let mut js: Vec<u32> = (0..=k)
        .filter(|&j| (t0_c as i64 - j as i64).unsigned_abs() as u32 <= epsilon)
        .collect();
    js.sort_by_key(|&j| ((t0_c as i64 - j as i64).unsigned_abs(), j));
    js
}

fn fill_table(adrf: &AdrfMatrix, t0: &DiscreteTreatment, epsilon: u32) -> DpTable {
    let c = adrf.num_categories();
    let k = adrf.max_slot() as usize;
    let mut f = vec![vec![NEG_INF; k + 1]; c + 1];
    let mut choice = vec![vec![None; k + 1]; c + 1];
    f[0][0] = 0.0;
    for cat in 1..=c {
        let js = candidates(t0.slots()[cat - 1], epsilon, k as u32);
        for budget in 0..=k {
            for &j in &js {
                let j_usize = j as usize;
                if j_usize > budget {
                    continue;
                }
                let prev = f[cat - 1][budget - j_usize];
                if prev == NEG_INF {
                    continue;
                }
                let value = prev + j as f64 * adrf.get(cat - 1, j);
                if value > f[cat][budget] {
                    f[cat][budget] = value;
                    choice[cat][budget] = Some(j);
                }
            }
        }
    }
    DpTable { f, choice }
}

/// Locates the first category at which forward reachability and backward
/// feasibility disconnect, for the infeasibility diagnostic.
fn binding_category(adrf: &AdrfMatrix, t0: &DiscreteTreatment, epsilon: u32, table: &DpTable) -> usize {
    let c = adrf.num_categories();
    let k = adrf.max_slot() as usize;
    // backward[l] = budgets from which (C, K) is still reachable after layer l
    let mut backward = vec![vec![false; k + 1]; c + 1];
    backward[c][k] = true;
    for cat in (1..=c).rev() {
        let js = candidates(t0.slots()[cat - 1], epsilon, k as u32);
        for budget in 0..=k {
            backward[cat - 1][budget] = js
                .iter()
                .any(|&j| budget + j as usize <= k && backward[cat][budget + j as usize]);
        }
    }
    for layer in 0..=c {
        let connected =
            (0..=k).any(|budget| table.f[layer][budget] != NEG_INF && backward[layer][budget]);
        if !connected {
            return layer.saturating_sub(1);
        }
    }
    c.saturating_sub(1)
}

/// Optimal slot allocation under the per-category deviation budget.
///
/// Returns the allocation and the objective `sum_c j_c * A[c][j_c]`, the
/// expected clicks carried by the K slots. Ties prefer the slot count
/// closest to the backend allocation, then the smaller one.
pub fn best_treatment(
    adrf: &AdrfMatrix,
    t0: &DiscreteTreatment,
    epsilon: u32,
) -> Result<(DiscreteTreatment, f64)> {
    let c = adrf.num_categories();
    let k = adrf.max_slot();
    if t0.slots().len() != c {
        return Err(Error::Domain(format!(
            "backend allocation has {} categories, dose-response has {c}",
            t0.slots().len()
        )));
    }
    if t0.k() != k {
        return Err(Error::Domain(format!(
            "backend allocation grid K={} does not match dose-response grid K={k}",
            t0.k()
        )));
    }
    let table = fill_table(adrf, t0, epsilon);
    let value = table.f[c][k as usize];
    if value == NEG_INF {
        return Err(Error::Infeasible {
            category: binding_category(adrf, t0, epsilon, &table),
        });
    }
    let mut slots = vec![0u32; c];
    let mut budget = k as usize;
    for cat in (1..=c).rev() {
        let j = table.choice[cat][budget].expect("finite state has a recorded choice");
        slots[cat - 1] = j;
        budget -= j as usize;
    }
    Ok((DiscreteTreatment::new(slots, k)?, value))
}

/// Variant with an aggregate L1 deviation budget `sum_c |j_c - t0_c| <= epsilon`
/// instead of the per-category bound.
pub fn best_treatment_aggregate(
    adrf: &AdrfMatrix,
    t0: &DiscreteTreatment,
    epsilon: u32,
) -> Result<(DiscreteTreatment, f64)> {
    let c = adrf.num_categories();
    let k = adrf.max_slot() as usize;
    if t0.slots().len() != c || t0.k() != adrf.max_slot() {
        return Err(Error::Domain("allocation shape does not match the dose-response grid".into()));
    }
    let e_cap = epsilon as usize;
    // f[budget][used deviation]
    let mut f = vec![vec![vec![NEG_INF; e_cap + 1]; k + 1]; c + 1];
    let mut choice = vec![vec![vec![None; e_cap + 1]; k + 1]; c + 1];
    f[0][0][0] = 0.0;
    for cat in 1..=c {
        let t0_c = t0.slots()[cat - 1];
        let mut js: Vec<u32> = (0..=adrf.max_slot()).collect();
        js.sort_by_key(|&j| ((t0_c as i64 - j as i64).unsigned_abs(), j));
        for budget in 0..=k {
            for used in 0..=e_cap {
                for &j in &js {
                    let dev = (t0_c as i64 - j as i64).unsigned_abs() as usize;
                    if j as usize > budget || dev > used {
                        continue;
                    }
                    let prev = f[cat - 1][budget - j as usize][used - dev];
                    if prev == NEG_INF {
                        continue;
                    }
                    let value = prev + j as f64 * adrf.get(cat - 1, j);
                    if value > f[cat][budget][used] {
                        f[cat][budget][used] = value;
                        choice[cat][budget][used] = Some(j);
                    }
                }
            }
        }
    }
    let (mut best_used, mut best) = (0usize, NEG_INF);
    for used in 0..=e_cap {
        if f[c][k][used] > best {
            best = f[c][k][used];
            best_used = used;
        }
    }
    if best == NEG_INF {
        return Err(Error::Infeasible { category: c.saturating_sub(1) });
    }
    let mut slots = vec![0u32; c];
    let mut budget = k;
    let mut used = best_used;
    for cat in (1..=c).rev() {
        let j = choice[cat][budget][used].expect("finite state has a recorded choice");
        slots[cat - 1] = j;
        budget -= j as usize;
        used -= (t0.slots()[cat - 1] as i64 - j as i64).unsigned_abs() as usize;
    }
    Ok((DiscreteTreatment::new(slots, adrf.max_slot())?, best))
}

/// Materializes a slot allocation as a top-N list.
///
/// Each category's item budget is the largest-remainder share of
/// `slots_c * N / K`; the budget is filled with the category's best-ranked
/// candidates, deficits are refilled with the best unselected items of any
/// category, and the final list follows the backend ranking order.
pub fn allocate_list(
    ranking: &[ItemId],
    categories: &CategoryMap,
    slots: &DiscreteTreatment,
    n: usize,
    k: u32,
) -> Result<Vec<ItemId>> {
    if ranking.len() < n {
        return Err(Error::Domain(format!(
            "need {n} candidates, ranking has only {}",
            ranking.len()
        )));
    }
    if slots.total() != k {
        return Err(Error::Domain(format!(
            "slot allocation sums to {}, expected K={k}",
            slots.total()
        )));
    }
    let c = slots.slots().len();
    let quotas: Vec<f64> = slots
        .slots()
        .iter()
        .map(|&s| s as f64 * n as f64 / k as f64)
        .collect();
    let budgets = apportion(&quotas, n as u32);

    let mut taken = vec![0u32; c];
    let mut selected = vec![false; ranking.len()];
    for (idx, &item) in ranking.iter().enumerate() {
        let cat = categories.category(item)?;
        if taken[cat] < budgets[cat] {
            taken[cat] += 1;
            selected[idx] = true;
        }
    }
    // refill category deficits with the best unselected candidates
    let mut have: usize = taken.iter().map(|&t| t as usize).sum();
    for idx in 0..ranking.len() {
        if have >= n {
            break;
        }
        if !selected[idx] {
            selected[idx] = true;
            have += 1;
        }
    }
    let list: Vec<ItemId> = ranking
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|(&item, _)| item)
        .take(n)
        .collect();
    debug_assert_eq!(list.len(), n);
    Ok(list)
}

/// Adds the weighted marginal effect of each item's category to its backend
/// score and returns the top-N by adjusted score, ties by ascending item id.
pub fn rerank_mtef(
    scored: &[(ItemId, f64)],
    mtef: &MtefVector,
    alpha: f64,
    categories: &CategoryMap,
    n: usize,
) -> Result<Vec<(ItemId, f64)>> {
    let mut adjusted: Vec<(ItemId, f64)> = scored
        .iter()
        .map(|&(item, s0)| {
            let cat = categories.category(item)?;
            Ok((item, s0 + alpha * mtef.values()[cat]))
        })
        .collect::<Result<_>>()?;
    adjusted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    adjusted.truncate(n);
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::TreatmentVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::time::Instant;

    fn adrf_from(values: Vec<Vec<f64>>) -> AdrfMatrix {
        let filled = values.iter().map(|row| vec![true; row.len()]).collect();
        AdrfMatrix::from_parts(values, filled, 0.01)
    }

    fn random_adrf(rng: &mut ChaCha8Rng, c: usize, k: usize) -> AdrfMatrix {
        let values: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let mut row: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.0..1.0)).collect();
                row[0] = 0.0;
                row
            })
            .collect();
        adrf_from(values)
    }

    /// All compositions of `total` into `parts` non-negative integers.
    fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
        if parts == 1 {
            return vec![vec![total]];
        }
        let mut out = Vec::new();
        for first in 0..=total {
            for mut rest in compositions(total - first, parts - 1) {
                let mut v = vec![first];
                v.append(&mut rest);
                out.push(v);
            }
        }
        out
    }

    /// Exhaustive reference: best constrained composition, summed left to right.
    fn brute_force(adrf: &AdrfMatrix, t0: &[u32], epsilon: u32) -> Option<(Vec<u32>, f64)> {
        let c = adrf.num_categories();
        let k = adrf.max_slot();
        let mut best: Option<(Vec<u32>, f64)> = None;
        for comp in compositions(k, c) {
            let ok = comp
                .iter()
                .zip(t0)
                .all(|(&j, &t)| (t as i64 - j as i64).unsigned_abs() as u32 <= epsilon);
            if !ok {
                continue;
            }
            let mut value = 0.0;
            for (cat, &j) in comp.iter().enumerate() {
                value += j as f64 * adrf.get(cat, j);
            }
            match &best {
                Some((_, v)) if *v >= value => {}
                _ => best = Some((comp, value)),
            }
        }
        best
    }

    #[test]
    fn epsilon_zero_returns_backend_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = rng.gen_range(1..5);
            let k = rng.gen_range(1..8u32);
            let adrf = random_adrf(&mut rng, c, k as usize);
            let comps = compositions(k, c);
            let t0_slots = comps[rng.gen_range(0..comps.len())].clone();
            let t0 = DiscreteTreatment::new(t0_slots.clone(), k).unwrap();
            let (best, value) = best_treatment(&adrf, &t0, 0).unwrap();
            assert_eq!(best.slots(), t0_slots.as_slice());
            let mut expected = 0.0;
            for (cat, &j) in t0_slots.iter().enumerate() {
                expected += j as f64 * adrf.get(cat, j);
            }
            assert_eq!(value, expected);
        }
    }

    #[test]
    fn dp_matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = rng.gen_range(1..4);
            let k = rng.gen_range(1..6u32);
            let epsilon = rng.gen_range(0..3u32);
            let adrf = random_adrf(&mut rng, c, k as usize);
            let comps = compositions(k, c);
            let t0_slots = comps[rng.gen_range(0..comps.len())].clone();
            let t0 = DiscreteTreatment::new(t0_slots.clone(), k).unwrap();
            let (slots, value) = best_treatment(&adrf, &t0, epsilon).unwrap();
            let (_, expected) = brute_force(&adrf, &t0_slots, epsilon).unwrap();
            assert_eq!(value, expected, "C={c} K={k} eps={epsilon}");
            for (cat, (&j, &t)) in slots.slots().iter().zip(&t0_slots).enumerate() {
                assert!(
                    (t as i64 - j as i64).unsigned_abs() as u32 <= epsilon,
                    "category {cat} deviates beyond epsilon"
                );
            }
            assert_eq!(slots.total(), k);
        }
    }

    #[test]
    fn infeasible_allocation_names_the_binding_category() {
        let adrf = adrf_from(vec![vec![0.0; 6], vec![0.0; 6]]);
        // backend allocation does not sum to K, epsilon pins both categories
        let t0 = DiscreteTreatment::new(vec![0, 0], 5).unwrap();
        match best_treatment(&adrf, &t0, 0) {
            Err(Error::Infeasible { category }) => assert_eq!(category, 0),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn aggregate_budget_matches_its_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = rng.gen_range(1..4);
            let k = rng.gen_range(1..6u32);
            let epsilon = rng.gen_range(0..4u32);
            let adrf = random_adrf(&mut rng, c, k as usize);
            let comps = compositions(k, c);
            let t0_slots = comps[rng.gen_range(0..comps.len())].clone();
            let t0 = DiscreteTreatment::new(t0_slots.clone(), k).unwrap();
            let (slots, value) = best_treatment_aggregate(&adrf, &t0, epsilon).unwrap();
            let mut expected = f64::NEG_INFINITY;
            for comp in compositions(k, c) {
                let dev: u32 = comp
                    .iter()
                    .zip(&t0_slots)
                    .map(|(&j, &t)| (t as i64 - j as i64).unsigned_abs() as u32)
                    .sum();
                if dev > epsilon {
                    continue;
                }
                let mut v = 0.0;
                for (cat, &j) in comp.iter().enumerate() {
                    v += j as f64 * adrf.get(cat, j);
                }
                expected = expected.max(v);
            }
            assert_eq!(value, expected);
            let dev: u32 = slots
                .slots()
                .iter()
                .zip(&t0_slots)
                .map(|(&j, &t)| (t as i64 - j as i64).unsigned_abs() as u32)
                .sum();
            assert!(dev <= epsilon);
        }
    }

    #[test]
    fn dp_is_fast_enough_for_sweeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adrfs: Vec<AdrfMatrix> = (0..10).map(|_| random_adrf(&mut rng, 10, 10)).collect();
        let comps = compositions(10, 10);
        let start = Instant::now();
        let mut sink = 0.0;
        for i in 0..10_000 {
            let adrf = &adrfs[i % adrfs.len()];
            let t0 = DiscreteTreatment::new(comps[i % comps.len()].clone(), 10).unwrap();
            let (_, v) = best_treatment(adrf, &t0, 2).unwrap();
            sink += v;
        }
        let elapsed = start.elapsed();
        assert!(sink.is_finite());
        assert!(elapsed.as_secs_f64() < 1.0, "10^4 instances took {elapsed:?}");
    }

    fn toy_categories() -> CategoryMap {
        // items 0..10 alternate categories 0,1,2
        let assignment: HashMap<u64, usize> = (0..12u64).map(|i| (i, (i % 3) as usize)).collect();
        CategoryMap::new(assignment, 3).unwrap()
    }

    #[test]
    fn allocate_identity_and_scaled_budgets() {
        // ranking by descending backend score; categories cycle 0,1,2
        let assignment: HashMap<u64, usize> = (0..30u64).map(|i| (i, (i % 3) as usize)).collect();
        let categories = CategoryMap::new(assignment, 3).unwrap();
        let ranking: Vec<u64> = (0..30).collect();
        let slots = DiscreteTreatment::new(vec![2, 1, 2], 5).unwrap();
        let list = allocate_list(&ranking, &categories, &slots, 5, 5).unwrap();
        let mut per_cat = [0; 3];
        for &item in &list {
            per_cat[categories.category(item).unwrap()] += 1;
        }
        assert_eq!(per_cat, [2, 1, 2]);

        let slots = DiscreteTreatment::new(vec![1, 0, 4], 5).unwrap();
        let list = allocate_list(&ranking, &categories, &slots, 10, 5).unwrap();
        let mut per_cat = [0; 3];
        for &item in &list {
            per_cat[categories.category(item).unwrap()] += 1;
        }
        assert_eq!(per_cat, [2, 0, 8]);
    }

    #[test]
    fn allocate_refills_category_deficits() {
        // category 1 has only 2 candidates but a budget of 3
        let assignment: HashMap<u64, usize> =
            [(0, 0), (1, 1), (2, 1), (3, 0), (4, 0), (5, 0)].into_iter().collect();
        let categories = CategoryMap::new(assignment, 2).unwrap();
        let ranking: Vec<u64> = vec![0, 1, 2, 3, 4, 5];
        let slots = DiscreteTreatment::new(vec![2, 3], 5).unwrap();
        let list = allocate_list(&ranking, &categories, &slots, 5, 5).unwrap();
        assert_eq!(list.len(), 5);
        // both category-1 items picked, deficit filled by best category-0 leftovers
        assert!(list.contains(&1) && list.contains(&2));
        assert_eq!(list, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn allocate_rejects_too_few_candidates() {
        let categories = toy_categories();
        let slots = DiscreteTreatment::new(vec![2, 1, 2], 5).unwrap();
        assert!(allocate_list(&[0, 1, 2], &categories, &slots, 5, 5).is_err());
    }

    #[test]
    fn rerank_with_zero_alpha_is_identity() {
        let categories = toy_categories();
        let scored: Vec<(u64, f64)> = vec![(0, 0.5), (1, 0.9), (2, 0.9), (3, 0.1)];
        let mtef = {
            let adrf = adrf_from(vec![vec![0.0, 0.4], vec![0.0, 0.2], vec![0.0, 0.1]]);
            let t0 = DiscreteTreatment::new(vec![0, 0, 1], 1).unwrap();
            crate::causal::compute_mtef(&adrf, &t0, 1, 0.05).unwrap()
        };
        let reranked = rerank_mtef(&scored, &mtef, 0.0, &categories, 4).unwrap();
        let items: Vec<u64> = reranked.iter().map(|&(i, _)| i).collect();
        assert_eq!(items, vec![1, 2, 0, 3], "ties fall back to ascending item id");
    }

    #[test]
    fn rerank_adds_weighted_marginal_effect() {
        let assignment: HashMap<u64, usize> = [(7, 0)].into_iter().collect();
        let categories = CategoryMap::new(assignment, 1).unwrap();
        let adrf = adrf_from(vec![vec![0.0, 0.36, 0.72]]);
        let t0 = DiscreteTreatment::new(vec![0], 2).unwrap();
        let mtef = crate::causal::compute_mtef(&adrf, &t0, 1, 0.05).unwrap();
        let out = rerank_mtef(&[(7, 0.8)], &mtef, 0.3, &categories, 1).unwrap();
        assert!((out[0].1 - 0.908).abs() < 1e-12);
    }

    #[test]
    fn rerank_is_invariant_to_constant_shift() {
        let categories = toy_categories();
        let scored: Vec<(u64, f64)> = (0..9u64).map(|i| (i, (i as f64 * 0.37).sin())).collect();
        let make_mtef = |shift: f64| {
            let values = vec![
                vec![0.0, 0.1 + shift],
                vec![0.0, 0.3 + shift],
                vec![0.0, 0.2 + shift],
            ];
            let adrf = adrf_from(values);
            let t0 = DiscreteTreatment::new(vec![0, 0, 0], 1).unwrap();
            crate::causal::compute_mtef(&adrf, &t0, 1, 0.05).unwrap()
        };
        let base = rerank_mtef(&scored, &make_mtef(0.0), 0.25, &categories, 9).unwrap();
        let shifted = rerank_mtef(&scored, &make_mtef(10.0), 0.25, &categories, 9).unwrap();
        let ids = |v: &[(u64, f64)]| v.iter().map(|&(i, _)| i).collect::<Vec<_>>();
        assert_eq!(ids(&base), ids(&shifted));
    }

    #[test]
    fn apportion_handles_exact_and_fractional_quotas() {
        assert_eq!(apportion(&[2.0, 1.0, 2.0], 5), vec![2, 1, 2]);
        assert_eq!(apportion(&[2.0, 0.0, 8.0], 10), vec![2, 0, 8]);
        assert_eq!(apportion(&[1.5, 1.5, 2.0], 5), vec![2, 1, 2], "remainder tie goes to lower index");
    }
}
