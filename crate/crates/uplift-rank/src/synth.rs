//! Synthetic worlds with known dose-response curves and a confounded logging
//! policy, used as ground-truth oracles for estimator and planner tests.
//!
//! Each user carries a quadratic unimodal CTR curve per category (rise to a
//! peak exposure ratio, fall beyond it). The simulator emits windows of
//! exposures: a policy picks a slot composition, the composition is realized
//! as item counts, and clicks are Bernoulli draws from the true CTR at the
//! realized ratio, which is exactly what the window-level CTR estimator
//! measures.

use std::collections::BTreeMap;
use std::io::Write;

use crate::causal::{apportion, DiscreteTreatment};
use crate::data::{CategoryMap, InteractionRecord};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ground-truth curve parameters for one user.
#[derive(Debug, Clone)]
pub struct UserTruth {
    /// Exposure ratio where each category's CTR peaks.
    pub peak: Vec<f64>,
    /// CTR at the peak.
    pub base: Vec<f64>,
    /// Half-width of the curve's support.
    pub width: Vec<f64>,
    /// Category the logging policy over-exposes for this user.
    pub dominant: usize,
}

/// A population of users over `categories * items_per_category` items.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub users: Vec<UserTruth>,
    pub categories: usize,
    pub items_per_category: usize,
    pub seed: u64,
}

/// How the simulated system allocated exposure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoggingPolicy {
    /// Slot compositions drawn uniformly from all compositions of K into C.
    Uniform,
    /// With probability `strength` the window is drawn from a user-dependent
    /// biased component (concentrated on the dominant category or capped away
    /// from the extremes), otherwise from the uniform component. Every
    /// composition keeps non-zero probability, so overlap holds.
    Confounded { strength: f64 },
}

impl SyntheticWorld {
    /// Every user shares the same curves; dominants cycle over categories.
    pub fn homogeneous(
        categories: usize,
        items_per_category: usize,
        n_users: usize,
        peak: f64,
        base: f64,
        width: f64,
        seed: u64,
    ) -> Self {
        let users = (0..n_users)
            .map(|u| UserTruth {
                peak: vec![peak; categories],
                base: vec![base; categories],
                width: vec![width; categories],
                dominant: u % categories,
            })
            .collect();
        SyntheticWorld {
            users,
            categories,
            items_per_category,
            seed,
        }
    }

    /// A feedback-loop world: each user is worn out on the over-exposed
    /// dominant category (CTR collapses at high ratios) while the remaining
    /// categories hide high CTR at ratios the logging policy rarely reaches.
    pub fn hidden_interest(
        categories: usize,
        items_per_category: usize,
        n_users: usize,
        seed: u64,
    ) -> Self {
        let users = (0..n_users)
            .map(|u| {
                let dominant = u % categories;
                let mut peak = vec![0.9; categories];
                let mut base = vec![0.55; categories];
                let mut width = vec![0.8; categories];
                peak[dominant] = 0.0;
                base[dominant] = 0.6;
                width[dominant] = 0.55;
                UserTruth {
                    peak,
                    base,
                    width,
                    dominant,
                }
            })
            .collect();
        SyntheticWorld {
            users,
            categories,
            items_per_category,
            seed,
        }
    }

    /// A gentler feedback-loop world with wide curves, so CTR depends only
    /// mildly on the exposure ratio. Each user has three category levels: the
    /// over-exposed dominant one sits mid-level and declines with exposure, a
    /// hidden one sits high and keeps rising, and the rest stay flat and
    /// weak. Re-allocating exposure from the dominant category toward the
    /// hidden one pays off both counterfactually and against
    /// uniformly-logged feedback.
    pub fn faded_dominant(
        categories: usize,
        items_per_category: usize,
        n_users: usize,
        seed: u64,
    ) -> Self {
        let users = (0..n_users)
            .map(|u| {
                let dominant = u % categories;
                let hidden = (u + 1) % categories;
                let mut peak = vec![0.5; categories];
                let mut base = vec![0.12; categories];
                let mut width = vec![10.0; categories];
                peak[dominant] = 0.0;
                base[dominant] = 0.55;
                width[dominant] = 1.3;
                peak[hidden] = 1.0;
                base[hidden] = 0.8;
                width[hidden] = 1.3;
                UserTruth {
                    peak,
                    base,
                    width,
                    dominant,
                }
            })
            .collect();
        SyntheticWorld {
            users,
            categories,
            items_per_category,
            seed,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.categories * self.items_per_category
    }

    pub fn item_category(&self, item: ItemId) -> usize {
        (item as usize) / self.items_per_category
    }

    /// True CTR of `(user, category)` at exposure ratio `t`:
    /// `base * max(0, 1 - ((t - peak) / width)^2)`, clipped to [0,1].
    pub fn true_ctr(&self, user: usize, category: usize, t: f64) -> f64 {
        let truth = &self.users[user];
        let z = (t - truth.peak[category]) / truth.width[category];
        (truth.base[category] * (1.0 - z * z).max(0.0)).clamp(0.0, 1.0)
    }

    /// Population-average CTR at ratio `t`, the target of group-level
    /// dose-response estimation.
    pub fn population_ctr(&self, category: usize, t: f64) -> f64 {
        let sum: f64 = (0..self.n_users()).map(|u| self.true_ctr(u, category, t)).sum();
        sum / self.n_users() as f64
    }

    /// The item-to-category map induced by the item layout.
    pub fn category_map(&self) -> CategoryMap {
        let assignment = (0..self.n_items() as u64)
            .map(|i| (i, self.item_category(i)))
            .collect();
        CategoryMap::new(assignment, self.categories).expect("layout is dense")
    }

    /// `user <TAB> category <TAB> peak <TAB> base <TAB> width <TAB> dominant`.
    pub fn write_truth(&self, mut w: impl Write) -> Result<()> {
        for (u, truth) in self.users.iter().enumerate() {
            for c in 0..self.categories {
                writeln!(
                    w,
                    "{u}\t{c}\t{:?}\t{:?}\t{:?}\t{}",
                    truth.peak[c], truth.base[c], truth.width[c], truth.dominant
                )?;
            }
        }
        Ok(())
    }
}

/// All compositions of `total` into `parts` non-negative integers.
pub fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
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

/// Uniform draw over compositions of `k` into `c` parts via a random
/// stars-and-bars arrangement: bars at `c-1` of the `k+c-1` slots, parts are
/// the star runs between them.
fn sample_uniform_composition(k: u32, c: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if c == 1 {
        return vec![k];
    }
    let mut bars: Vec<usize> = index::sample(rng, (k as usize) + c - 1, c - 1).into_vec();
    bars.sort_unstable();
    let mut parts = Vec::with_capacity(c);
    let mut prev: i64 = -1;
    for &b in &bars {
        parts.push((b as i64 - prev - 1) as u32);
        prev = b as i64;
    }
    parts.push(((k as usize + c - 1) as i64 - prev - 1) as u32);
    debug_assert_eq!(parts.iter().sum::<u32>(), k);
    parts
}

fn sample_window_slots(
    k: u32,
    c: usize,
    dominant: usize,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    // the gate is drawn even at strength 0 so Uniform and Confounded{0}
    // consume the same random stream
    let biased = rng.gen::<f64>() < strength;
    if !biased || c == 1 {
        return sample_uniform_composition(k, c, rng);
    }
    if rng.gen_bool(0.45) {
        // concentrated on the dominant category
        let s_d = k - rng.gen_range(0..=1.min(k));
        let mut slots = vec![0u32; c];
        slots[dominant] = s_d;
        let mut rest = k - s_d;
        while rest > 0 {
            let other = rng.gen_range(0..c - 1);
            let idx = if other >= dominant { other + 1 } else { other };
            slots[idx] += 1;
            rest -= 1;
        }
        slots
    } else {
        // base mix capped away from the extremes
        let cap = k.saturating_sub(2).max(1);
        loop {
            let slots = sample_uniform_composition(k, c, rng);
            if slots.iter().all(|&s| s <= cap) {
                return slots;
            }
        }
    }
}

/// Simulated trails: `windows_per_user` windows of `window_len` exposures per
/// user, category counts from the policy, clicks Bernoulli at the true CTR of
/// the realized ratio. Deterministic under `seed` with per-user substreams.
pub fn simulate_logs(
    world: &SyntheticWorld,
    policy: LoggingPolicy,
    windows_per_user: usize,
    window_len: usize,
    k: u32,
    seed: u64,
) -> Result<BTreeMap<UserId, Vec<InteractionRecord>>> {
    let strength = match policy {
        LoggingPolicy::Uniform => 0.0,
        LoggingPolicy::Confounded { strength } => {
            if !(0.0..1.0).contains(&strength) {
                return Err(Error::Domain(format!(
                    "confounding strength must lie in [0,1), got {strength}"
                )));
            }
            strength
        }
    };
    if window_len > world.items_per_category {
        return Err(Error::Domain(format!(
            "window length {window_len} exceeds the {} items available per category",
            world.items_per_category
        )));
    }
    let mut trails = BTreeMap::new();
    for (u, truth) in world.users.iter().enumerate() {
        let user = u as UserId;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ user.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut trail = Vec::with_capacity(windows_per_user * window_len);
        let mut position = 0u32;
        for _ in 0..windows_per_user {
            let slots = sample_window_slots(k, world.categories, truth.dominant, strength, &mut rng);
            let quotas: Vec<f64> = slots
                .iter()
                .map(|&s| s as f64 * window_len as f64 / k as f64)
                .collect();
            let counts = apportion(&quotas, window_len as u32);
            for (category, &count) in counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let ratio = count as f64 / window_len as f64;
                let ctr = world.true_ctr(u, category, ratio);
                let base_item = (category * world.items_per_category) as u64;
                let picks = index::sample(&mut rng, world.items_per_category, count as usize);
                for offset in picks.iter() {
                    trail.push(InteractionRecord {
                        user,
                        item: base_item + offset as u64,
                        positive: rng.gen_bool(ctr),
                        position,
                    });
                    position += 1;
                }
            }
        }
        trails.insert(user, trail);
    }
    Ok(trails)
}

/// Flattens trails to a record list in user order.
pub fn to_records(trails: &BTreeMap<UserId, Vec<InteractionRecord>>) -> Vec<InteractionRecord> {
    trails.values().flatten().copied().collect()
}

/// Exhaustive ground-truth optimum of the exposure allocation objective:
/// the composition of `k` slots maximizing `sum_c (k_c/K) * N * ctr(k_c/K)`.
pub fn oracle_best_treatment(
    world: &SyntheticWorld,
    user: usize,
    k: u32,
    n: usize,
) -> Result<(DiscreteTreatment, f64)> {
    if world.categories > 6 || k > 10 {
        return Err(Error::Domain(format!(
            "oracle enumeration capped at C<=6, K<=10; got C={}, K={k}",
            world.categories
        )));
    }
    let mut best: Option<(Vec<u32>, f64)> = None;
    for comp in compositions(k, world.categories) {
        let mut value = 0.0;
        for (category, &slots) in comp.iter().enumerate() {
            let ratio = slots as f64 / k as f64;
            value += ratio * n as f64 * world.true_ctr(user, category, ratio);
        }
        match &best {
            Some((_, v)) if *v >= value => {}
            _ => best = Some((comp, value)),
        }
    }
    let (slots, value) = best.expect("at least one composition exists");
    Ok((DiscreteTreatment::new(slots, k)?, value))
}
