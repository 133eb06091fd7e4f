//! Augmented-sample construction and treatment-effect estimation.
//!
//! A user's logged trail is split at ratio `lambda` into a history part and a
//! treatment window. The window yields the treatment (category exposure
//! ratios) and the outcome (per-category CTR). Ratios are discretized into
//! `K` slots; neighbor voting over discretized treatments gives a propensity
//! matrix, and inverse-propensity-weighted slot means give the dose-response
//! matrix from which marginal treatment effects are differenced.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::data::{CategoryMap, InteractionRecord};
use crate::error::{Error, Result};
use crate::UserId;

/// Category exposure ratios over the C categories; a point on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentVector(Vec<f64>);

impl TreatmentVector {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Domain("treatment vector must have at least one category".into()));
        }
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|&t| !(0.0..=1.0).contains(&t)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "exposure ratios must lie in [0,1] and sum to 1, got {ratios:?}"
            )));
        }
        Ok(TreatmentVector(ratios))
    }

    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-category CTR within a treatment window. `y[c]` is meaningful only
/// where `observed[c]` (the category had at least one exposure).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeVector {
    pub y: Vec<f64>,
    pub observed: Vec<bool>,
}

/// A (history, treatment, outcome) tuple carved from one user's trail.
///
/// History is the former `lambda` fraction and defines the sample's features;
/// it is not part of the persisted tab-separated form.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub sample_id: usize,
    pub source_user: UserId,
    pub history: Vec<InteractionRecord>,
    pub treatment: TreatmentVector,
    pub outcome: OutcomeVector,
}

/// Integer slot allocation over categories, each slot count in `0..=K`.
///
/// Only allocation targets must sum to `K`; discretized observations need not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteTreatment {
    slots: Vec<u32>,
    k: u32,
}

/// Half-up rounding of a single exposure ratio onto the `0..=K` slot grid.
pub fn discretize_ratio(ratio: f64, k: u32) -> u32 {
    ((ratio * k as f64).round() as u32).min(k)
}

/// Largest-remainder apportionment of fractional quotas to integers with a
/// fixed total; ties prefer the larger remainder, then the lower index.
pub fn apportion(quotas: &[f64], total: u32) -> Vec<u32> {
    let mut alloc: Vec<u32> = quotas.iter().map(|&q| q.floor() as u32).collect();
    let assigned: u32 = alloc.iter().sum();
    let leftover = total.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(leftover) {
        alloc[i] += 1;
    }
    alloc
}

impl DiscreteTreatment {
    pub fn new(slots: Vec<u32>, k: u32) -> Result<Self> {
        if slots.iter().any(|&s| s > k) {
            return Err(Error::Domain(format!("slot above K={k} in {slots:?}")));
        }
        Ok(DiscreteTreatment { slots, k })
    }

    /// Per-ratio half-up rounding; the result may not sum to `K`.
    pub fn from_ratios_rounded(t: &TreatmentVector, k: u32) -> Self {
        DiscreteTreatment {
            slots: t.ratios().iter().map(|&r| discretize_ratio(r, k)).collect(),
            k,
        }
    }

    /// Largest-remainder apportionment of `t * K`, repaired to sum exactly to
    /// `K` so the result can feed the slot-budget constraint.
    pub fn from_ratios_apportioned(t: &TreatmentVector, k: u32) -> Self {
        let quotas: Vec<f64> = t.ratios().iter().map(|&r| r * k as f64).collect();
        DiscreteTreatment {
            slots: apportion(&quotas, k),
            k,
        }
    }

    pub fn slots(&self) -> &[u32] {
        &self.slots
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn total(&self) -> u32 {
        self.slots.iter().sum()
    }
}

/// Clamped C x (K+1) matrix of slot probabilities from neighbor voting.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMatrix {
    p: Vec<Vec<f64>>,
    floor: f64,
}

impl PropensityMatrix {
    pub fn from_parts(p: Vec<Vec<f64>>, floor: f64) -> Self {
        PropensityMatrix { p, floor }
    }

    pub fn get(&self, category: usize, slot: u32) -> f64 {
        self.p[category][slot as usize]
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn num_categories(&self) -> usize {
        self.p.len()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for row in &self.p {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

/// C x (K+1) dose-response matrix. Column 0 is pinned to 0; cells with no
/// contributing neighbor hold `null_value` and are marked unfilled.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrfMatrix {
    a: Vec<Vec<f64>>,
    filled: Vec<Vec<bool>>,
    null_value: f64,
}

impl AdrfMatrix {
    pub fn from_parts(a: Vec<Vec<f64>>, filled: Vec<Vec<bool>>, null_value: f64) -> Self {
        AdrfMatrix { a, filled, null_value }
    }

    pub fn get(&self, category: usize, slot: u32) -> f64 {
        self.a[category][slot as usize]
    }

    pub fn is_filled(&self, category: usize, slot: u32) -> bool {
        self.filled[category][slot as usize]
    }

    pub fn null_value(&self) -> f64 {
        self.null_value
    }

    pub fn num_categories(&self) -> usize {
        self.a.len()
    }

    /// The treatment-clip number K.
    pub fn max_slot(&self) -> u32 {
        (self.a[0].len() - 1) as u32
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (row, mask) in self.a.iter().zip(&self.filled) {
            let cells: Vec<String> = row
                .iter()
                .zip(mask)
                .map(|(v, &f)| if f { format!("{v:?}") } else { format!("{v:?}*") })
                .collect();
            writeln!(w, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

/// Finite-difference marginal effect per category; missing inputs fall back
/// to `null_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtefVector {
    m: Vec<f64>,
    null_value: f64,
    step: u32,
}

impl MtefVector {
    pub fn from_parts(m: Vec<f64>, null_value: f64, step: u32) -> Self {
        MtefVector { m, null_value, step }
    }

    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn null_value(&self) -> f64 {
        self.null_value
    }

    pub fn step(&self) -> u32 {
        self.step
    }
}

/// All tunables of the causal pipeline. Field names match the config file
/// keys one-to-one.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    /// Trail division ratio.
    pub lambda: f64,
    /// Category count for clustering.
    #[serde(rename = "C")]
    pub c: usize,
    /// Treatment-clip number: slots on the ratio axis and the allocation budget.
    #[serde(rename = "K")]
    pub k: u32,
    /// Neighbors for propensity voting.
    #[serde(rename = "K_p")]
    pub k_p: usize,
    /// Neighbors for dose-response estimation.
    #[serde(rename = "K_s")]
    pub k_s: usize,
    /// Propensity exponent controlling debiasing strength.
    pub gamma: f64,
    /// Allowed per-category slot deviation from the backend allocation.
    pub epsilon: u32,
    /// Propensity clamp floor.
    pub v_p: f64,
    /// Null fill for dose-response cells without data.
    pub v_a: f64,
    /// Null fill for marginal effects without data.
    pub v_m: f64,
    /// Weight of the marginal effect in score adjustment.
    pub alpha: f64,
    /// Finite-difference step in slots.
    pub delta_t: u32,
    /// Recommendation list length.
    #[serde(rename = "N")]
    pub n: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: 0.5,
            c: 3,
            k: 5,
            k_p: 80,
            k_s: 80,
            gamma: 1.0,
            epsilon: 2,
            v_p: 0.1,
            v_a: 0.01,
            v_m: 0.05,
            alpha: 0.3,
            delta_t: 1,
            n: 5,
        }
    }
}

impl HyperParams {
    /// Hard invariants that must always hold.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0,1), got {}", self.lambda)));
        }
        if self.c == 0 {
            return Err(Error::Config("C must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.k as usize > self.n {
            return Err(Error::Config(format!("K={} must not exceed N={}", self.k, self.n)));
        }
        if self.k_p == 0 || self.k_s == 0 {
            return Err(Error::Config("K_p and K_s must be at least 1".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.v_p <= 0.0 {
            return Err(Error::Config(format!("v_p must be > 0, got {}", self.v_p)));
        }
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks the documented search ranges on top of the hard invariants.
    /// Out-of-range values are legal only when the caller opts out.
    pub fn validate_ranges(&self) -> Result<()> {
        self.validate()?;
        let mut violations = Vec::new();
        if ![0.25, 0.5, 0.75].contains(&self.lambda) {
            violations.push(format!("lambda={} outside {{0.25, 0.5, 0.75}}", self.lambda));
        }
        if ![2, 3, 5, 10, 15].contains(&self.c) {
            violations.push(format!("C={} outside {{2, 3, 5, 10, 15}}", self.c));
        }
        let k_frac = self.k as f64 / self.n as f64;
        if ![0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .any(|&f| (k_frac - f).abs() < 1e-9)
        {
            violations.push(format!("K/N={k_frac} outside {{0.2, 0.4, 0.6, 0.8, 1.0}}"));
        }
        if self.k_p < 10 || self.k_s < 10 {
            violations.push(format!("K_p={} / K_s={} below 10", self.k_p, self.k_s));
        }
        if !(0.0..=0.5).contains(&self.v_m) {
            violations.push(format!("v_m={} outside [0, 0.5]", self.v_m));
        }
        if !(0.05..=0.45).contains(&self.alpha) {
            violations.push(format!("alpha={} outside [0.05, 0.45]", self.alpha));
        }
        if ![0.01, 0.1].contains(&self.v_a) {
            violations.push(format!("v_a={} outside {{0.01, 0.1}}", self.v_a));
        }
        if self.epsilon > 2 {
            violations.push(format!("epsilon={} outside {{0, 1, 2}}", self.epsilon));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "hyperparameters outside the documented ranges ({}); set allow_out_of_range to override",
                violations.join("; ")
            )))
        }
    }
}

/// Splits a position-sorted trail into (history, window) at ratio `lambda`.
///
/// History takes the first `ceil(lambda * len)` records. Returns `None` when
/// the trail is too short to leave a non-empty window, signalling that the
/// sample is skipped.
pub fn split_trail(
    trail: &[InteractionRecord],
    lambda: f64,
) -> Option<(&[InteractionRecord], &[InteractionRecord])> {
    assert!(lambda > 0.0 && lambda < 1.0, "lambda must lie in (0,1)");
    if trail.len() < 2 {
        return None;
    }
    let history_len = ((lambda * trail.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    if history_len >= trail.len() {
        return None;
    }
    Some(trail.split_at(history_len))
}

/// Exposure ratio per category over the window, counting positives and
/// negatives alike.
pub fn compute_treatment(
    window: &[InteractionRecord],
    categories: &CategoryMap,
    c: usize,
) -> Result<TreatmentVector> {
    if window.is_empty() {
        return Err(Error::Domain("treatment window is empty".into()));
    }
    let mut counts = vec![0usize; c];
    for r in window {
        counts[categories.category(r.item)?] += 1;
    }
    let total = window.len() as f64;
    TreatmentVector::new(counts.into_iter().map(|n| n as f64 / total).collect())
}

/// Per-category CTR over the window; categories without exposures are
/// unobserved rather than zero.
pub fn compute_outcome(
    window: &[InteractionRecord],
    categories: &CategoryMap,
    c: usize,
) -> Result<OutcomeVector> {
    if window.is_empty() {
        return Err(Error::Domain("treatment window is empty".into()));
    }
    let mut exposures = vec![0usize; c];
    let mut clicks = vec![0usize; c];
    for r in window {
        let cat = categories.category(r.item)?;
        exposures[cat] += 1;
        if r.positive {
            clicks[cat] += 1;
        }
    }
    let mut y = vec![0.0; c];
    let mut observed = vec![false; c];
    for cat in 0..c {
        if exposures[cat] > 0 {
            observed[cat] = true;
            y[cat] = clicks[cat] as f64 / exposures[cat] as f64;
        }
    }
    Ok(OutcomeVector { y, observed })
}

/// Carves one augmented sample per eligible user. Returns the samples in
/// ascending source-user order together with the number of skipped users.
pub fn build_augmented_dataset(
    trails: &BTreeMap<UserId, Vec<InteractionRecord>>,
    lambda: f64,
    categories: &CategoryMap,
) -> Result<(Vec<AugmentedSample>, usize)> {
    let c = categories.num_categories();
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (&user, trail) in trails {
        match split_trail(trail, lambda) {
            Some((history, window)) => {
                let treatment = compute_treatment(window, categories, c)?;
                let outcome = compute_outcome(window, categories, c)?;
                samples.push(AugmentedSample {
                    sample_id: samples.len(),
                    source_user: user,
                    history: history.to_vec(),
                    treatment,
                    outcome,
                });
            }
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Domain(format!(
            "no eligible users: all {skipped} trails were too short to split"
        )));
    }
    Ok((samples, skipped))
}

/// Neighbor-vote propensity: `P[c][k]` is the fraction of neighbors whose
/// discretized ratio for category `c` landed in slot `k`, clamped below at
/// `v_p`.
pub fn estimate_propensity(
    neighbor_treatments: &[DiscreteTreatment],
    c: usize,
    k: u32,
    v_p: f64,
) -> Result<PropensityMatrix> {
    if neighbor_treatments.is_empty() {
        return Err(Error::Domain("propensity estimation needs at least one neighbor".into()));
    }
    if v_p <= 0.0 {
        return Err(Error::Config(format!("v_p must be > 0, got {v_p}")));
    }
    let mut counts = vec![vec![0usize; k as usize + 1]; c];
    for t in neighbor_treatments {
        if t.slots().len() != c {
            return Err(Error::Domain(format!(
                "neighbor treatment has {} categories, expected {c}",
                t.slots().len()
            )));
        }
        for (cat, &slot) in t.slots().iter().enumerate() {
            counts[cat][slot as usize] += 1;
        }
    }
    let total = neighbor_treatments.len() as f64;
    let p = counts
        .into_iter()
        .map(|row| row.into_iter().map(|n| (n as f64 / total).max(v_p)).collect())
        .collect();
    Ok(PropensityMatrix { p, floor: v_p })
}

/// Inverse-propensity-weighted dose-response estimate.
///
/// For each category `c` and slot `k >= 1`, the cell is the mean outcome of
/// neighbors whose discretized ratio fell in that slot and whose outcome for
/// `c` is observed, divided by the clamped propensity raised to `gamma`.
/// Column 0 is 0: an unexposed category has zero CTR. Cells without any
/// contributor hold `v_a`.
pub fn estimate_adrf(
    neighbors: &[&AugmentedSample],
    propensity: &PropensityMatrix,
    gamma: f64,
    v_a: f64,
    c: usize,
    k: u32,
) -> Result<AdrfMatrix> {
    if neighbors.is_empty() {
        return Err(Error::Domain("dose-response estimation needs at least one neighbor".into()));
    }
    let width = k as usize + 1;
    let mut sums = vec![vec![0.0; width]; c];
    let mut counts = vec![vec![0usize; width]; c];
    for s in neighbors {
        if s.treatment.len() != c {
            return Err(Error::Domain(format!(
                "neighbor sample has {} categories, expected {c}",
                s.treatment.len()
            )));
        }
        for cat in 0..c {
            if !s.outcome.observed[cat] {
                continue;
            }
            let slot = discretize_ratio(s.treatment.ratios()[cat], k) as usize;
            sums[cat][slot] += s.outcome.y[cat];
            counts[cat][slot] += 1;
        }
    }
    let mut a = vec![vec![v_a; width]; c];
    let mut filled = vec![vec![false; width]; c];
    for cat in 0..c {
        a[cat][0] = 0.0;
        filled[cat][0] = true;
        for slot in 1..width {
            if counts[cat][slot] > 0 {
                let mean = sums[cat][slot] / counts[cat][slot] as f64;
                a[cat][slot] = mean / propensity.get(cat, slot as u32).powf(gamma);
                filled[cat][slot] = true;
            }
        }
    }
    Ok(AdrfMatrix { a, filled, null_value: v_a })
}

/// Finite-difference slope of the dose-response at the backend allocation.
///
/// `m[c] = (A[c][t0_c + delta] - A[c][t0_c]) / delta` when both cells are
/// filled (column 0 counts as filled) and the step stays on the grid;
/// otherwise `v_m`.
pub fn compute_mtef(
    adrf: &AdrfMatrix,
    t0: &DiscreteTreatment,
    delta: u32,
    v_m: f64,
) -> Result<MtefVector> {
    if delta == 0 {
        return Err(Error::Config("delta_t must be at least 1".into()));
    }
    let k = adrf.max_slot();
    if t0.k() != k {
        return Err(Error::Domain(format!(
            "allocation grid K={} does not match dose-response grid K={k}",
            t0.k()
        )));
    }
    if t0.slots().len() != adrf.num_categories() {
        return Err(Error::Domain(format!(
            "allocation has {} categories, dose-response has {}",
            t0.slots().len(),
            adrf.num_categories()
        )));
    }
    let m = t0
        .slots()
        .iter()
        .enumerate()
        .map(|(cat, &t0_c)| {
            let target = t0_c + delta;
            if target <= k && adrf.is_filled(cat, t0_c) && adrf.is_filled(cat, target) {
                (adrf.get(cat, target) - adrf.get(cat, t0_c)) / delta as f64
            } else {
                v_m
            }
        })
        .collect();
    Ok(MtefVector {
        m,
        null_value: v_m,
        step: delta,
    })
}

/// Persists samples as `sample_id <TAB> source_user <TAB> ratios <TAB>
/// outcomes` with comma-separated ratios and `y:observed` outcome pairs.
pub fn write_samples(samples: &[AugmentedSample], mut w: impl Write) -> Result<()> {
    for s in samples {
        let ratios: Vec<String> = s.treatment.ratios().iter().map(|r| format!("{r:?}")).collect();
        let outcomes: Vec<String> = s
            .outcome
            .y
            .iter()
            .zip(&s.outcome.observed)
            .map(|(y, &o)| format!("{:?}:{}", y, if o { 1 } else { 0 }))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            s.sample_id,
            s.source_user,
            ratios.join(","),
            outcomes.join(",")
        )?;
    }
    Ok(())
}

/// Reads samples back from the persisted form. Histories are not stored, so
/// loaded samples carry an empty history.
pub fn read_samples(reader: impl BufRead) -> Result<Vec<AugmentedSample>> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let sample_id: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad sample id".into(),
        })?;
        let source_user: UserId = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad source user".into(),
        })?;
        let ratios: Vec<f64> = fields[2]
            .split(',')
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: "bad treatment ratio".into(),
                })
            })
            .collect::<Result<_>>()?;
        let mut y = Vec::new();
        let mut observed = Vec::new();
        for pair in fields[3].split(',') {
            let (value, flag) = pair.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "outcome pair must be `y:observed`".into(),
            })?;
            y.push(value.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: "bad outcome value".into(),
            })?);
            observed.push(flag == "1");
        }
        samples.push(AugmentedSample {
            sample_id,
            source_user,
            history: Vec::new(),
            treatment: TreatmentVector::new(ratios)?,
            outcome: OutcomeVector { y, observed },
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn rec(item: u64, positive: bool, position: u32) -> InteractionRecord {
        InteractionRecord {
            user: 1,
            item,
            positive,
            position,
        }
    }

    fn cmap(pairs: &[(u64, usize)], c: usize) -> CategoryMap {
        CategoryMap::new(pairs.iter().copied().collect::<HashMap<_, _>>(), c).unwrap()
    }

    #[test]
    fn split_trail_divides_with_ceiling() {
        let trail: Vec<_> = (0..8).map(|i| rec(i, true, i as u32)).collect();
        let (h, w) = split_trail(&trail, 0.5).unwrap();
        assert_eq!((h.len(), w.len()), (4, 4));

        let trail: Vec<_> = (0..5).map(|i| rec(i, true, i as u32)).collect();
        let (h, w) = split_trail(&trail, 0.5).unwrap();
        assert_eq!((h.len(), w.len()), (3, 2));
    }

    #[test]
    fn split_trail_skips_degenerate_trails() {
        let one = vec![rec(0, true, 0)];
        assert!(split_trail(&one, 0.5).is_none());
        // high lambda leaves no window
        let two: Vec<_> = (0..2).map(|i| rec(i, true, i as u32)).collect();
        assert!(split_trail(&two, 0.9).is_none());
        assert!(split_trail(&two, 0.5).is_some());
    }

    #[test]
    fn treatment_counts_all_exposures() {
        let map = cmap(&[(0, 0), (1, 0), (2, 1), (3, 2), (4, 2)], 3);
        let window: Vec<_> = (0..5).map(|i| rec(i, i % 2 == 0, i as u32)).collect();
        let t = compute_treatment(&window, &map, 3).unwrap();
        assert_eq!(t.ratios(), &[0.4, 0.2, 0.4]);
    }

    #[test]
    fn treatment_single_category() {
        let map = cmap(&[(0, 0), (1, 0)], 2);
        let window = vec![rec(0, true, 0), rec(1, false, 1)];
        let t = compute_treatment(&window, &map, 2).unwrap();
        assert_eq!(t.ratios(), &[1.0, 0.0]);
        assert!(compute_treatment(&[], &map, 2).is_err());
    }

    #[test]
    fn outcome_marks_unexposed_categories_unobserved() {
        let map = cmap(&[(0, 0), (1, 0), (2, 0), (3, 0), (4, 1)], 3);
        let window = vec![
            rec(0, true, 0),
            rec(1, true, 1),
            rec(2, false, 2),
            rec(3, false, 3),
            rec(4, false, 4),
        ];
        let o = compute_outcome(&window, &map, 3).unwrap();
        assert_eq!(o.y[0], 0.5);
        assert_eq!(o.y[1], 0.0);
        assert_eq!(o.observed, vec![true, true, false]);
    }

    #[test]
    fn outcome_all_positive_is_one() {
        let map = cmap(&[(0, 0)], 1);
        let window = vec![rec(0, true, 0), rec(0, true, 1)];
        let o = compute_outcome(&window, &map, 1).unwrap();
        assert_eq!(o.y[0], 1.0);
    }

    #[test]
    fn discretize_endpoints_and_vectors() {
        assert_eq!(discretize_ratio(0.0, 5), 0);
        assert_eq!(discretize_ratio(1.0, 5), 5);
        let t = TreatmentVector::new(vec![0.4, 0.2, 0.4]).unwrap();
        assert_eq!(DiscreteTreatment::from_ratios_apportioned(&t, 5).slots(), &[2, 1, 2]);
        // ground-truth ratios of a 5-item window from the worked example
        let t = TreatmentVector::new(vec![0.4, 0.0, 0.6]).unwrap();
        assert_eq!(DiscreteTreatment::from_ratios_apportioned(&t, 5).slots(), &[2, 0, 3]);
    }

    #[test]
    fn augmentation_skips_short_trails() {
        let map = cmap(&[(0, 0), (1, 1)], 2);
        let mut trails: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
        trails.insert(1, (0..4).map(|i| rec(i % 2, true, i as u32)).collect());
        trails.insert(2, vec![rec(0, true, 0)]);
        trails.insert(3, (0..6).map(|i| rec(i % 2, i % 3 == 0, i as u32)).collect());
        let (samples, skipped) = build_augmented_dataset(&trails, 0.5, &map).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(skipped, 1);
        assert!(samples.len() <= trails.len());
        for s in &samples {
            assert!(!s.history.is_empty());
            let max_hist = s.history.iter().map(|r| r.position).max().unwrap();
            assert!(s.history.len() + 1 <= trails[&s.source_user].len());
            assert!(max_hist < trails[&s.source_user].len() as u32);
        }
    }

    #[test]
    fn augmentation_with_no_eligible_users_errors() {
        let map = cmap(&[(0, 0)], 1);
        let mut trails: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
        trails.insert(1, vec![rec(0, true, 0)]);
        assert!(build_augmented_dataset(&trails, 0.5, &map).is_err());
    }

    #[test]
    fn propensity_concentrated_and_uniform() {
        let all_slot_two: Vec<DiscreteTreatment> =
            (0..10).map(|_| DiscreteTreatment::new(vec![2], 5).unwrap()).collect();
        let p = estimate_propensity(&all_slot_two, 1, 5, 0.01).unwrap();
        assert_eq!(p.get(0, 2), 1.0);
        for slot in [0u32, 1, 3, 4, 5] {
            assert_eq!(p.get(0, slot), 0.01, "empty slot clamps to the floor");
        }

        let uniform: Vec<DiscreteTreatment> =
            (0..6u32).map(|s| DiscreteTreatment::new(vec![s], 5).unwrap()).collect();
        let p = estimate_propensity(&uniform, 1, 5, 1e-12).unwrap();
        for slot in 0..=5 {
            assert!((p.get(0, slot) - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    fn sample_with(ratios: Vec<f64>, y: Vec<f64>, observed: Vec<bool>) -> AugmentedSample {
        AugmentedSample {
            sample_id: 0,
            source_user: 0,
            history: Vec::new(),
            treatment: TreatmentVector::new(ratios).unwrap(),
            outcome: OutcomeVector { y, observed },
        }
    }

    #[test]
    fn adrf_divides_slot_mean_by_propensity() {
        // three neighbors in slot 2 of category 0 with outcomes 0.2/0.4/0.6
        let neighbors: Vec<AugmentedSample> = [0.2, 0.4, 0.6]
            .iter()
            .map(|&y| sample_with(vec![0.4, 0.6], vec![y, 0.0], vec![true, true]))
            .collect();
        let refs: Vec<&AugmentedSample> = neighbors.iter().collect();
        let p = PropensityMatrix {
            p: vec![vec![0.5; 6]; 2],
            floor: 0.01,
        };
        let a = estimate_adrf(&refs, &p, 1.0, 0.01, 2, 5).unwrap();
        // independent check: fold the outcomes, then divide once
        let mean = [0.2f64, 0.4, 0.6].iter().sum::<f64>() / 3.0;
        let expected = mean / 0.5;
        assert!((a.get(0, 2) - expected).abs() < 1e-12);
        assert!((a.get(0, 2) - 0.8).abs() < 1e-12);

        // gamma = 0 leaves the plain within-slot mean
        let a0 = estimate_adrf(&refs, &p, 0.0, 0.01, 2, 5).unwrap();
        assert!((a0.get(0, 2) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn adrf_first_column_is_zero_and_nulls_fill() {
        let neighbors = vec![sample_with(vec![1.0, 0.0], vec![0.9, 0.0], vec![true, false])];
        let refs: Vec<&AugmentedSample> = neighbors.iter().collect();
        let p = estimate_propensity(
            &[DiscreteTreatment::new(vec![5, 0], 5).unwrap()],
            2,
            5,
            0.01,
        )
        .unwrap();
        let a = estimate_adrf(&refs, &p, 1.0, 0.07, 2, 5).unwrap();
        for cat in 0..2 {
            assert_eq!(a.get(cat, 0), 0.0);
            assert!(a.is_filled(cat, 0));
        }
        assert!(a.is_filled(0, 5));
        assert!(!a.is_filled(1, 3));
        assert_eq!(a.get(1, 3), 0.07);
        // category 1 outcome unobserved: no contribution anywhere
        assert!(!a.is_filled(1, 1));
    }

    #[test]
    fn mtef_reproduces_worked_example() {
        // C=3, K=5, backend slots (0,1,4), step 1, v_m=0.05:
        // category 0 rises 0 -> 0.36, category 1 rises by 0.1, category 2
        // steps into an unfilled cell and falls back to v_m.
        let mut a = vec![vec![0.01; 6]; 3];
        let mut filled = vec![vec![false; 6]; 3];
        for cat in 0..3 {
            a[cat][0] = 0.0;
            filled[cat][0] = true;
        }
        a[0][1] = 0.36;
        filled[0][1] = true;
        a[1][1] = 0.1;
        filled[1][1] = true;
        a[1][2] = 0.2;
        filled[1][2] = true;
        a[2][4] = 0.5;
        filled[2][4] = true;
        let adrf = AdrfMatrix::from_parts(a, filled, 0.01);
        let t0 = DiscreteTreatment::new(vec![0, 1, 4], 5).unwrap();
        let m = compute_mtef(&adrf, &t0, 1, 0.05).unwrap();
        assert_eq!(m.values(), &[0.36, 0.1, 0.05]);
    }

    #[test]
    fn mtef_flat_row_gives_zero_and_boundary_gives_null() {
        let a = vec![vec![0.25; 6]];
        let filled = vec![vec![true; 6]];
        let adrf = AdrfMatrix::from_parts(a.clone(), filled.clone(), 0.01);
        let t0 = DiscreteTreatment::new(vec![2], 5).unwrap();
        let m = compute_mtef(&adrf, &t0, 1, 0.05).unwrap();
        assert_eq!(m.values(), &[0.0]);

        let adrf = AdrfMatrix::from_parts(a, filled, 0.01);
        let at_edge = DiscreteTreatment::new(vec![5], 5).unwrap();
        let m = compute_mtef(&adrf, &at_edge, 1, 0.05).unwrap();
        assert_eq!(m.values(), &[0.05], "step off the grid falls back to v_m");
    }

    #[test]
    fn mtef_equals_discrete_difference_where_filled() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let k = 5u32;
            let c = 3usize;
            let mut a = vec![vec![0.0; k as usize + 1]; c];
            let mut filled = vec![vec![false; k as usize + 1]; c];
            for cat in 0..c {
                filled[cat][0] = true;
                for slot in 1..=k as usize {
                    if rng.gen_bool(0.7) {
                        a[cat][slot] = rng.gen_range(0.0..1.0);
                        filled[cat][slot] = true;
                    } else {
                        a[cat][slot] = 0.01;
                    }
                }
            }
            let adrf = AdrfMatrix::from_parts(a.clone(), filled.clone(), 0.01);
            let slots: Vec<u32> = (0..c).map(|_| rng.gen_range(0..=k)).collect();
            let t0 = DiscreteTreatment::new(slots.clone(), k).unwrap();
            let m = compute_mtef(&adrf, &t0, 1, 0.05).unwrap();
            for cat in 0..c {
                let s = slots[cat] as usize;
                if slots[cat] + 1 <= k && filled[cat][s] && filled[cat][s + 1] {
                    assert_eq!(m.values()[cat], a[cat][s + 1] - a[cat][s]);
                } else {
                    assert_eq!(m.values()[cat], 0.05);
                }
            }
        }
    }

    #[test]
    fn adrf_estimate_is_consistent_when_propensity_is_one() {
        // Known logging policy: every sample receives the fixed composition
        // (2,2,1) of K=5, so the logged slots have true propensity 1 and the
        // gamma=1 estimate must converge to the true per-slot CTR.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let true_rates = [0.55, 0.3, 0.8];
        let window = 10usize;
        let counts = [4usize, 4, 2];
        let n_samples = 5000;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut y = Vec::new();
            let mut observed = Vec::new();
            for cat in 0..3 {
                let clicks = (0..counts[cat]).filter(|_| rng.gen_bool(true_rates[cat])).count();
                y.push(clicks as f64 / counts[cat] as f64);
                observed.push(true);
            }
            let ratios: Vec<f64> = counts.iter().map(|&n| n as f64 / window as f64).collect();
            samples.push(sample_with(ratios, y, observed));
        }
        let refs: Vec<&AugmentedSample> = samples.iter().collect();
        // true propensities: 1.0 at the logged slot of each category
        let mut p = vec![vec![1e-6; 6]; 3];
        p[0][2] = 1.0;
        p[1][2] = 1.0;
        p[2][1] = 1.0;
        let propensity = PropensityMatrix { p, floor: 1e-6 };
        let a = estimate_adrf(&refs, &propensity, 1.0, 0.01, 3, 5).unwrap();
        let logged_slots = [2u32, 2, 1];
        let mae: f64 = (0..3)
            .map(|cat| (a.get(cat, logged_slots[cat]) - true_rates[cat]).abs())
            .sum::<f64>()
            / 3.0;
        assert!(mae < 0.02, "mean absolute error {mae} too large");
    }

    #[test]
    fn samples_round_trip_through_text() {
        let samples = vec![
            sample_with(vec![0.25, 0.75], vec![0.5, 0.125], vec![true, true]),
            sample_with(vec![1.0, 0.0], vec![1.0 / 3.0, 0.0], vec![true, false]),
        ];
        let mut buf = Vec::new();
        write_samples(&samples, &mut buf).unwrap();
        let loaded = read_samples(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, got) in samples.iter().zip(&loaded) {
            assert_eq!(orig.treatment, got.treatment);
            assert_eq!(orig.outcome, got.outcome);
        }
    }

    proptest! {
        #[test]
        fn treatment_ratios_sum_to_one(
            cats in proptest::collection::vec(0usize..4, 1..60),
        ) {
            let map = cmap(&[(0, 0), (1, 1), (2, 2), (3, 3)], 4);
            let window: Vec<InteractionRecord> = cats
                .iter()
                .enumerate()
                .map(|(i, &c)| rec(c as u64, i % 3 == 0, i as u32))
                .collect();
            let t = compute_treatment(&window, &map, 4).unwrap();
            let sum: f64 = t.ratios().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn outcome_stays_in_unit_interval(
            window in proptest::collection::vec((0u64..4, any::<bool>()), 1..60),
        ) {
            let map = cmap(&[(0, 0), (1, 1), (2, 2), (3, 3)], 4);
            let records: Vec<InteractionRecord> = window
                .iter()
                .enumerate()
                .map(|(i, &(item, positive))| rec(item, positive, i as u32))
                .collect();
            let o = compute_outcome(&records, &map, 4).unwrap();
            for cat in 0..4 {
                if o.observed[cat] {
                    prop_assert!((0.0..=1.0).contains(&o.y[cat]));
                }
            }
        }

        #[test]
        fn apportioned_slots_sum_to_k(
            weights in proptest::collection::vec(1u32..50, 1..8),
            k in 1u32..12,
        ) {
            let total: u32 = weights.iter().sum();
            let ratios: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
            let t = TreatmentVector::new(ratios).unwrap();
            let d = DiscreteTreatment::from_ratios_apportioned(&t, k);
            prop_assert_eq!(d.total(), k);
            for &s in d.slots() {
                prop_assert!(s <= k);
            }
        }

        #[test]
        fn propensity_rows_sum_to_one_before_clamping(
            slots in proptest::collection::vec(0u32..6, 1..40),
        ) {
            let treatments: Vec<DiscreteTreatment> = slots
                .iter()
                .map(|&s| DiscreteTreatment::new(vec![s], 5).unwrap())
                .collect();
            let p = estimate_propensity(&treatments, 1, 5, 1e-12).unwrap();
            let sum: f64 = (0..=5).map(|s| p.get(0, s)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for s in 0..=5 {
                prop_assert!(p.get(0, s) >= 1e-12);
            }
        }

        #[test]
        fn adrf_debiasing_never_shrinks_filled_cells(
            ys in proptest::collection::vec(0.0f64..1.0, 1..30),
            slot in 1u32..6,
            prop_value in 0.05f64..1.0,
        ) {
            let ratio = slot as f64 / 5.0;
            let rest = 1.0 - ratio;
            let neighbors: Vec<AugmentedSample> = ys
                .iter()
                .map(|&y| sample_with(vec![ratio, rest], vec![y, 0.0], vec![true, true]))
                .collect();
            let refs: Vec<&AugmentedSample> = neighbors.iter().collect();
            let p = PropensityMatrix { p: vec![vec![prop_value; 6]; 2], floor: 0.01 };
            let a0 = estimate_adrf(&refs, &p, 0.0, 0.01, 2, 5).unwrap();
            let a1 = estimate_adrf(&refs, &p, 1.0, 0.01, 2, 5).unwrap();
            // propensities never exceed 1, so gamma=1 can only raise the cell
            prop_assert!(a1.get(0, slot) >= a0.get(0, slot) - 1e-12);
            prop_assert!((0.0..=1.0).contains(&a0.get(0, slot)));
        }
    }
}
