//! Offline evaluation against unbiased test feedback.
//!
//! Accuracy is measured with recall and NDCG at a cutoff; serendipity with
//! recall restricted to unexpected items (category outside the user's top-3
//! history categories) and to unpopular items (bottom 90% by training
//! count). Users without the relevant positives are excluded from a metric's
//! macro-average rather than scored zero.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use crate::data::{CategoryMap, InteractionRecord, PopularityTable};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Recall,
    Ndcg,
    Rue,
    Rup,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Recall, Metric::Ndcg, Metric::Rue, Metric::Rup];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
            Metric::Rue => "rue",
            Metric::Rup => "rup",
        };
        write!(f, "{name}")
    }
}

/// Macro-averaged metric values with per-user detail and inclusion counts.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    /// (metric, cutoff) -> macro average over included users.
    pub values: BTreeMap<(Metric, usize), f64>,
    /// (metric, cutoff) -> number of users the average covers.
    pub included: BTreeMap<(Metric, usize), usize>,
    /// (metric, cutoff) -> per-user values, ascending user id.
    pub per_user: BTreeMap<(Metric, usize), Vec<(UserId, f64)>>,
    /// Users that had recommendations but no test records.
    pub skipped_users: usize,
}

impl MetricReport {
    pub fn get(&self, metric: Metric, cutoff: usize) -> Option<f64> {
        self.values.get(&(metric, cutoff)).copied()
    }

    /// Aligned human-readable table.
    pub fn render_table(&self, cutoffs: &[usize]) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "metric"));
        for &k in cutoffs {
            out.push_str(&format!("{:>12}", format!("@{k}")));
            out.push_str(&format!("{:>8}", "users"));
        }
        out.push('\n');
        for metric in Metric::ALL {
            out.push_str(&format!("{:<8}", metric.to_string()));
            for &k in cutoffs {
                match self.get(metric, k) {
                    Some(v) => out.push_str(&format!("{v:>12.6}")),
                    None => out.push_str(&format!("{:>12}", "-")),
                }
                let n = self.included.get(&(metric, k)).copied().unwrap_or(0);
                out.push_str(&format!("{n:>8}"));
            }
            out.push('\n');
        }
        if self.skipped_users > 0 {
            out.push_str(&format!("skipped users without test data: {}\n", self.skipped_users));
        }
        out
    }

    /// Flat `metric.cutoff = value` document.
    pub fn write_kv(&self, mut w: impl Write) -> Result<()> {
        for (&(metric, cutoff), &value) in &self.values {
            writeln!(w, "{metric}.{cutoff} = {value:.6}")?;
        }
        for (&(metric, cutoff), &n) in &self.included {
            writeln!(w, "{metric}.{cutoff}.users = {n}")?;
        }
        writeln!(w, "skipped_users = {}", self.skipped_users)?;
        Ok(())
    }
}

fn top_k_set(list: &[ItemId], k: usize) -> HashSet<ItemId> {
    list.iter().take(k).copied().collect()
}

/// Fraction of the test positives present in the top-K; `None` when the user
/// has no positives and is excluded.
pub fn recall_at_k(list: &[ItemId], positives: &HashSet<ItemId>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let top = top_k_set(list, k);
    let hits = positives.iter().filter(|i| top.contains(i)).count();
    Some(hits as f64 / positives.len() as f64)
}

/// Binary-gain NDCG: DCG sums 1/log2(rank+1) over hits in the top-K, the
/// ideal puts one positive at each of the first min(K, |positives|) ranks.
pub fn ndcg_at_k(list: &[ItemId], positives: &HashSet<ItemId>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let mut dcg = 0.0;
    for (idx, item) in list.iter().take(k).enumerate() {
        if positives.contains(item) {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal_ranks = k.min(positives.len());
    let idcg: f64 = (0..ideal_ranks).map(|idx| 1.0 / ((idx + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// The user's top-3 history categories by positive-interaction count, ties
/// broken by ascending category index.
pub fn top_history_categories(
    history: &[InteractionRecord],
    categories: &CategoryMap,
) -> Result<HashSet<usize>> {
    let c = categories.num_categories();
    let mut counts = vec![0usize; c];
    for r in history {
        if r.positive {
            counts[categories.category(r.item)?] += 1;
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&cat| (std::cmp::Reverse(counts[cat]), cat));
    Ok(order.into_iter().take(3).collect())
}

/// Recall over unexpected positives only: positives whose category is not
/// among the user's top-3 history categories. `None` excludes the user
/// (no unexpected positives, or every category is expected when C <= 3).
pub fn rue_at_k(
    list: &[ItemId],
    positives: &HashSet<ItemId>,
    history: &[InteractionRecord],
    categories: &CategoryMap,
    k: usize,
) -> Result<Option<f64>> {
    if categories.num_categories() <= 3 {
        return Ok(None);
    }
    let expected = top_history_categories(history, categories)?;
    let mut unexpected = HashSet::new();
    for &item in positives {
        if !expected.contains(&categories.category(item)?) {
            unexpected.insert(item);
        }
    }
    Ok(recall_at_k(list, &unexpected, k))
}

/// Recall over unpopular positives only; `None` excludes the user.
pub fn rup_at_k(
    list: &[ItemId],
    positives: &HashSet<ItemId>,
    popularity: &PopularityTable,
    k: usize,
) -> Option<f64> {
    let unpopular: HashSet<ItemId> = positives
        .iter()
        .copied()
        .filter(|&i| popularity.is_unpopular(i))
        .collect();
    recall_at_k(list, &unpopular, k)
}

/// Macro-averages all four metrics over the recommended users.
///
/// `rue_categories` carries explicit item labels when the dataset has them;
/// without labels (or with C <= 3, where every category is expected) the
/// unexpected-recall column is reported over zero users.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    recommendations: &BTreeMap<UserId, Vec<ItemId>>,
    test: &[InteractionRecord],
    history: &BTreeMap<UserId, Vec<InteractionRecord>>,
    rue_categories: Option<&CategoryMap>,
    popularity: &PopularityTable,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    if let Some(categories) = rue_categories {
        if categories.num_categories() <= 3 {
            eprintln!(
                "warning: only {} categories, every category is a top-3 history category; \
                 unexpected-recall is degenerate and reported over zero users",
                categories.num_categories()
            );
        }
    }
    let mut test_by_user: BTreeMap<UserId, HashSet<ItemId>> = BTreeMap::new();
    let mut users_with_test: HashSet<UserId> = HashSet::new();
    for r in test {
        users_with_test.insert(r.user);
        if r.positive {
            test_by_user.entry(r.user).or_default().insert(r.item);
        }
    }
    let max_cutoff = cutoffs.iter().copied().max().unwrap_or(0);
    let mut report = MetricReport::default();
    let empty_history: Vec<InteractionRecord> = Vec::new();
    for (&user, list) in recommendations {
        if !users_with_test.contains(&user) {
            report.skipped_users += 1;
            continue;
        }
        if list.len() < max_cutoff {
            return Err(Error::Domain(format!(
                "user {user} has a {}-item list, cutoff {max_cutoff} needs more",
                list.len()
            )));
        }
        let positives = test_by_user.get(&user).cloned().unwrap_or_default();
        let user_history = history.get(&user).unwrap_or(&empty_history);
        for &k in cutoffs {
            let mut push = |metric: Metric, value: Option<f64>| {
                if let Some(v) = value {
                    report.per_user.entry((metric, k)).or_default().push((user, v));
                }
            };
            push(Metric::Recall, recall_at_k(list, &positives, k));
            push(Metric::Ndcg, ndcg_at_k(list, &positives, k));
            let rue = match rue_categories {
                Some(categories) => rue_at_k(list, &positives, user_history, categories, k)?,
                None => None,
            };
            push(Metric::Rue, rue);
            push(Metric::Rup, rup_at_k(list, &positives, popularity, k));
        }
    }
    for (&key, users) in &report.per_user {
        let sum: f64 = users.iter().map(|&(_, v)| v).sum();
        report.included.insert(key, users.len());
        report.values.insert(key, sum / users.len() as f64);
    }
    for metric in Metric::ALL {
        for &k in cutoffs {
            report.included.entry((metric, k)).or_insert(0);
        }
    }
    Ok(report)
}
