//! Logged-feedback ingestion, splits, and side information.
//!
//! Dataset files are UTF-8, tab-separated, one exposure per line:
//! `user_id <TAB> item_id <TAB> label [<TAB> position]` with label 1 for a
//! click and 0 for an exposed-but-unclicked item. Position orders a user's
//! trail; when the column is absent it defaults to the line's index within
//! that user's records, so file order is the trail order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One logged exposure with its binary click label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: UserId,
    pub item: ItemId,
    /// true = click / positive feedback, false = exposed but negative.
    pub positive: bool,
    /// Ordering of this exposure within the user's trail.
    pub position: u32,
}

/// Train (biased log) plus validation/test carved from the unbiased part.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<InteractionRecord>,
    pub valid: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
}

/// Total assignment of items to dense category indices `0..num_categories`.
#[derive(Debug, Clone)]
pub struct CategoryMap {
    assignment: HashMap<ItemId, usize>,
    num_categories: usize,
}

impl CategoryMap {
    pub fn new(assignment: HashMap<ItemId, usize>, num_categories: usize) -> Result<Self> {
        for (&item, &c) in &assignment {
            if c >= num_categories {
                return Err(Error::Domain(format!(
                    "item {item} assigned category {c} >= C={num_categories}"
                )));
            }
        }
        Ok(CategoryMap {
            assignment,
            num_categories,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Category of `item`; the map is total over the catalog, so a miss is an error.
    pub fn category(&self, item: ItemId) -> Result<usize> {
        self.assignment
            .get(&item)
            .copied()
            .ok_or(Error::Uncategorized(item))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Items in ascending id order, with their categories.
    pub fn iter_sorted(&self) -> Vec<(ItemId, usize)> {
        let mut v: Vec<(ItemId, usize)> = self.assignment.iter().map(|(&i, &c)| (i, c)).collect();
        v.sort_unstable();
        v
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (item, c) in self.iter_sorted() {
            writeln!(w, "{item}\t{c}")?;
        }
        Ok(())
    }
}

/// Training interaction counts and the bottom-90% unpopularity flag.
#[derive(Debug, Clone)]
pub struct PopularityTable {
    counts: HashMap<ItemId, u64>,
    /// Largest count still inside the bottom 90% of the catalog.
    threshold: u64,
}

impl PopularityTable {
    pub fn count(&self, item: ItemId) -> u64 {
        self.counts.get(&item).copied().unwrap_or(0)
    }

    /// Items at or below the threshold count as unpopular, so the flag is
    /// monotone in count and ties are inclusive.
    pub fn is_unpopular(&self, item: ItemId) -> bool {
        self.count(item) <= self.threshold
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }
}

/// Parses a tab-separated interaction stream in file order.
///
/// With `has_position` false the position column must be absent and each
/// record gets the next index within its user's trail.
pub fn parse_interactions(reader: impl BufRead, has_position: bool) -> Result<Vec<InteractionRecord>> {
    let mut records = Vec::new();
    let mut per_user: HashMap<UserId, u32> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = if has_position { 4 } else { 3 };
        if fields.len() != expected {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {expected} tab-separated fields, got {}", fields.len()),
            });
        }
        let user: UserId = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad user id `{}`", fields[0]),
        })?;
        let item: ItemId = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad item id `{}`", fields[1]),
        })?;
        let positive = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Domain(format!(
                    "line {lineno}: label `{other}` outside {{0,1}}"
                )))
            }
        };
        let position = if has_position {
            fields[3].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad position `{}`", fields[3]),
            })?
        } else {
            let counter = per_user.entry(user).or_insert(0);
            let p = *counter;
            *counter += 1;
            p
        };
        records.push(InteractionRecord {
            user,
            item,
            positive,
            position,
        });
    }
    Ok(records)
}

/// Emits records in the same format `parse_interactions` reads, so a
/// parse-write cycle round-trips exactly.
pub fn write_interactions(
    records: &[InteractionRecord],
    with_position: bool,
    mut w: impl Write,
) -> Result<()> {
    for r in records {
        let label = if r.positive { 1 } else { 0 };
        if with_position {
            writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, label, r.position)?;
        } else {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, label)?;
        }
    }
    Ok(())
}

/// User-stratified random split of the unbiased records into (valid, test).
///
/// `ratio` is the validation fraction; each user's records are shuffled and
/// the first `round(ratio * n)` go to validation. Deterministic under `seed`.
pub fn split_unbiased(
    records: &[InteractionRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
    if records.is_empty() {
        return Err(Error::Domain("cannot split an empty record set".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!(
            "split ratio must lie strictly inside (0,1), got {ratio}"
        )));
    }
    let mut by_user: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user).or_default().push(*r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (_, mut recs) in by_user {
        recs.shuffle(&mut rng);
        let n_valid = (ratio * recs.len() as f64).round() as usize;
        for (i, r) in recs.into_iter().enumerate() {
            if i < n_valid {
                valid.push(r);
            } else {
                test.push(r);
            }
        }
    }
    Ok((valid, test))
}

/// Counts training exposures per item (positives and negatives alike) and
/// flags the bottom 90% of the catalog as unpopular.
///
/// Catalog items absent from training count as 0. The threshold is the
/// `ceil(0.9 * |catalog|)`-th smallest count; ties at the threshold are
/// unpopular.
pub fn build_popularity(train: &[InteractionRecord], catalog: &BTreeSet<ItemId>) -> PopularityTable {
    let mut counts: HashMap<ItemId, u64> = HashMap::new();
    for r in train {
        *counts.entry(r.item).or_insert(0) += 1;
    }
    counts.retain(|item, _| catalog.contains(item));
    let mut sorted: Vec<u64> = catalog.iter().map(|&i| counts.get(&i).copied().unwrap_or(0)).collect();
    sorted.sort_unstable();
    let threshold = if sorted.is_empty() {
        0
    } else {
        let idx = ((0.9 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[idx - 1]
    };
    PopularityTable { counts, threshold }
}

/// Loads explicit category labels (`item_id <TAB> category_label`), remapping
/// labels to dense indices in first-seen order.
pub fn load_categories(reader: impl BufRead) -> Result<CategoryMap> {
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut assignment: HashMap<ItemId, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 2 tab-separated fields, got {}", fields.len()),
            });
        }
        let item: ItemId = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad item id `{}`", fields[0]),
        })?;
        let next = label_index.len();
        let cat = *label_index.entry(fields[1].to_string()).or_insert(next);
        if let Some(&existing) = assignment.get(&item) {
            if existing != cat {
                return Err(Error::Domain(format!(
                    "line {lineno}: item {item} re-assigned from category {existing} to {cat}"
                )));
            }
        } else {
            assignment.insert(item, cat);
        }
    }
    let num_categories = label_index.len();
    CategoryMap::new(assignment, num_categories)
}

/// Groups records into per-user trails sorted by position.
pub fn trails(records: &[InteractionRecord]) -> BTreeMap<UserId, Vec<InteractionRecord>> {
    let mut map: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.user).or_default().push(*r);
    }
    for recs in map.values_mut() {
        recs.sort_by_key(|r| r.position);
    }
    map
}

/// Distinct items mentioned in any record list.
pub fn catalog_of(record_sets: &[&[InteractionRecord]]) -> BTreeSet<ItemId> {
    let mut set = BTreeSet::new();
    for records in record_sets {
        for r in *records {
            set.insert(r.item);
        }
    }
    set
}
