//! Matrix-factorization backend: training, scoring, top-N lists, item
//! clustering, and nearest-sample retrieval over the learned embeddings.
//!
//! The trainer is pointwise binary cross-entropy over logged positives plus
//! `neg_ratio` uniformly sampled unobserved items per positive, single
//! threaded and bit-deterministic under its seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::data::CategoryMap;
use crate::error::{Error, Result};
use crate::{ItemId, UserId};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Backend training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension, at most 512.
    pub d: usize,
    /// Unobserved items sampled per positive.
    pub neg_ratio: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            neg_ratio: 4,
            learning_rate: 0.05,
            epochs: 30,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Frozen user/item embeddings. Immutable after training; safe to share.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    dim: usize,
    users: BTreeMap<UserId, Vec<f64>>,
    items: BTreeMap<ItemId, Vec<f64>>,
}

/// Per-epoch average training loss, for convergence checks.
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy on the logit scale.
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

impl ModelState {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_vector(&self, user: UserId) -> Result<&[f64]> {
        self.users
            .get(&user)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownUser(user))
    }

    pub fn item_vector(&self, item: ItemId) -> Result<&[f64]> {
        self.items
            .get(&item)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownItem(item))
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.keys().copied()
    }

    /// Inner product of the user and item embeddings.
    pub fn score(&self, user: UserId, item: ItemId) -> Result<f64> {
        Ok(dot(self.user_vector(user)?, self.item_vector(item)?))
    }

    /// Top `n` candidates by descending score, ties broken by ascending item id.
    pub fn top_n(&self, user: UserId, candidates: &[ItemId], n: usize) -> Result<Vec<ItemId>> {
        if n > candidates.len() {
            return Err(Error::Domain(format!(
                "requested top-{n} from only {} candidates",
                candidates.len()
            )));
        }
        let mut scored: Vec<(f64, ItemId)> = candidates
            .iter()
            .map(|&item| self.score(user, item).map(|s| (s, item)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(n).map(|(_, item)| item).collect())
    }

    /// Text serialization: a header line `d n_users n_items`, then one row per
    /// embedding. Floats use the shortest round-trippable form.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}\t{}\t{}", self.dim, self.users.len(), self.items.len())?;
        for (id, vec) in &self.users {
            write!(w, "u\t{id}")?;
            for x in vec {
                write!(w, "\t{x:?}")?;
            }
            writeln!(w)?;
        }
        for (id, vec) in &self.items {
            write!(w, "i\t{id}")?;
            for x in vec {
                write!(w, "\t{x:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from(reader: impl BufRead) -> Result<ModelState> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty model file".into(),
        })??;
        let parts: Vec<&str> = header.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: 1,
                msg: "model header must be `d n_users n_items`".into(),
            });
        }
        let dim: usize = parts[0].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: "bad dimension".into(),
        })?;
        let mut users = BTreeMap::new();
        let mut items = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", dim + 2, fields.len()),
                });
            }
            let id: u64 = fields[1].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: "bad id".into(),
            })?;
            let vec: Vec<f64> = fields[2..]
                .iter()
                .map(|f| {
                    f.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: "bad float".into(),
                    })
                })
                .collect::<Result<_>>()?;
            match fields[0] {
                "u" => {
                    users.insert(id, vec);
                }
                "i" => {
                    items.insert(id, vec);
                }
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown row kind `{other}`"),
                    })
                }
            }
        }
        Ok(ModelState { dim, users, items })
    }
}

/// Trains the factorization model on (user, item) positives.
///
/// Every catalog item receives an embedding; users come from the positives.
/// With `epochs = 0` the seeded random initialization is returned unchanged.
/// Aborts on a non-finite epoch loss, warns if the loss rises across the
/// final three epochs.
pub fn train_mf(
    positives: &[(UserId, ItemId)],
    catalog: &BTreeSet<ItemId>,
    config: &TrainConfig,
) -> Result<(ModelState, TrainStats)> {
    if config.d == 0 || config.d > 512 {
        return Err(Error::Config(format!(
            "embedding dimension must lie in 1..=512, got {}",
            config.d
        )));
    }
    for &(_, item) in positives {
        if !catalog.contains(&item) {
            return Err(Error::UnknownItem(item));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let user_ids: BTreeSet<UserId> = positives.iter().map(|&(u, _)| u).collect();
    let mut users: BTreeMap<UserId, Vec<f64>> = BTreeMap::new();
    for &u in &user_ids {
        users.insert(u, (0..config.d).map(|_| rng.gen_range(-0.1..0.1)).collect());
    }
    let mut items: BTreeMap<ItemId, Vec<f64>> = BTreeMap::new();
    for &i in catalog {
        items.insert(i, (0..config.d).map(|_| rng.gen_range(-0.1..0.1)).collect());
    }

    let mut positive_sets: HashMap<UserId, HashSet<ItemId>> = HashMap::new();
    for &(u, i) in positives {
        positive_sets.entry(u).or_default().insert(i);
    }
    let item_list: Vec<ItemId> = catalog.iter().copied().collect();

    let lr = config.learning_rate;
    let l2 = config.l2;
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..positives.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for &idx in &order {
            let (u, pos_item) = positives[idx];
            let pos_set = &positive_sets[&u];
            let step = |users: &mut BTreeMap<UserId, Vec<f64>>,
                            items: &mut BTreeMap<ItemId, Vec<f64>>,
                            item: ItemId,
                            y: f64|
             -> f64 {
                let uv = users.get(&u).expect("trained user").clone();
                let iv = items.get_mut(&item).expect("catalog item");
                let z = dot(&uv, iv);
                let loss = bce_with_logits(z, y);
                let g = sigmoid(z) - y;
                let um = users.get_mut(&u).expect("trained user");
                for k in 0..config.d {
                    let du = g * iv[k] + l2 * uv[k];
                    let di = g * uv[k] + l2 * iv[k];
                    um[k] -= lr * du;
                    iv[k] -= lr * di;
                }
                loss
            };
            loss_sum += step(&mut users, &mut items, pos_item, 1.0);
            loss_count += 1;
            if pos_set.len() < item_list.len() {
                for _ in 0..config.neg_ratio {
                    let neg = loop {
                        let cand = item_list[rng.gen_range(0..item_list.len())];
                        if !pos_set.contains(&cand) {
                            break cand;
                        }
                    };
                    loss_sum += step(&mut users, &mut items, neg, 0.0);
                    loss_count += 1;
                }
            }
        }
        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {epoch_loss} at epoch {epoch} (lr={lr}, l2={l2})"
            )));
        }
        stats.epoch_losses.push(epoch_loss);
    }
    let n = stats.epoch_losses.len();
    if n >= 3 {
        let tail = &stats.epoch_losses[n - 3..];
        if !(tail[0] >= tail[1] && tail[1] >= tail[2]) {
            eprintln!(
                "warning: training loss rose over the final epochs: {:.6} -> {:.6} -> {:.6}",
                tail[0], tail[1], tail[2]
            );
        }
    }
    Ok((
        ModelState {
            dim: config.d,
            users,
            items,
        },
        stats,
    ))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means over the item embeddings: k-means++ seeding, Euclidean distance,
/// at most 100 iterations or a total centroid shift below 1e-6. An empty
/// cluster is re-seeded with the point farthest from its assigned centroid.
pub fn cluster_items(model: &ModelState, c: usize, seed: u64) -> Result<CategoryMap> {
    let ids: Vec<ItemId> = model.items.keys().copied().collect();
    let points: Vec<&Vec<f64>> = model.items.values().collect();
    if c == 0 {
        return Err(Error::Domain("cluster count must be at least 1".into()));
    }
    if c > ids.len() {
        return Err(Error::Domain(format!(
            "cannot form {c} clusters from {} items",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < c {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|cen| sq_dist(p, cen))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            // all remaining distances zero: duplicate points, pick uniformly
            Err(_) => rng.gen_range(0..points.len()),
        };
        centroids.push(points[next].clone());
    }

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..100 {
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, cen) in centroids.iter().enumerate() {
                let d = sq_dist(p, cen);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assignment[pi] = best;
        }
        let mut sums = vec![vec![0.0; model.dim]; c];
        let mut counts = vec![0usize; c];
        for (pi, p) in points.iter().enumerate() {
            counts[assignment[pi]] += 1;
            for k in 0..model.dim {
                sums[assignment[pi]][k] += p[k];
            }
        }
        let mut claimed: HashSet<usize> = HashSet::new();
        for ci in 0..c {
            if counts[ci] == 0 {
                // farthest point from its current centroid takes over the empty cluster
                let mut far_pi = None;
                let mut far_d = -1.0;
                for (pi, p) in points.iter().enumerate() {
                    if claimed.contains(&pi) || counts[assignment[pi]] <= 1 {
                        continue;
                    }
                    let d = sq_dist(p, &centroids[assignment[pi]]);
                    if d > far_d {
                        far_d = d;
                        far_pi = Some(pi);
                    }
                }
                if let Some(pi) = far_pi {
                    claimed.insert(pi);
                    counts[assignment[pi]] -= 1;
                    for k in 0..model.dim {
                        sums[assignment[pi]][k] -= points[pi][k];
                    }
                    assignment[pi] = ci;
                    counts[ci] = 1;
                    for k in 0..model.dim {
                        sums[ci][k] = points[pi][k];
                    }
                }
            }
        }
        let mut shift = 0.0;
        for ci in 0..c {
            if counts[ci] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[ci].iter().map(|s| s / counts[ci] as f64).collect();
            shift += sq_dist(&mean, &centroids[ci]).sqrt();
            centroids[ci] = mean;
        }
        if shift < 1e-6 {
            break;
        }
    }
    // final assignment against converged centroids
    let mut map = HashMap::with_capacity(ids.len());
    for (pi, p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, cen) in centroids.iter().enumerate() {
            let d = sq_dist(p, cen);
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        map.insert(ids[pi], best);
    }
    CategoryMap::new(map, c)
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Indices of the `k` samples most cosine-similar to `query`, descending,
/// ties broken by ascending sample index. Zero-norm samples score 0.
pub fn nearest_samples(query: &[f64], samples: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::Domain("zero-norm query vector".into()));
    }
    if k > samples.len() {
        return Err(Error::Domain(format!(
            "requested {k} neighbors from {} samples",
            samples.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let sn = norm(s);
            let sim = if sn == 0.0 { 0.0 } else { dot(query, s) / (qn * sn) };
            (sim, idx)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, idx)| idx).collect())
}
