//! End-to-end orchestration: ingest -> split -> train -> cluster -> augment
//! -> estimate -> plan -> evaluate, with content-hashed stage artifacts.
//!
//! Every stage derives a key from the exact inputs and parameters it depends
//! on. Artifacts live under `<out_dir>/cache/<stage>.<key>...`; a key hit is
//! loaded instead of recomputed, which is what lets a sweep share upstream
//! work across grid points. With `resume` set, a run refuses to proceed if a
//! previous manifest in the same directory recorded a different key for a
//! stage it is about to run.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{cluster_items, nearest_samples, train_mf, ModelState};
use crate::causal::{
    build_augmented_dataset, compute_mtef, estimate_adrf, estimate_propensity, read_samples,
    write_samples, AdrfMatrix, AugmentedSample, DiscreteTreatment, MtefVector, PropensityMatrix,
    TreatmentVector,
};
use crate::config::{Policy, RunConfig};
use crate::data::{
    build_popularity, catalog_of, load_categories, parse_interactions, split_unbiased, trails,
    write_interactions, CategoryMap, InteractionRecord, PopularityTable,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, MetricReport};
use crate::planner::{allocate_list, best_treatment, best_treatment_aggregate, rerank_mtef};
use crate::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pseudo-users carrying sample histories are registered above this id.
pub const PSEUDO_USER_BASE: u64 = 1 << 62;

/// FNV-1a over the joined parts; stable across runs and platforms.
pub fn content_hash(parts: &[&str]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for byte in part.as_bytes() {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        hash ^= 0x1f;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    format!("{hash:016x}")
}

fn hash_bytes(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in bytes {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRun {
    pub name: String,
    pub hash: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    stage: Vec<StageRun>,
}

/// Everything a planner policy needs about one user.
#[derive(Debug, Clone)]
pub struct UserEstimates {
    pub user: UserId,
    pub t0: DiscreteTreatment,
    pub propensity: PropensityMatrix,
    pub adrf: AdrfMatrix,
    pub mtef: MtefVector,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: MetricReport,
    pub stages: Vec<StageRun>,
    pub out_dir: PathBuf,
}

pub struct Pipeline {
    config: RunConfig,
    cache_dir: PathBuf,
    resume: bool,
    previous: Manifest,
    stages: Vec<StageRun>,
    train_records: Vec<InteractionRecord>,
    unbiased_records: Vec<InteractionRecord>,
    catalog: BTreeSet<ItemId>,
    train_file_hash: String,
    unbiased_file_hash: String,
    categories_file_hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig, resume: bool) -> Result<Self> {
        let cache_dir = config.run.out_dir.join("cache");
        Self::with_cache_dir(config, cache_dir, resume)
    }

    /// Uses an explicit artifact cache, shared across sweep points.
    pub fn with_cache_dir(config: RunConfig, cache_dir: PathBuf, resume: bool) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&cache_dir)?;
        fs::create_dir_all(&config.run.out_dir)?;
        let train_bytes = fs::read(&config.data.train).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", config.data.train.display()))
        })?;
        let unbiased_bytes = fs::read(&config.data.unbiased).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", config.data.unbiased.display()))
        })?;
        let categories_file_hash = match &config.data.categories {
            Some(path) => hash_bytes(&fs::read(path).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", path.display()))
            })?),
            None => "none".to_string(),
        };
        let train_records = parse_interactions(BufReader::new(&train_bytes[..]), config.data.has_position)
            .map_err(|e| e.in_stage("ingest"))?;
        let unbiased_records =
            parse_interactions(BufReader::new(&unbiased_bytes[..]), config.data.has_position)
                .map_err(|e| e.in_stage("ingest"))?;
        if train_records.iter().any(|r| r.user >= PSEUDO_USER_BASE) {
            return Err(Error::Domain(format!(
                "user ids must stay below {PSEUDO_USER_BASE}"
            )));
        }
        let catalog = catalog_of(&[&train_records[..], &unbiased_records[..]]);
        let previous = Self::load_manifest(&config.run.out_dir).unwrap_or_default();
        Ok(Pipeline {
            train_file_hash: hash_bytes(&train_bytes),
            unbiased_file_hash: hash_bytes(&unbiased_bytes),
            categories_file_hash,
            config,
            cache_dir,
            resume,
            previous,
            stages: Vec::new(),
            train_records,
            unbiased_records,
            catalog,
        })
    }

    fn load_manifest(out_dir: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(out_dir.join("manifest.toml")).ok()?;
        toml::from_str(&text).ok()
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn stages(&self) -> &[StageRun] {
        &self.stages
    }

    fn check_resume(&self, stage: &str, hash: &str) -> Result<()> {
        if !self.resume {
            return Ok(());
        }
        match self.previous.stage.iter().find(|s| s.name == stage) {
            Some(prev) if prev.hash != hash => Err(Error::StaleArtifact { stage: stage.into() }),
            _ => Ok(()),
        }
    }

    fn record(&mut self, stage: &str, hash: &str, cached: bool) {
        self.stages.push(StageRun {
            name: stage.to_string(),
            hash: hash.to_string(),
            cached,
        });
    }

    fn artifact(&self, stage: &str, hash: &str, suffix: &str) -> PathBuf {
        self.cache_dir.join(format!("{stage}.{hash}.{suffix}"))
    }

    /// Splits the unbiased part into validation and test record sets.
    pub fn stage_split(&mut self) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
        let hash = content_hash(&[
            "split",
            &self.unbiased_file_hash,
            &format!("{:?}", self.config.data.split_ratio),
            &self.config.data.split_seed.to_string(),
        ]);
        self.check_resume("split", &hash)?;
        let valid_path = self.artifact("split", &hash, "valid.tsv");
        let test_path = self.artifact("split", &hash, "test.tsv");
        if valid_path.exists() && test_path.exists() {
            let valid = parse_interactions(BufReader::new(fs::File::open(&valid_path)?), true)?;
            let test = parse_interactions(BufReader::new(fs::File::open(&test_path)?), true)?;
            self.record("split", &hash, true);
            return Ok((valid, test));
        }
        let (valid, test) = split_unbiased(
            &self.unbiased_records,
            self.config.data.split_ratio,
            self.config.data.split_seed,
        )
        .map_err(|e| e.in_stage("split"))?;
        write_interactions(&valid, true, BufWriter::new(fs::File::create(&valid_path)?))?;
        write_interactions(&test, true, BufWriter::new(fs::File::create(&test_path)?))?;
        self.record("split", &hash, false);
        Ok((valid, test))
    }

    fn train_hash(&self) -> String {
        let t = &self.config.train;
        content_hash(&[
            "train",
            &self.train_file_hash,
            &self.unbiased_file_hash,
            &format!("{:?}", self.config.hyper.lambda),
            &t.d.to_string(),
            &t.neg_ratio.to_string(),
            &format!("{:?}", t.learning_rate),
            &t.epochs.to_string(),
            &format!("{:?}", t.l2),
            &t.seed.to_string(),
        ])
    }

    /// Trains one joint model over real users (full training trail) and
    /// pseudo-users (the history part of each user's split trail).
    pub fn stage_train(&mut self) -> Result<ModelState> {
        let hash = self.train_hash();
        self.check_resume("train", &hash)?;
        let path = self.artifact("train", &hash, "model.tsv");
        if path.exists() {
            let model = ModelState::read_from(BufReader::new(fs::File::open(&path)?))?;
            self.record("train", &hash, true);
            return Ok(model);
        }
        let mut positives: Vec<(UserId, ItemId)> = self
            .train_records
            .iter()
            .filter(|r| r.positive)
            .map(|r| (r.user, r.item))
            .collect();
        let user_trails = trails(&self.train_records);
        let mut dropped = 0usize;
        for (&user, trail) in &user_trails {
            if let Some((history, _)) = crate::causal::split_trail(trail, self.config.hyper.lambda) {
                let history_positives: Vec<(UserId, ItemId)> = history
                    .iter()
                    .filter(|r| r.positive)
                    .map(|r| (PSEUDO_USER_BASE + user, r.item))
                    .collect();
                if history_positives.is_empty() {
                    dropped += 1;
                } else {
                    positives.extend(history_positives);
                }
            }
        }
        if dropped > 0 {
            eprintln!("note: {dropped} samples have no history positives and are not retrievable");
        }
        let (model, _) = train_mf(&positives, &self.catalog, &self.config.train)
            .map_err(|e| e.in_stage("train"))?;
        model.write_to(BufWriter::new(fs::File::create(&path)?))?;
        self.record("train", &hash, false);
        Ok(model)
    }

    fn cluster_hash(&self) -> String {
        content_hash(&[
            "cluster",
            &self.train_hash(),
            &self.config.hyper.c.to_string(),
            &self.config.run.seed.to_string(),
        ])
    }

    pub fn stage_cluster(&mut self, model: &ModelState) -> Result<CategoryMap> {
        let hash = self.cluster_hash();
        self.check_resume("cluster", &hash)?;
        let path = self.artifact("cluster", &hash, "tsv");
        if path.exists() {
            let map = load_categories(BufReader::new(fs::File::open(&path)?))?;
            self.record("cluster", &hash, true);
            return Ok(map);
        }
        let map = cluster_items(model, self.config.hyper.c, self.config.run.seed)
            .map_err(|e| e.in_stage("cluster"))?;
        map.write_to(BufWriter::new(fs::File::create(&path)?))?;
        self.record("cluster", &hash, false);
        Ok(map)
    }

    fn augment_hash(&self) -> String {
        content_hash(&[
            "augment",
            &self.train_file_hash,
            &format!("{:?}", self.config.hyper.lambda),
            &self.cluster_hash(),
        ])
    }

    pub fn stage_augment(&mut self, categories: &CategoryMap) -> Result<Vec<AugmentedSample>> {
        let hash = self.augment_hash();
        self.check_resume("augment", &hash)?;
        let path = self.artifact("augment", &hash, "tsv");
        if path.exists() {
            let samples = read_samples(BufReader::new(fs::File::open(&path)?))?;
            self.record("augment", &hash, true);
            return Ok(samples);
        }
        let user_trails = trails(&self.train_records);
        let (samples, skipped) =
            build_augmented_dataset(&user_trails, self.config.hyper.lambda, categories)
                .map_err(|e| e.in_stage("augment"))?;
        if skipped > 0 {
            eprintln!("note: {skipped} users had trails too short to augment");
        }
        write_samples(&samples, BufWriter::new(fs::File::create(&path)?))?;
        self.record("augment", &hash, false);
        Ok(samples)
    }

    fn estimate_hash(&self) -> String {
        let h = &self.config.hyper;
        content_hash(&[
            "estimate",
            &self.train_hash(),
            &self.cluster_hash(),
            &self.augment_hash(),
            &h.k.to_string(),
            &h.k_p.to_string(),
            &h.k_s.to_string(),
            &format!("{:?}", h.gamma),
            &format!("{:?}", h.v_p),
            &format!("{:?}", h.v_a),
            &format!("{:?}", h.v_m),
            &h.delta_t.to_string(),
            &h.n.to_string(),
        ])
    }

    fn candidate_pool(&self, user: UserId) -> Vec<ItemId> {
        let seen: HashSet<ItemId> = self
            .train_records
            .iter()
            .filter(|r| r.user == user)
            .map(|r| r.item)
            .collect();
        self.catalog.iter().copied().filter(|i| !seen.contains(i)).collect()
    }

    /// Users the backend can score: trained users with at least one positive.
    /// Users whose training trail holds only negatives have no embedding and
    /// are skipped with a note.
    fn plannable_users(&self, model: &ModelState) -> Vec<UserId> {
        let all: Vec<UserId> = trails(&self.train_records).keys().copied().collect();
        let (known, unknown): (Vec<UserId>, Vec<UserId>) = all
            .into_iter()
            .partition(|&u| model.user_vector(u).is_ok());
        if !unknown.is_empty() {
            eprintln!(
                "note: skipping {} users without any training positive",
                unknown.len()
            );
        }
        known
    }

    fn backend_allocation(
        &self,
        model: &ModelState,
        categories: &CategoryMap,
        user: UserId,
        candidates: &[ItemId],
    ) -> Result<DiscreteTreatment> {
        let h = &self.config.hyper;
        let top = model.top_n(user, candidates, h.n.min(candidates.len()))?;
        let mut counts = vec![0usize; h.c];
        for &item in &top {
            counts[categories.category(item)?] += 1;
        }
        let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / top.len() as f64).collect();
        Ok(DiscreteTreatment::from_ratios_apportioned(
            &TreatmentVector::new(ratios)?,
            h.k,
        ))
    }

    /// Per-user propensity, dose-response, and marginal-effect estimation
    /// from the nearest augmented samples. Users fan out in parallel.
    pub fn stage_estimate(
        &mut self,
        model: &ModelState,
        categories: &CategoryMap,
        samples: &[AugmentedSample],
    ) -> Result<BTreeMap<UserId, UserEstimates>> {
        let hash = self.estimate_hash();
        self.check_resume("estimate", &hash)?;
        let path = self.artifact("estimate", &hash, "tsv");
        if path.exists() {
            let estimates = read_estimates(BufReader::new(fs::File::open(&path)?))?;
            self.record("estimate", &hash, true);
            return Ok(estimates);
        }
        let h = self.config.hyper.clone();
        // retrieval pool: samples whose pseudo-user holds a trained embedding
        let pool: Vec<(usize, Vec<f64>, DiscreteTreatment)> = samples
            .iter()
            .enumerate()
            .filter_map(|(idx, s)| {
                model
                    .user_vector(PSEUDO_USER_BASE + s.source_user)
                    .ok()
                    .map(|v| {
                        (
                            idx,
                            v.to_vec(),
                            DiscreteTreatment::from_ratios_rounded(&s.treatment, h.k),
                        )
                    })
            })
            .collect();
        let users: Vec<UserId> = self.plannable_users(model);
        let estimates: Vec<UserEstimates> = users
            .par_iter()
            .map(|&user| -> Result<UserEstimates> {
                let candidates = self.candidate_pool(user);
                if candidates.len() < h.n {
                    return Err(Error::Domain(format!(
                        "user {user} has {} candidates, need N={}",
                        candidates.len(),
                        h.n
                    )));
                }
                let t0 = self.backend_allocation(model, categories, user, &candidates)?;
                let eligible: Vec<&(usize, Vec<f64>, DiscreteTreatment)> = pool
                    .iter()
                    .filter(|(idx, _, _)| samples[*idx].source_user != user)
                    .collect();
                if eligible.len() < h.k_p.max(h.k_s) {
                    return Err(Error::Config(format!(
                        "K_p={} / K_s={} exceed the {} retrievable samples for user {user}",
                        h.k_p,
                        h.k_s,
                        eligible.len()
                    )));
                }
                let vectors: Vec<Vec<f64>> = eligible.iter().map(|(_, v, _)| v.clone()).collect();
                let query = model.user_vector(user)?;
                let order = nearest_samples(query, &vectors, h.k_p.max(h.k_s))?;
                let prop_treatments: Vec<DiscreteTreatment> = order
                    .iter()
                    .take(h.k_p)
                    .map(|&i| eligible[i].2.clone())
                    .collect();
                let propensity = estimate_propensity(&prop_treatments, h.c, h.k, h.v_p)?;
                let adrf_neighbors: Vec<&AugmentedSample> = order
                    .iter()
                    .take(h.k_s)
                    .map(|&i| &samples[eligible[i].0])
                    .collect();
                let adrf =
                    estimate_adrf(&adrf_neighbors, &propensity, h.gamma, h.v_a, h.c, h.k)?;
                let mtef = compute_mtef(&adrf, &t0, h.delta_t, h.v_m)?;
                Ok(UserEstimates {
                    user,
                    t0,
                    propensity,
                    adrf,
                    mtef,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("estimate"))?;
        let estimates: BTreeMap<UserId, UserEstimates> =
            estimates.into_iter().map(|e| (e.user, e)).collect();
        write_estimates(&estimates, BufWriter::new(fs::File::create(&path)?))?;
        self.record("estimate", &hash, false);
        Ok(estimates)
    }

    fn plan_hash(&self) -> String {
        let h = &self.config.hyper;
        let estimate = if self.config.run.policy.needs_estimates() {
            self.estimate_hash()
        } else {
            "-".to_string()
        };
        content_hash(&[
            "plan",
            self.config.run.policy.name(),
            &self.train_hash(),
            &self.cluster_hash(),
            &estimate,
            &format!("{:?}", h.alpha),
            &h.epsilon.to_string(),
            &self.config.run.epsilon_aggregate.to_string(),
            &h.n.to_string(),
            &h.k.to_string(),
            &self.config.run.seed.to_string(),
        ])
    }

    /// Builds the top-N list per user under the configured policy.
    pub fn stage_plan(
        &mut self,
        model: &ModelState,
        categories: &CategoryMap,
        estimates: Option<&BTreeMap<UserId, UserEstimates>>,
    ) -> Result<BTreeMap<UserId, Vec<(ItemId, f64)>>> {
        let hash = self.plan_hash();
        self.check_resume("plan", &hash)?;
        let path = self.artifact("plan", &hash, "tsv");
        if path.exists() {
            let recs = read_recommendations(BufReader::new(fs::File::open(&path)?))?;
            self.record("plan", &hash, true);
            return Ok(recs);
        }
        let h = self.config.hyper.clone();
        let policy = self.config.run.policy;
        let seed = self.config.run.seed;
        let aggregate = self.config.run.epsilon_aggregate;
        let users: Vec<UserId> = self.plannable_users(model);
        let lists: Vec<(UserId, Vec<(ItemId, f64)>)> = users
            .par_iter()
            .map(|&user| -> Result<(UserId, Vec<(ItemId, f64)>)> {
                let candidates = self.candidate_pool(user);
                if candidates.len() < h.n {
                    return Err(Error::Domain(format!(
                        "user {user} has {} candidates, need N={}",
                        candidates.len(),
                        h.n
                    )));
                }
                let list = match policy {
                    Policy::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed ^ user.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        let mut shuffled = candidates.clone();
                        shuffled.shuffle(&mut rng);
                        shuffled
                            .into_iter()
                            .take(h.n)
                            .map(|item| Ok((item, model.score(user, item)?)))
                            .collect::<Result<Vec<_>>>()?
                    }
                    Policy::Backend => {
                        let top = model.top_n(user, &candidates, h.n)?;
                        top.into_iter()
                            .map(|item| Ok((item, model.score(user, item)?)))
                            .collect::<Result<Vec<_>>>()?
                    }
                    Policy::Mtef => {
                        let est = estimates
                            .and_then(|m| m.get(&user))
                            .ok_or_else(|| Error::Domain(format!("no estimates for user {user}")))?;
                        let scored: Vec<(ItemId, f64)> = candidates
                            .iter()
                            .map(|&item| Ok((item, model.score(user, item)?)))
                            .collect::<Result<_>>()?;
                        rerank_mtef(&scored, &est.mtef, h.alpha, categories, h.n)?
                    }
                    Policy::Adrf => {
                        let est = estimates
                            .and_then(|m| m.get(&user))
                            .ok_or_else(|| Error::Domain(format!("no estimates for user {user}")))?;
                        let (slots, _) = if aggregate {
                            best_treatment_aggregate(&est.adrf, &est.t0, h.epsilon)?
                        } else {
                            best_treatment(&est.adrf, &est.t0, h.epsilon)?
                        };
                        let ranking = model.top_n(user, &candidates, candidates.len())?;
                        let list = allocate_list(&ranking, categories, &slots, h.n, h.k)?;
                        list.into_iter()
                            .map(|item| Ok((item, model.score(user, item)?)))
                            .collect::<Result<Vec<_>>>()?
                    }
                };
                Ok((user, list))
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("plan"))?;
        let recs: BTreeMap<UserId, Vec<(ItemId, f64)>> = lists.into_iter().collect();
        write_recommendations(&recs, BufWriter::new(fs::File::create(&path)?))?;
        self.record("plan", &hash, false);
        Ok(recs)
    }

    /// Scores the recommendations against the held-out positives.
    pub fn stage_evaluate(
        &mut self,
        recommendations: &BTreeMap<UserId, Vec<(ItemId, f64)>>,
        valid: &[InteractionRecord],
        test: &[InteractionRecord],
        cluster_map: &CategoryMap,
    ) -> Result<MetricReport> {
        let hash = content_hash(&[
            "evaluate",
            &self.plan_hash(),
            &self.train_file_hash,
            &self.categories_file_hash,
            &self.cluster_hash(),
            &format!("{:?}", self.config.run.cutoffs),
            &self.config.run.eval_on_valid.to_string(),
        ]);
        self.check_resume("evaluate", &hash)?;
        let rue_map_owned;
        let rue_map: &CategoryMap = match &self.config.data.categories {
            Some(path) => {
                rue_map_owned = load_categories(BufReader::new(fs::File::open(path)?))?;
                &rue_map_owned
            }
            None => cluster_map,
        };
        let popularity: PopularityTable = build_popularity(&self.train_records, &self.catalog);
        let lists: BTreeMap<UserId, Vec<ItemId>> = recommendations
            .iter()
            .map(|(&u, list)| (u, list.iter().map(|&(i, _)| i).collect()))
            .collect();
        let history = trails(&self.train_records);
        let target = if self.config.run.eval_on_valid { valid } else { test };
        let report = evaluate_run(
            &lists,
            target,
            &history,
            Some(rue_map),
            &popularity,
            &self.config.run.cutoffs,
        )
        .map_err(|e| e.in_stage("evaluate"))?;
        self.record("evaluate", &hash, false);
        Ok(report)
    }

    fn write_id_maps(&self) -> Result<()> {
        let users: BTreeSet<UserId> = self.train_records.iter().map(|r| r.user).collect();
        let mut w = BufWriter::new(fs::File::create(self.config.run.out_dir.join("idmap_users.tsv"))?);
        for (dense, original) in users.iter().enumerate() {
            writeln!(w, "{original}\t{dense}")?;
        }
        let mut w = BufWriter::new(fs::File::create(self.config.run.out_dir.join("idmap_items.tsv"))?);
        for (dense, original) in self.catalog.iter().enumerate() {
            writeln!(w, "{original}\t{dense}")?;
        }
        Ok(())
    }

    fn write_outputs(
        &self,
        recommendations: &BTreeMap<UserId, Vec<(ItemId, f64)>>,
        report: &MetricReport,
    ) -> Result<()> {
        let out = &self.config.run.out_dir;
        write_recommendations(
            recommendations,
            BufWriter::new(fs::File::create(out.join("recommendations.tsv"))?),
        )?;
        fs::write(out.join("report.txt"), report.render_table(&self.config.run.cutoffs))?;
        report.write_kv(BufWriter::new(fs::File::create(out.join("report.kv"))?))?;
        fs::write(out.join("config.toml"), self.config.to_toml())?;
        let manifest = Manifest {
            stage: self.stages.clone(),
        };
        fs::write(
            out.join("manifest.toml"),
            toml::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        self.write_id_maps()?;
        Ok(())
    }

    /// Runs every stage in order and persists the outputs.
    pub fn run(&mut self) -> Result<PipelineOutcome> {
        let (valid, test) = self.stage_split()?;
        let model = self.stage_train()?;
        let cluster_map = self.stage_cluster(&model)?;
        let estimates = if self.config.run.policy.needs_estimates() {
            let samples = self.stage_augment(&cluster_map)?;
            Some(self.stage_estimate(&model, &cluster_map, &samples)?)
        } else {
            None
        };
        let recommendations = self.stage_plan(&model, &cluster_map, estimates.as_ref())?;
        let report = self.stage_evaluate(&recommendations, &valid, &test, &cluster_map)?;
        self.write_outputs(&recommendations, &report)?;
        Ok(PipelineOutcome {
            report,
            stages: self.stages.clone(),
            out_dir: self.config.run.out_dir.clone(),
        })
    }
}

/// Convenience entry point: build a pipeline from the config and run it.
pub fn run_pipeline(config: RunConfig, resume: bool) -> Result<PipelineOutcome> {
    Pipeline::new(config, resume)?.run()
}

/// One pipeline run per grid value of a single hyperparameter, sharing one
/// artifact cache so stages whose keys do not change are reused.
pub fn sweep(
    base: &RunConfig,
    param: &str,
    values: &[f64],
    resume: bool,
) -> Result<Vec<(f64, PipelineOutcome)>> {
    let cache_dir = base.run.out_dir.join("cache");
    let mut results = Vec::with_capacity(values.len());
    for &value in values {
        let mut config = base.clone();
        config.set_hyper(param, value)?;
        config.run.out_dir = base
            .run
            .out_dir
            .join("sweep")
            .join(format!("{param}={value}"));
        let mut pipeline = Pipeline::with_cache_dir(config, cache_dir.clone(), resume)?;
        let outcome = pipeline.run()?;
        results.push((value, outcome));
    }
    Ok(results)
}

/// `user <TAB> item <TAB> rank <TAB> adjusted_score`, one line per slot.
pub fn write_recommendations(
    recommendations: &BTreeMap<UserId, Vec<(ItemId, f64)>>,
    mut w: impl Write,
) -> Result<()> {
    for (&user, list) in recommendations {
        for (rank, &(item, score)) in list.iter().enumerate() {
            writeln!(w, "{user}\t{item}\t{}\t{score:?}", rank + 1)?;
        }
    }
    Ok(())
}

pub fn read_recommendations(
    reader: impl std::io::BufRead,
) -> Result<BTreeMap<UserId, Vec<(ItemId, f64)>>> {
    let mut recs: BTreeMap<UserId, Vec<(ItemId, f64)>> = BTreeMap::new();
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
        let user: UserId = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad user".into(),
        })?;
        let item: ItemId = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad item".into(),
        })?;
        let score: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad score".into(),
        })?;
        recs.entry(user).or_default().push((item, score));
    }
    Ok(recs)
}

fn join_floats(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(text: &str, lineno: usize) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: "bad float".into(),
            })
        })
        .collect()
}

/// Per-user estimate dump: allocation, propensity and dose-response rows
/// (with fill mask), and the marginal-effect vector.
pub fn write_estimates(
    estimates: &BTreeMap<UserId, UserEstimates>,
    mut w: impl Write,
) -> Result<()> {
    for (&user, est) in estimates {
        let k = est.adrf.max_slot();
        let c = est.adrf.num_categories();
        writeln!(
            w,
            "{user}\tmeta\t-\t{k},{c},{:?},{:?},{:?},{}",
            est.propensity.floor(),
            est.adrf.null_value(),
            est.mtef.null_value(),
            est.mtef.step(),
        )?;
        let slots: Vec<String> = est.t0.slots().iter().map(|s| s.to_string()).collect();
        writeln!(w, "{user}\tt0\t-\t{}", slots.join(","))?;
        for cat in 0..c {
            writeln!(
                w,
                "{user}\tprop\t{cat}\t{}",
                join_floats((0..=k).map(|s| est.propensity.get(cat, s)))
            )?;
            writeln!(
                w,
                "{user}\tadrf\t{cat}\t{}",
                join_floats((0..=k).map(|s| est.adrf.get(cat, s)))
            )?;
            let mask: Vec<String> = (0..=k)
                .map(|s| if est.adrf.is_filled(cat, s) { "1" } else { "0" }.to_string())
                .collect();
            writeln!(w, "{user}\tfill\t{cat}\t{}", mask.join(","))?;
        }
        writeln!(w, "{user}\tmtef\t-\t{}", join_floats(est.mtef.values().iter().copied()))?;
    }
    Ok(())
}

pub fn read_estimates(reader: impl std::io::BufRead) -> Result<BTreeMap<UserId, UserEstimates>> {
    struct Partial {
        k: u32,
        c: usize,
        v_p: f64,
        v_a: f64,
        v_m: f64,
        step: u32,
        t0: Vec<u32>,
        prop: Vec<Vec<f64>>,
        adrf: Vec<Vec<f64>>,
        fill: Vec<Vec<bool>>,
        mtef: Vec<f64>,
    }
    let mut partials: BTreeMap<UserId, Partial> = BTreeMap::new();
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
        let user: UserId = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad user".into(),
        })?;
        match fields[1] {
            "meta" => {
                let parts: Vec<&str> = fields[3].split(',').collect();
                if parts.len() != 6 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "meta needs k,c,v_p,v_a,v_m,step".into(),
                    });
                }
                let bad = |msg: &str| Error::Parse {
                    line: lineno,
                    msg: msg.into(),
                };
                partials.insert(
                    user,
                    Partial {
                        k: parts[0].parse().map_err(|_| bad("bad k"))?,
                        c: parts[1].parse().map_err(|_| bad("bad c"))?,
                        v_p: parts[2].parse().map_err(|_| bad("bad v_p"))?,
                        v_a: parts[3].parse().map_err(|_| bad("bad v_a"))?,
                        v_m: parts[4].parse().map_err(|_| bad("bad v_m"))?,
                        step: parts[5].parse().map_err(|_| bad("bad step"))?,
                        t0: Vec::new(),
                        prop: Vec::new(),
                        adrf: Vec::new(),
                        fill: Vec::new(),
                        mtef: Vec::new(),
                    },
                );
            }
            kind => {
                let partial = partials.get_mut(&user).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("row `{kind}` before meta for user {user}"),
                })?;
                match kind {
                    "t0" => {
                        partial.t0 = fields[3]
                            .split(',')
                            .map(|t| {
                                t.parse().map_err(|_| Error::Parse {
                                    line: lineno,
                                    msg: "bad slot".into(),
                                })
                            })
                            .collect::<Result<_>>()?;
                    }
                    "prop" => partial.prop.push(parse_floats(fields[3], lineno)?),
                    "adrf" => partial.adrf.push(parse_floats(fields[3], lineno)?),
                    "fill" => partial
                        .fill
                        .push(fields[3].split(',').map(|t| t == "1").collect()),
                    "mtef" => partial.mtef = parse_floats(fields[3], lineno)?,
                    other => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("unknown row kind `{other}`"),
                        })
                    }
                }
            }
        }
    }
    let mut estimates = BTreeMap::new();
    for (user, partial) in partials {
        if partial.prop.len() != partial.c
            || partial.adrf.len() != partial.c
            || partial.fill.len() != partial.c
        {
            return Err(Error::Domain(format!("incomplete estimate rows for user {user}")));
        }
        estimates.insert(
            user,
            UserEstimates {
                user,
                t0: DiscreteTreatment::new(partial.t0, partial.k)?,
                propensity: PropensityMatrix::from_parts(partial.prop, partial.v_p),
                adrf: AdrfMatrix::from_parts(partial.adrf, partial.fill, partial.v_a),
                mtef: MtefVector::from_parts(partial.mtef, partial.v_m, partial.step),
            },
        );
    }
    Ok(estimates)
}
