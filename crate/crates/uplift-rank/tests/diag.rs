//! Scratch diagnostics (not part of the suite; run with --ignored).

mod common;

use common::{base_config, write_dataset};
use std::collections::BTreeMap;
use tempfile::tempdir;
use uplift_rank::config::Policy;
use uplift_rank::data::{parse_interactions, trails};
use uplift_rank::eval::Metric;
use uplift_rank::pipeline::Pipeline;
use uplift_rank::synth::SyntheticWorld;

#[test]
#[ignore]
fn inspect_backend_behavior() {
    let dir = tempdir().unwrap();
    let world = SyntheticWorld::faded_dominant(3, 100, 290, 4242);
    let (train, unbiased) = write_dataset(dir.path(), &world, 0.7, 6, 2, 10, 5, 4242);
    let cache = dir.path().join("cache");

    let configure = |name: &str| {
        let mut config = base_config(&train, &unbiased, &dir.path().join(name), 4242);
        config.train.d = 8;
        config.train.epochs = 80;
        config.train.learning_rate = 0.08;
        config.train.l2 = 0.01;
        config.hyper.k = 5;
        config.hyper.k_p = 80;
        config.hyper.k_s = 80;
        config.run.allow_out_of_range = true;
        config
    };

    // training stats
    let train_records = parse_interactions(
        std::io::BufReader::new(std::fs::File::open(&train).unwrap()),
        true,
    )
    .unwrap();
    let per_user = trails(&train_records);
    let mut pos_by_cat = [0usize; 3];
    let mut neg_by_cat = [0usize; 3];
    let mut pos_by_rel = [0usize; 2]; // [dominant, non-dominant]
    for (u, trail) in &per_user {
        let dom = world.users[*u as usize].dominant;
        for r in trail {
            let cat = world.item_category(r.item);
            if r.positive {
                pos_by_cat[cat] += 1;
                pos_by_rel[if cat == dom { 0 } else { 1 }] += 1;
            } else {
                neg_by_cat[cat] += 1;
            }
        }
    }
    println!("train positives by category: {pos_by_cat:?}, negatives: {neg_by_cat:?}");
    println!("positives dominant vs other: {pos_by_rel:?}");

    // test positives by dominant/other
    let unbiased_records = parse_interactions(
        std::io::BufReader::new(std::fs::File::open(&unbiased).unwrap()),
        true,
    )
    .unwrap();
    let mut test_rel = [0usize; 2];
    for r in &unbiased_records {
        if r.positive {
            let dom = world.users[r.user as usize].dominant;
            let cat = world.item_category(r.item);
            test_rel[if cat == dom { 0 } else { 1 }] += 1;
        }
    }
    println!("unbiased positives dominant vs other: {test_rel:?}");

    // embedding type-separation and marginal-effect structure
    {
        let mut config = configure("probe");
        config.run.policy = Policy::Mtef;
        let mut pipeline = Pipeline::with_cache_dir(config, cache.clone(), false).unwrap();
        let model = pipeline.stage_train().unwrap();
        let map = pipeline.stage_cluster(&model).unwrap();
        let samples = pipeline.stage_augment(&map).unwrap();
        let estimates = pipeline.stage_estimate(&model, &map, &samples).unwrap();

        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
        };
        let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
        for u in (0..290u64).step_by(7) {
            for v in (1..290u64).step_by(11) {
                if u == v {
                    continue;
                }
                let (a, b) = (model.user_vector(u).unwrap(), model.user_vector(v).unwrap());
                let c = cos(a, b);
                if world.users[u as usize].dominant == world.users[v as usize].dominant {
                    within = (within.0 + c, within.1 + 1);
                } else {
                    cross = (cross.0 + c, cross.1 + 1);
                }
            }
        }
        println!(
            "user-embedding cosine: within-type {:.3}, cross-type {:.3}",
            within.0 / within.1 as f64,
            cross.0 / cross.1 as f64
        );

        // average marginal effect on the dominant vs other categories
        let (mut m_dom, mut m_other, mut n_users) = (0.0, 0.0, 0usize);
        for (u, est) in &estimates {
            let dom = world.users[*u as usize].dominant;
            let m = est.mtef.values();
            m_dom += m[dom];
            m_other += (m.iter().sum::<f64>() - m[dom]) / (m.len() - 1) as f64;
            n_users += 1;
        }
        println!(
            "mean marginal effect: dominant {:.4}, other {:.4} ({} users)",
            m_dom / n_users as f64,
            m_other / n_users as f64,
            n_users
        );

        // backend score spread near the rank-10 boundary
        let mut gap = 0.0;
        for u in (0..290u64).step_by(29) {
            let candidates: Vec<u64> = (0..300u64)
                .filter(|i| model.score(u, *i).is_ok())
                .collect();
            let top = model.top_n(u, &candidates, 15).unwrap();
            gap += model.score(u, top[7]).unwrap() - model.score(u, top[12]).unwrap();
        }
        println!("mean score gap rank8-rank12: {:.4}", gap / 10.0);
    }

    for (policy, name) in [
        (Policy::Random, "random"),
        (Policy::Backend, "backend"),
        (Policy::Mtef, "mtef"),
        (Policy::Adrf, "adrf"),
    ] {
        let mut config = configure(name);
        config.run.policy = policy;
        let outcome = Pipeline::with_cache_dir(config, cache.clone(), false)
            .unwrap()
            .run()
            .unwrap();
        println!(
            "{name}: R@10={:.4} N@10={:.4} RUP@10={:.4}",
            outcome.report.get(Metric::Recall, 10).unwrap(),
            outcome.report.get(Metric::Ndcg, 10).unwrap(),
            outcome.report.get(Metric::Rup, 10).unwrap(),
        );
        // list composition dominant vs other
        let recs = uplift_rank::pipeline::read_recommendations(std::io::BufReader::new(
            std::fs::File::open(dir.path().join(name).join("recommendations.tsv")).unwrap(),
        ))
        .unwrap();
        let mut rel = [0usize; 2];
        let mut hits_rel = [0usize; 2];
        let test_pos: BTreeMap<u64, Vec<u64>> = {
            let mut m: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for r in &unbiased_records {
                if r.positive {
                    m.entry(r.user).or_default().push(r.item);
                }
            }
            m
        };
        for (u, list) in &recs {
            let dom = world.users[*u as usize].dominant;
            for (item, _) in list {
                let cat = world.item_category(*item);
                let idx = if cat == dom { 0 } else { 1 };
                rel[idx] += 1;
                if test_pos.get(u).map(|p| p.contains(item)).unwrap_or(false) {
                    hits_rel[idx] += 1;
                }
            }
        }
        println!("  list slots dominant vs other: {rel:?}; raw test hits: {hits_rel:?}");
    }
}
