//! Shared fixtures: synthetic dataset files and a baseline run config.

use std::path::{Path, PathBuf};

use uplift_rank::backend::TrainConfig;
use uplift_rank::causal::HyperParams;
use uplift_rank::config::{DataConfig, Policy, RunConfig, RunSection};
use uplift_rank::data::write_interactions;
use uplift_rank::synth::{simulate_logs, to_records, LoggingPolicy, SyntheticWorld};

/// Writes a biased training log and a uniformly-logged unbiased part for the
/// world, returning the two file paths.
pub fn write_dataset(
    dir: &Path,
    world: &SyntheticWorld,
    strength: f64,
    train_windows: usize,
    test_windows: usize,
    window_len: usize,
    k: u32,
    seed: u64,
) -> (PathBuf, PathBuf) {
    let policy = if strength == 0.0 {
        LoggingPolicy::Uniform
    } else {
        LoggingPolicy::Confounded { strength }
    };
    let train = simulate_logs(world, policy, train_windows, window_len, k, seed).unwrap();
    let unbiased = simulate_logs(
        world,
        LoggingPolicy::Uniform,
        test_windows,
        window_len,
        k,
        seed.wrapping_add(0x5151_5151),
    )
    .unwrap();
    let train_path = dir.join("train.tsv");
    let unbiased_path = dir.join("unbiased.tsv");
    let mut f = std::fs::File::create(&train_path).unwrap();
    write_interactions(&to_records(&train), true, &mut f).unwrap();
    let mut f = std::fs::File::create(&unbiased_path).unwrap();
    write_interactions(&to_records(&unbiased), true, &mut f).unwrap();
    (train_path, unbiased_path)
}

/// A small, fast configuration against the given dataset files.
pub fn base_config(train: &Path, unbiased: &Path, out_dir: &Path, seed: u64) -> RunConfig {
    RunConfig {
        data: DataConfig {
            train: train.to_path_buf(),
            unbiased: unbiased.to_path_buf(),
            categories: None,
            has_position: true,
            split_ratio: 0.5,
            split_seed: seed,
        },
        train: TrainConfig {
            d: 16,
            neg_ratio: 4,
            learning_rate: 0.05,
            epochs: 10,
            l2: 1e-4,
            seed,
        },
        hyper: HyperParams {
            lambda: 0.5,
            c: 3,
            k: 4,
            k_p: 20,
            k_s: 20,
            gamma: 1.0,
            epsilon: 2,
            v_p: 0.1,
            v_a: 0.01,
            v_m: 0.05,
            alpha: 0.3,
            delta_t: 1,
            n: 10,
        },
        run: RunSection {
            policy: Policy::Mtef,
            cutoffs: vec![10],
            seed,
            out_dir: out_dir.to_path_buf(),
            allow_out_of_range: false,
            epsilon_aggregate: false,
            eval_on_valid: false,
        },
    }
}
