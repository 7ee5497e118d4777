//! Resolution of a [`DatasetSpec`] into an in-memory train/test bundle.

use crate::config::DatasetSpec;
use anyhow::Context;
use flatmeter_core::data::{
    load_idx_dir, stratified_subset, synthetic_teacher, write_synthetic_idx, DatasetBundle,
    IDX_FILE_NAMES,
};
use flatmeter_core::net::{LabeledSet, Target};
use std::path::{Path, PathBuf};

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "FLATMETER_DATA";

/// Seed and sizes of the generated image set when no real IDX files exist.
/// Fixed constants so every run sees the same surrogate bytes.
const SURROGATE_SEED: u64 = 0xF1A7;
const SURROGATE_TRAIN: usize = 12_000;
const SURROGATE_TEST: usize = 2_400;

/// Dataset root: explicit config dir, else `$FLATMETER_DATA`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    if let Ok(env) = std::env::var(DATA_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data")
}

fn idx_files_present(dir: &Path) -> bool {
    IDX_FILE_NAMES.iter().all(|name| dir.join(name).is_file())
}

/// First-`n` subset for regression sets, stratified subset for
/// classification sets.
pub fn shrink(set: &LabeledSet, n: Option<usize>) -> anyhow::Result<LabeledSet> {
    let Some(n) = n else {
        return Ok(set.clone());
    };
    if n >= set.len() {
        return Ok(set.clone());
    }
    match set.target(0) {
        Target::Class(_) => Ok(stratified_subset(set, n)?),
        Target::Vector(_) => {
            let indices: Vec<usize> = (0..n).collect();
            Ok(set.subset(&indices)?)
        }
    }
}

/// Loads (or synthesizes) the dataset a config asks for.
pub fn resolve(spec: &DatasetSpec) -> anyhow::Result<DatasetBundle> {
    match spec {
        DatasetSpec::Teacher {
            seed,
            input_dim,
            hidden,
            n_train,
            n_test,
        } => Ok(synthetic_teacher(*seed, *input_dim, hidden, *n_train, *n_test)?),
        DatasetSpec::Mnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let root = data_root(dir.as_deref());
            if !idx_files_present(&root) {
                eprintln!(
                    "note: no IDX image files under {}; generating a deterministic synthetic set there",
                    root.display()
                );
                let train_n = train_subset.map_or(SURROGATE_TRAIN, |n| n.max(1)).max(10);
                let test_n = test_subset.map_or(SURROGATE_TEST, |n| n.max(1)).max(10);
                write_synthetic_idx(&root, SURROGATE_SEED, train_n, test_n)
                    .with_context(|| format!("generating synthetic IDX files in {}", root.display()))?;
            }
            let mut bundle = load_idx_dir(&root, "mnist-idx")
                .with_context(|| format!("loading IDX files from {}", root.display()))?;
            bundle.train = shrink(&bundle.train, *train_subset)?;
            bundle.test = shrink(&bundle.test, *test_subset)?;
            Ok(bundle)
        }
    }
}
