//! Paired-object and global probing datasets.
//!
//! A paired set keeps images that contain exactly one category from a
//! primary list and exactly one from a secondary list, down-samples every
//! (primary, secondary) cell to the smallest cell, and splits each cell
//! 80/10/10. The global set is a flat many-class decoding task over a
//! held-out category list, with a per-sample flag recording whether the
//! object is mentioned in its image's captions.

mod io;
mod mention;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::AnnotationIndex;
use crate::seed;

pub use mention::{caption_mentions, load_synonyms, Synonyms};

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];
pub const DEFAULT_TRAIN_IMAGE_LIMIT: usize = 40_000;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("infeasible task {task}: cell ({primary}, {secondary}) is empty")]
    Infeasible {
        task: String,
        primary: String,
        secondary: String,
    },
    #[error("validation: {0}")]
    Validation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("task file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(rename = "primary")]
    pub primary_categories: Vec<String>,
    #[serde(rename = "secondary")]
    pub secondary_categories: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.primary_categories.len() < 2 || self.secondary_categories.len() < 2 {
            return Err(TaskError::Validation(format!(
                "task {}: primary and secondary lists need at least 2 categories each",
                self.name
            )));
        }
        let primary: BTreeSet<&String> = self.primary_categories.iter().collect();
        let secondary: BTreeSet<&String> = self.secondary_categories.iter().collect();
        if primary.len() != self.primary_categories.len()
            || secondary.len() != self.secondary_categories.len()
        {
            return Err(TaskError::Validation(format!(
                "task {}: duplicate category in a list",
                self.name
            )));
        }
        if let Some(shared) = primary.intersection(&secondary).next() {
            return Err(TaskError::Validation(format!(
                "task {}: {shared:?} is both primary and secondary",
                self.name
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.primary_categories.len() * self.secondary_categories.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSample {
    pub image_id: u64,
    pub primary: usize,
    pub secondary: usize,
    pub split: Split,
}

impl PairedSample {
    pub fn cell(&self) -> (usize, usize) {
        (self.primary, self.secondary)
    }

    /// Index of the (primary, secondary) combination, `primary * k_s + secondary`.
    pub fn combination(&self, n_secondary: usize) -> usize {
        self.primary * n_secondary + self.secondary
    }
}

/// A balanced paired-object dataset, samples ordered by image id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub spec: TaskSpec,
    pub samples: Vec<PairedSample>,
}

impl TaskSet {
    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.cell()).or_insert(0) += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Image id to split. Disjoint and exhaustive over the ids it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment(pub BTreeMap<u64, Split>);

impl SplitAssignment {
    pub fn get(&self, id: u64) -> Option<Split> {
        self.0.get(&id).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in self.0.values() {
            sizes[*s as usize] += 1;
        }
        sizes
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`. Ties in the
/// fractional parts go to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // 1e-9 absorbs products such as 30 * 0.1 landing just below an integer
    let mut sizes: [usize; 3] = std::array::from_fn(|i| (quotas[i] + 1e-9).floor() as usize);
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), TaskError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(TaskError::Validation(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    Ok(())
}

/// Seeded shuffle followed by contiguous TRAIN/VAL/TEST blocks sized by
/// [`split_sizes`].
pub fn assign_splits(ids: &[u64], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, TaskError> {
    check_ratios(ratios)?;
    let unique: BTreeSet<u64> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(TaskError::Validation("duplicate image ids in split input".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seed::rng(seed));
    let [n_train, n_val, _] = split_sizes(ids.len(), ratios);
    let assignment = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    Ok(SplitAssignment(assignment))
}

/// Down-sample every cell to the size of the smallest cell. Kept items
/// retain their input order.
pub fn balance_cooccurrence<T, K, F>(samples: Vec<T>, cell_of: F, seed: u64) -> Vec<T>
where
    K: Ord + Copy,
    F: Fn(&T) -> K,
{
    if samples.is_empty() {
        return samples;
    }
    let mut cells: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        cells.entry(cell_of(s)).or_default().push(i);
    }
    let target = cells.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = seed::rng(seed);
    let mut keep = vec![false; samples.len()];
    for members in cells.values() {
        if members.len() == target {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for pick in index::sample(&mut rng, members.len(), target) {
                keep[members[pick]] = true;
            }
        }
    }
    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

fn resolve(index: &AnnotationIndex, names: &[String]) -> Result<Vec<u64>, TaskError> {
    names
        .iter()
        .map(|n| index.category_id(n).ok_or_else(|| TaskError::UnknownCategory(n.clone())))
        .collect()
}

/// Build a balanced, stratified paired-object task.
pub fn build_paired_set(index: &AnnotationIndex, spec: &TaskSpec) -> Result<TaskSet, TaskError> {
    build_paired_set_with(index, spec, DEFAULT_RATIOS)
}

pub fn build_paired_set_with(
    index: &AnnotationIndex,
    spec: &TaskSpec,
    ratios: [f64; 3],
) -> Result<TaskSet, TaskError> {
    spec.validate()?;
    check_ratios(ratios)?;
    let primary_ids = resolve(index, &spec.primary_categories)?;
    let secondary_ids = resolve(index, &spec.secondary_categories)?;

    let mut candidates: Vec<(u64, usize, usize)> = Vec::new();
    for &image_id in index.images.keys() {
        let present = index.categories_present(image_id);
        let hits = |ids: &[u64]| -> Vec<usize> {
            ids.iter()
                .enumerate()
                .filter(|(_, id)| present.binary_search(id).is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        if let ([p], [s]) = (hits(&primary_ids).as_slice(), hits(&secondary_ids).as_slice()) {
            candidates.push((image_id, *p, *s));
        }
    }

    let mut seen = BTreeSet::new();
    for &(_, p, s) in &candidates {
        seen.insert((p, s));
    }
    for p in 0..primary_ids.len() {
        for s in 0..secondary_ids.len() {
            if !seen.contains(&(p, s)) {
                return Err(TaskError::Infeasible {
                    task: spec.name.clone(),
                    primary: spec.primary_categories[p].clone(),
                    secondary: spec.secondary_categories[s].clone(),
                });
            }
        }
    }

    let balanced = balance_cooccurrence(candidates, |&(_, p, s)| (p, s), seed::derive(spec.seed, &[1]));

    let mut by_cell: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    for &(id, p, s) in &balanced {
        by_cell.entry((p, s)).or_default().push(id);
    }
    let mut splits = BTreeMap::new();
    for (&(p, s), ids) in &by_cell {
        let cell_seed = seed::derive(spec.seed, &[2, p as u64, s as u64]);
        splits.extend(assign_splits(ids, ratios, cell_seed)?.0);
    }

    let samples = balanced
        .into_iter()
        .map(|(image_id, primary, secondary)| PairedSample {
            image_id,
            primary,
            secondary,
            split: splits[&image_id],
        })
        .collect();
    Ok(TaskSet {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalSample {
    pub image_id: u64,
    pub label: usize,
    pub split: Split,
    /// Category named in one of the image's captions.
    pub mentioned: bool,
}

/// Many-class object decoding task over held-out categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalTask {
    pub categories: Vec<String>,
    pub train_image_limit: usize,
    pub samples: Vec<GlobalSample>,
}

impl GlobalTask {
    pub fn train_samples(&self) -> impl Iterator<Item = &GlobalSample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &GlobalSample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }
}

/// One sample per (image, present category) among `categories`: training
/// samples from the first `train_image_limit` train images by ascending id,
/// test samples from every validation image.
pub fn build_global_set(
    train_index: &AnnotationIndex,
    val_index: &AnnotationIndex,
    categories: &[String],
    train_image_limit: usize,
    synonyms: Option<&Synonyms>,
) -> Result<GlobalTask, TaskError> {
    let distinct: BTreeSet<&String> = categories.iter().collect();
    if distinct.len() != categories.len() || categories.len() < 2 {
        return Err(TaskError::Config(
            "global categories must be at least 2 distinct names".into(),
        ));
    }
    for name in categories {
        if train_index.category_id(name).is_none() && val_index.category_id(name).is_none() {
            return Err(TaskError::Config(format!(
                "global category {name:?} is absent from both annotation sets"
            )));
        }
    }
    let mut samples = Vec::new();
    let sources = [
        (train_index, Split::Train, Some(train_image_limit)),
        (val_index, Split::Test, None),
    ];
    for (index, split, limit) in sources {
        let ids: Vec<Option<u64>> = categories.iter().map(|n| index.category_id(n)).collect();
        let images = index.images.keys().take(limit.unwrap_or(usize::MAX));
        for &image_id in images {
            let present = index.categories_present(image_id);
            let captions = index.captions_for(image_id);
            for (label, id) in ids.iter().enumerate() {
                let Some(id) = id else { continue };
                if present.binary_search(id).is_ok() {
                    samples.push(GlobalSample {
                        image_id,
                        label,
                        split,
                        mentioned: caption_mentions(&categories[label], captions, synonyms),
                    });
                }
            }
        }
    }
    Ok(GlobalTask {
        categories: categories.to_vec(),
        train_image_limit,
        samples,
    })
}

/// Global categories that also appear in any paired task.
pub fn overlapping_categories(global: &[String], specs: &[TaskSpec]) -> Vec<String> {
    let paired: BTreeSet<&String> = specs
        .iter()
        .flat_map(|s| s.primary_categories.iter().chain(&s.secondary_categories))
        .collect();
    global.iter().filter(|c| paired.contains(c)).cloned().collect()
}

/// `[global]` section of a task configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub categories: Vec<String>,
    #[serde(default = "default_limit")]
    pub train_image_limit: usize,
}

fn default_limit() -> usize {
    DEFAULT_TRAIN_IMAGE_LIMIT
}

/// Task configuration document: paired sets plus an optional global task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "set")]
    pub sets: Vec<TaskSpec>,
    #[serde(default)]
    pub global: Option<GlobalConfig>,
}

impl TaskConfig {
    /// Parse a TOML task configuration. A set without its own `seed` inherits
    /// the top-level seed.
    pub fn from_toml(text: &str) -> Result<Self, TaskError> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| TaskError::Config(e.to_string()))?;
        let mut cfg: TaskConfig = raw
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| TaskError::Config(e.to_string()))?;
        let explicit: Vec<bool> = raw
            .get("set")
            .and_then(|v| v.as_array())
            .map(|sets| sets.iter().map(|s| s.get("seed").is_some()).collect())
            .unwrap_or_default();
        for (spec, has_seed) in cfg.sets.iter_mut().zip(explicit) {
            if !has_seed {
                spec.seed = cfg.seed;
            }
        }
        for spec in &cfg.sets {
            spec.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
