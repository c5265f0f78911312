use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::table::{AccuracyRow, AccuracyTable, GlobalRow, GlobalTable, SubsetAccuracy};
use super::{train_perceptron, EmbeddingSource, ProbeConfig, ProbeError, Target, TokenSource};
use crate::coco::MaskSource;
use crate::seed;
use crate::select::{extract_feature, scale_mask_to_grid, Strategy, TokenMask, DEFAULT_THRESHOLD};
use crate::store::LayerEmbedding;
use crate::tasks::{GlobalSample, GlobalTask, PairedSample, Split, TaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub probe: ProbeConfig,
    /// Patch coverage needed for a token to count as part of an object.
    pub threshold: f64,
    /// Seed for the random token strategies.
    pub seed: u64,
    /// Caption-mention subsets with fewer test samples are reported absent.
    pub min_subset: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            min_subset: 1,
        }
    }
}

impl SuiteConfig {
    fn meta(&self) -> BTreeMap<String, String> {
        let p = &self.probe;
        [
            ("threshold", self.threshold.to_string()),
            ("select_seed", self.seed.to_string()),
            ("probe_seed", p.seed.to_string()),
            ("max_epochs", p.max_epochs.to_string()),
            ("tol", p.tol.to_string()),
            ("no_change_epochs", p.no_change_epochs.to_string()),
            ("learning_rate", p.learning_rate.to_string()),
            ("shuffle_each_epoch", p.shuffle_each_epoch.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One layer of one model.
#[derive(Clone, Copy)]
pub struct LayerInput<'a> {
    pub layer: u32,
    pub source: &'a dyn EmbeddingSource,
}

impl LayerInput<'_> {
    fn grid(&self) -> (usize, usize) {
        let h = self.source.header();
        (h.grid_h as usize, h.grid_w as usize)
    }
}

fn model_name(layers: &[LayerInput<'_>]) -> Result<String, ProbeError> {
    let first = layers
        .first()
        .ok_or_else(|| ProbeError::Config("no layers given".into()))?;
    let name = &first.source.header().model_name;
    if let Some(other) = layers.iter().find(|l| &l.source.header().model_name != name) {
        return Err(ProbeError::Config(format!(
            "layers mix models {name:?} and {:?}",
            other.source.header().model_name
        )));
    }
    Ok(name.clone())
}

/// Token masks of `(image, category)` pairs on every distinct grid.
fn token_masks<M>(
    objects: &[(u64, &str)],
    masks: &M,
    grids: impl IntoIterator<Item = (usize, usize)>,
    threshold: f64,
) -> Result<BTreeMap<(usize, usize), Vec<TokenMask>>, ProbeError>
where
    M: MaskSource + Sync + ?Sized,
{
    let mut out = BTreeMap::new();
    for grid in grids {
        if out.contains_key(&grid) {
            continue;
        }
        let scaled = objects
            .par_iter()
            .map(|&(image_id, category)| {
                let mask = masks.object_mask(image_id, category).map_err(|source| ProbeError::Mask {
                    image_id,
                    category: category.to_string(),
                    source,
                })?;
                scale_mask_to_grid(&mask, grid, threshold).map_err(|source| ProbeError::Select { image_id, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(grid, scaled);
    }
    Ok(out)
}

fn fetch_checked(layer: &LayerInput<'_>, image_id: u64) -> Result<LayerEmbedding, ProbeError> {
    let emb = layer.source.fetch(image_id)?;
    if (emb.grid_h, emb.grid_w) != layer.grid() {
        return Err(ProbeError::Config(format!(
            "image {image_id} has grid {}x{} at layer {}",
            emb.grid_h, emb.grid_w, layer.layer
        )));
    }
    Ok(emb)
}

fn source_seed(config: &SuiteConfig, source: &str) -> u64 {
    seed::derive(config.seed, &[seed::tag(source)])
}

fn rows_of<'a>(features: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| features[i].as_slice()).collect()
}

fn pick<T: Copy>(values: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Probe every (layer, token source, target) of a paired task.
///
/// Each probe trains on the TRAIN split and reports TEST accuracy; VAL
/// accuracy is recorded alongside. Samples are processed in image-id order,
/// so the input order of `task.samples` has no effect.
pub fn run_paired_suite<M>(
    task: &TaskSet,
    masks: &M,
    layers: &[LayerInput<'_>],
    strategies: &[Strategy],
    config: &SuiteConfig,
) -> Result<AccuracyTable, ProbeError>
where
    M: MaskSource + Sync + ?Sized,
{
    config.probe.validate()?;
    let model = model_name(layers)?;
    let mut samples: Vec<PairedSample> = task.samples.clone();
    samples.sort_by_key(|s| s.image_id);
    let split_idx = |split: Split| -> Vec<usize> {
        (0..samples.len()).filter(|&i| samples[i].split == split).collect()
    };
    let (train, val, test) = (split_idx(Split::Train), split_idx(Split::Val), split_idx(Split::Test));
    for (name, idx) in [("TRAIN", &train), ("TEST", &test)] {
        if idx.is_empty() {
            return Err(ProbeError::EmptySplit(format!("{name} split of task {}", task.spec.name)));
        }
    }

    let mut sources: Vec<TokenSource> = strategies
        .iter()
        .flat_map(|&s| TokenSource::for_strategy(s).iter().copied())
        .collect();
    sources.sort_unstable();
    sources.dedup();

    let spec = &task.spec;
    let k_s = spec.secondary_categories.len();
    let labels: BTreeMap<Target, Vec<usize>> = Target::ALL
        .into_iter()
        .map(|t| {
            let l = samples
                .iter()
                .map(|s| match t {
                    Target::Primary => s.primary,
                    Target::Secondary => s.secondary,
                    Target::Combination => s.combination(k_s),
                })
                .collect();
            (t, l)
        })
        .collect();

    let need_masks = sources.iter().any(|s| s.object().is_some());
    let (primary_masks, secondary_masks) = if need_masks {
        let grids: Vec<_> = layers.iter().map(LayerInput::grid).collect();
        let objects = |secondary: bool| -> Vec<(u64, &str)> {
            samples
                .iter()
                .map(|s| {
                    let name = if secondary {
                        &spec.secondary_categories[s.secondary]
                    } else {
                        &spec.primary_categories[s.primary]
                    };
                    (s.image_id, name.as_str())
                })
                .collect()
        };
        (
            token_masks(&objects(false), masks, grids.clone(), config.threshold)?,
            token_masks(&objects(true), masks, grids, config.threshold)?,
        )
    } else {
        Default::default()
    };

    let mut table = AccuracyTable::new(model, spec.name.clone());
    table.meta = config.meta();
    table.meta.insert("task_seed".into(), spec.seed.to_string());
    for layer in layers {
        let grid = layer.grid();
        let per_sample: Vec<Vec<Vec<f64>>> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let emb = fetch_checked(layer, s.image_id)?;
                sources
                    .iter()
                    .map(|src| {
                        let mask = match src.object() {
                            Some(true) => Some(&primary_masks[&grid][i]),
                            Some(false) => Some(&secondary_masks[&grid][i]),
                            None => None,
                        };
                        extract_feature(&emb, mask, src.strategy(), source_seed(config, src.as_str()))
                            .map_err(|source| ProbeError::Select {
                                image_id: s.image_id,
                                source,
                            })
                    })
                    .collect()
            })
            .collect::<Result<_, ProbeError>>()?;
        let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(samples.len()); sources.len()];
        for row in per_sample {
            for (f, v) in features.iter_mut().zip(row) {
                f.push(v);
            }
        }

        let jobs: Vec<(usize, Target)> = (0..sources.len())
            .flat_map(|s| Target::ALL.into_iter().map(move |t| (s, t)))
            .collect();
        let rows = jobs
            .par_iter()
            .map(|&(si, target)| {
                let (x, y) = (&features[si], &labels[&target]);
                let probe = train_perceptron(&rows_of(x, &train), &pick(y, &train), &config.probe)?;
                let accuracy = probe.evaluate(&rows_of(x, &test), &pick(y, &test))?;
                let val_accuracy = if val.is_empty() {
                    None
                } else {
                    Some(probe.evaluate(&rows_of(x, &val), &pick(y, &val))?)
                };
                Ok(AccuracyRow {
                    layer: layer.layer,
                    source: sources[si],
                    target,
                    accuracy,
                    n_train: train.len(),
                    n_test: test.len(),
                    val_accuracy,
                    n_val: val.len(),
                    epochs_run: probe.epochs_run,
                    converged: probe.converged,
                })
            })
            .collect::<Result<Vec<_>, ProbeError>>()?;
        table.rows.extend(rows);
    }
    table.normalize();
    Ok(table)
}

/// Probe the many-class global task with object-token strategies, splitting
/// test accuracy by whether a caption mentions the object.
pub fn run_global_suite<M>(
    task: &GlobalTask,
    masks: &M,
    layers: &[LayerInput<'_>],
    strategies: &[Strategy],
    config: &SuiteConfig,
) -> Result<GlobalTable, ProbeError>
where
    M: MaskSource + Sync + ?Sized,
{
    config.probe.validate()?;
    if let Some(s) = strategies.iter().find(|s| !s.needs_mask()) {
        return Err(ProbeError::Config(format!(
            "global probing uses object tokens only, got {s}"
        )));
    }
    let mut strategies = strategies.to_vec();
    strategies.sort_unstable();
    strategies.dedup();
    let model = model_name(layers)?;
    let mut samples: Vec<GlobalSample> = task
        .samples
        .iter()
        .filter(|s| s.split != Split::Val)
        .copied()
        .collect();
    samples.sort_by_key(|s| (s.image_id, s.label, s.split));
    if let Some(s) = samples.iter().find(|s| s.label >= task.categories.len()) {
        return Err(ProbeError::Config(format!("label {} out of range", s.label)));
    }
    let train: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == Split::Train).collect();
    let test: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(ProbeError::EmptySplit("global task needs TRAIN and TEST samples".into()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let objects: Vec<(u64, &str)> = samples
        .iter()
        .map(|s| (s.image_id, task.categories[s.label].as_str()))
        .collect();
    let token = token_masks(&objects, masks, layers.iter().map(LayerInput::grid), config.threshold)?;

    // runs of samples sharing an image, so each embedding is read once
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match groups.last_mut() {
            Some((start, end)) if samples[*start].image_id == s.image_id => *end = i + 1,
            _ => groups.push((i, i + 1)),
        }
    }

    let mut table = GlobalTable {
        model,
        meta: config.meta(),
        rows: Vec::new(),
    };
    table.meta.insert("min_subset".into(), config.min_subset.to_string());
    table
        .meta
        .insert("train_image_limit".into(), task.train_image_limit.to_string());
    for layer in layers {
        let grid_masks = &token[&layer.grid()];
        let per_group: Vec<Vec<Vec<Vec<f64>>>> = groups
            .par_iter()
            .map(|&(start, end)| {
                let emb = fetch_checked(layer, samples[start].image_id)?;
                (start..end)
                    .map(|i| {
                        strategies
                            .iter()
                            .map(|&st| {
                                extract_feature(&emb, Some(&grid_masks[i]), st, source_seed(config, st.as_str()))
                                    .map_err(|source| ProbeError::Select {
                                        image_id: samples[i].image_id,
                                        source,
                                    })
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect::<Result<_, ProbeError>>()?;
        let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(samples.len()); strategies.len()];
        for row in per_group.into_iter().flatten() {
            for (f, v) in features.iter_mut().zip(row) {
                f.push(v);
            }
        }
        let rows = (0..strategies.len())
            .into_par_iter()
            .map(|si| {
                let x = &features[si];
                let probe = train_perceptron(&rows_of(x, &train), &pick(&labels, &train), &config.probe)?;
                let mut hits = [(0usize, 0usize); 2];
                let mut correct = 0;
                for &i in &test {
                    let ok = probe.predict(&x[i])? == labels[i];
                    correct += ok as usize;
                    let h = &mut hits[samples[i].mentioned as usize];
                    h.0 += ok as usize;
                    h.1 += 1;
                }
                let subset = |(c, n): (usize, usize)| {
                    (n > 0 && n >= config.min_subset).then(|| SubsetAccuracy {
                        accuracy: c as f64 / n as f64,
                        n,
                    })
                };
                Ok(GlobalRow {
                    layer: layer.layer,
                    strategy: strategies[si],
                    overall: SubsetAccuracy {
                        accuracy: correct as f64 / test.len() as f64,
                        n: test.len(),
                    },
                    in_caption: subset(hits[1]),
                    not_in_caption: subset(hits[0]),
                    n_train: train.len(),
                    epochs_run: probe.epochs_run,
                })
            })
            .collect::<Result<Vec<_>, ProbeError>>()?;
        table.rows.extend(rows);
    }
    table.rows.sort_by_key(|r| (r.layer, r.strategy));
    Ok(table)
}
