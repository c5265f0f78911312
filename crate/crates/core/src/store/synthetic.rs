//! Synthetic token stores with known binding and leakage.
//!
//! Every image holds one primary and one secondary object, each covering a
//! rectangle of tokens. Object tokens point along their own class
//! direction, plus a `leakage` fraction of the other object's direction;
//! background tokens are pure noise. With orthonormal class directions the
//! expected probe accuracies follow directly from `signal`, `leakage` and
//! `noise`, which makes the store an end-to-end oracle for the measures.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{LayerEmbedding, LayerFileHeader, LayerWriter, StoreError};
use crate::coco::{encode_rle, BitMask};
use crate::seed;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub model_name: String,
    pub layer_index: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub n_primary: usize,
    pub n_secondary: usize,
    pub signal: f64,
    /// Fraction of the other object's class direction mixed into object tokens.
    pub leakage: f64,
    /// Standard deviation of the i.i.d. Gaussian noise on every value.
    pub noise: f64,
    /// Weights of the primary and secondary directions in the CLS vector.
    pub cls_mix: [f64; 2],
    pub has_cls: bool,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            model_name: "synthetic".into(),
            layer_index: 0,
            grid_h: 8,
            grid_w: 8,
            embed_dim: 16,
            n_primary: 2,
            n_secondary: 4,
            signal: 1.0,
            leakage: 0.0,
            noise: 0.1,
            cls_mix: [1.0, 0.5],
            has_cls: true,
            n_images: 800,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::Layout(m));
        if !(self.signal > 0.0) {
            return bad(format!("signal must be positive, got {}", self.signal));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return bad(format!("leakage must be in [0,1], got {}", self.leakage));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.n_primary < 2 || self.n_secondary < 2 {
            return bad("need at least 2 primary and 2 secondary classes".into());
        }
        if self.embed_dim < self.n_primary + self.n_secondary {
            return bad(format!(
                "embed_dim {} cannot hold {} orthonormal class directions",
                self.embed_dim,
                self.n_primary + self.n_secondary
            ));
        }
        if self.grid_h * self.grid_w < 2 {
            return bad("token grid needs at least 2 tokens".into());
        }
        Ok(())
    }

    pub fn header(&self) -> LayerFileHeader {
        LayerFileHeader {
            model_name: self.model_name.clone(),
            layer_index: self.layer_index,
            grid_h: self.grid_h as u32,
            grid_w: self.grid_w as u32,
            embed_dim: self.embed_dim as u32,
            has_cls: self.has_cls,
            record_count: self.n_images as u64,
        }
    }

    pub fn primary_name(i: usize) -> String {
        format!("primary_{i}")
    }

    pub fn secondary_name(j: usize) -> String {
        format!("secondary_{j}")
    }

    /// Paired task over the synthetic categories.
    pub fn task_spec(&self, name: &str) -> TaskSpec {
        TaskSpec {
            name: name.to_string(),
            primary_categories: (0..self.n_primary).map(Self::primary_name).collect(),
            secondary_categories: (0..self.n_secondary).map(Self::secondary_name).collect(),
            seed: self.seed,
        }
    }
}

/// Token sets of the two objects in one image (row-major token indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub image_id: u64,
    pub primary_tokens: Vec<usize>,
    pub secondary_tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLabel {
    pub image_id: u64,
    pub primary: usize,
    pub secondary: usize,
}

fn rect_tokens(top: usize, left: usize, h: usize, w: usize, grid_w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for r in top..top + h {
        for c in left..left + w {
            out.push(r * grid_w + c);
        }
    }
    out
}

/// Two disjoint random token rectangles per image, image ids `1..=n_images`.
pub fn random_layout(config: &SyntheticConfig) -> Vec<ObjectLayout> {
    let (gh, gw) = (config.grid_h, config.grid_w);
    let max_h = gh.div_ceil(3).max(1);
    let max_w = gw.div_ceil(3).max(1);
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("layout")]));
    (1..=config.n_images as u64)
        .map(|image_id| loop {
            let place = |rng: &mut rand_chacha::ChaCha8Rng| {
                let h = rng.random_range(1..=max_h);
                let w = rng.random_range(1..=max_w);
                let top = rng.random_range(0..=gh - h);
                let left = rng.random_range(0..=gw - w);
                rect_tokens(top, left, h, w, gw)
            };
            let primary = place(&mut rng);
            let secondary = place(&mut rng);
            if primary.iter().all(|t| !secondary.contains(t)) {
                break ObjectLayout {
                    image_id,
                    primary_tokens: primary,
                    secondary_tokens: secondary,
                };
            }
        })
        .collect()
}

/// Balanced (primary, secondary) labels: cell counts differ by at most one.
pub fn synthetic_labels(config: &SyntheticConfig) -> Vec<SyntheticLabel> {
    let n_cells = config.n_primary * config.n_secondary;
    let mut cells: Vec<usize> = (0..config.n_images).map(|i| i % n_cells).collect();
    cells.shuffle(&mut seed::rng(seed::derive(config.seed, &[seed::tag("labels")])));
    cells
        .into_iter()
        .enumerate()
        .map(|(i, cell)| SyntheticLabel {
            image_id: i as u64 + 1,
            primary: cell / config.n_secondary,
            secondary: cell % config.n_secondary,
        })
        .collect()
}

/// `count` orthonormal vectors in `dim` dimensions (Gram-Schmidt on
/// Gaussian draws).
pub fn class_directions(seed_value: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::tag("directions")]));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Write one synthetic layer file and return the labels it encodes.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    layout: &[ObjectLayout],
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<SyntheticLabel>, StoreError> {
    config.validate()?;
    if layout.len() != config.n_images {
        return Err(StoreError::Layout(format!(
            "layout has {} images, config wants {}",
            layout.len(),
            config.n_images
        )));
    }
    let n_tokens = config.grid_h * config.grid_w;
    for obj in layout {
        let in_grid = |ts: &[usize]| !ts.is_empty() && ts.iter().all(|&t| t < n_tokens);
        if !in_grid(&obj.primary_tokens) || !in_grid(&obj.secondary_tokens) {
            return Err(StoreError::Layout(format!(
                "image {}: object token sets must be non-empty and inside the grid",
                obj.image_id
            )));
        }
        if obj.primary_tokens.iter().any(|t| obj.secondary_tokens.contains(t)) {
            return Err(StoreError::Layout(format!(
                "image {}: primary and secondary token sets overlap",
                obj.image_id
            )));
        }
    }

    let labels = synthetic_labels(config);
    let dirs = class_directions(config.seed, config.n_primary + config.n_secondary, config.embed_dim);
    let noise = Normal::new(0.0, config.noise).expect("validated noise");
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("noise"), config.layer_index as u64]));
    let d = config.embed_dim;
    let s = config.signal;
    let eps = config.leakage;

    let mut ordered: Vec<(&ObjectLayout, SyntheticLabel)> = layout
        .iter()
        .zip(labels.iter().copied())
        .map(|(obj, mut label)| {
            label.image_id = obj.image_id;
            (obj, label)
        })
        .collect();
    ordered.sort_by_key(|(obj, _)| obj.image_id);

    let mut writer = LayerWriter::create(path, config.header())?;
    let mut out_labels = Vec::with_capacity(ordered.len());
    for (obj, label) in ordered {
        let dp = &dirs[label.primary];
        let ds = &dirs[config.n_primary + label.secondary];
        let mut role = vec![0u8; n_tokens];
        obj.primary_tokens.iter().for_each(|&t| role[t] = 1);
        obj.secondary_tokens.iter().for_each(|&t| role[t] = 2);

        let cls = config.has_cls.then(|| {
            (0..d)
                .map(|k| {
                    let clean = s * (config.cls_mix[0] * dp[k] + config.cls_mix[1] * ds[k]);
                    (clean + noise.sample(&mut rng)) as f32
                })
                .collect()
        });
        let mut tokens = Vec::with_capacity(n_tokens * d);
        for &r in &role {
            for k in 0..d {
                let clean = match r {
                    1 => s * dp[k] + eps * s * ds[k],
                    2 => s * ds[k] + eps * s * dp[k],
                    _ => 0.0,
                };
                tokens.push((clean + noise.sample(&mut rng)) as f32);
            }
        }
        writer.write(&LayerEmbedding {
            image_id: obj.image_id,
            grid_h: config.grid_h,
            grid_w: config.grid_w,
            embed_dim: d,
            cls,
            tokens,
        })?;
        out_labels.push(label);
    }
    writer.finish()?;
    Ok(out_labels)
}

/// COCO-format instance document for a synthetic layout: each token is a
/// `patch_px` x `patch_px` pixel block and objects are RLE masks.
pub fn synthetic_annotations(
    config: &SyntheticConfig,
    layout: &[ObjectLayout],
    labels: &[SyntheticLabel],
    patch_px: usize,
) -> Value {
    let height = config.grid_h * patch_px;
    let width = config.grid_w * patch_px;
    let mut categories = Vec::new();
    for i in 0..config.n_primary {
        categories.push(json!({"id": i + 1, "name": SyntheticConfig::primary_name(i), "supercategory": "primary"}));
    }
    for j in 0..config.n_secondary {
        categories.push(json!({
            "id": config.n_primary + j + 1,
            "name": SyntheticConfig::secondary_name(j),
            "supercategory": "secondary"
        }));
    }
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 0u64;
    for (obj, label) in layout.iter().zip(labels) {
        images.push(json!({
            "id": obj.image_id,
            "height": height,
            "width": width,
            "file_name": format!("{:012}.png", obj.image_id)
        }));
        let objects = [
            (&obj.primary_tokens, label.primary + 1),
            (&obj.secondary_tokens, config.n_primary + label.secondary + 1),
        ];
        for (tokens, category_id) in objects {
            let mut mask = BitMask::zeros(height, width);
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            for &t in tokens.iter() {
                let (tr, tc) = (t / config.grid_w, t % config.grid_w);
                r0 = r0.min(tr);
                c0 = c0.min(tc);
                r1 = r1.max(tr + 1);
                c1 = c1.max(tc + 1);
                for r in tr * patch_px..(tr + 1) * patch_px {
                    for c in tc * patch_px..(tc + 1) * patch_px {
                        mask.set(r, c, true);
                    }
                }
            }
            ann_id += 1;
            annotations.push(json!({
                "id": ann_id,
                "image_id": obj.image_id,
                "category_id": category_id,
                "segmentation": {"counts": encode_rle(&mask), "size": [height, width]},
                "area": mask.count_ones(),
                "bbox": [c0 * patch_px, r0 * patch_px, (c1 - c0) * patch_px, (r1 - r0) * patch_px],
                "iscrowd": 0
            }));
        }
    }
    json!({"images": images, "annotations": annotations, "categories": categories})
}
