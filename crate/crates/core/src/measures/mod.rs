//! Binding (M1) and entanglement (M2) scores, layer recommendation,
//! correlations and token similarity maps.
//!
//! With `A_xy` the accuracy of decoding object `y` from object `x`'s tokens,
//! M1 is `A_ss`, how well the secondary object's own tokens identify it, and
//! M2 is `A_sp / A_pp`, how much of the primary object can be read from the
//! secondary object's tokens relative to its own.

mod report;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{AccuracyTable, Target, TokenSource};
use crate::select::Strategy;
use crate::store::LayerEmbedding;

pub use report::{accuracy_curves, emit_report, load_report, similarity_tsv, CorrelationRecord, Recommendation, Report, ReportFormat};

pub const DEFAULT_TIE_WINDOW: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("no {token_source}/{target} accuracy at layer {layer} of {task:?}")]
    MissingEntry {
        task: String,
        layer: u32,
        token_source: TokenSource,
        target: Target,
    },
    #[error("undefined measure: {0}")]
    Undefined(String),
    #[error("no records")]
    Empty,
    #[error("undefined correlation: {0}")]
    Correlation(String),
    #[error("anchor {anchor:?} outside {grid_h}x{grid_w} grid")]
    AnchorOutOfGrid {
        anchor: (usize, usize),
        grid_h: usize,
        grid_w: usize,
    },
    #[error("anchor token has zero norm")]
    ZeroAnchor,
    #[error("strategy {0} has no per-object sources")]
    Strategy(Strategy),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRecord {
    pub model: String,
    pub layer: u32,
    pub m1: f64,
    pub m2: f64,
    pub strategy: Strategy,
    pub a_pp: f64,
    pub a_sp: f64,
    pub a_ss: f64,
    /// Paired tasks averaged into this record.
    pub n_sets: usize,
}

fn object_sources(strategy: Strategy) -> Result<(TokenSource, TokenSource), MeasureError> {
    match strategy {
        Strategy::AvgObj => Ok((TokenSource::AvgObjP, TokenSource::AvgObjS)),
        Strategy::RandomObj => Ok((TokenSource::RandomObjP, TokenSource::RandomObjS)),
        s => Err(MeasureError::Strategy(s)),
    }
}

fn entry(table: &AccuracyTable, layer: u32, source: TokenSource, target: Target) -> Result<f64, MeasureError> {
    table
        .accuracy(layer, source, target)
        .ok_or_else(|| MeasureError::MissingEntry {
            task: table.task.clone(),
            layer,
            token_source: source,
            target,
        })
}

/// `A_ss`: secondary object decoded from its own tokens.
pub fn m1(table: &AccuracyTable, layer: u32) -> Result<f64, MeasureError> {
    m1_with(table, layer, Strategy::AvgObj)
}

pub fn m1_with(table: &AccuracyTable, layer: u32, strategy: Strategy) -> Result<f64, MeasureError> {
    let (_, s) = object_sources(strategy)?;
    entry(table, layer, s, Target::Secondary)
}

/// `A_sp / A_pp`: primary object decoded from secondary tokens, relative to
/// its own.
pub fn m2(table: &AccuracyTable, layer: u32) -> Result<f64, MeasureError> {
    m2_with(table, layer, Strategy::AvgObj)
}

pub fn m2_with(table: &AccuracyTable, layer: u32, strategy: Strategy) -> Result<f64, MeasureError> {
    let (p, s) = object_sources(strategy)?;
    ratio(entry(table, layer, s, Target::Primary)?, entry(table, layer, p, Target::Primary)?)
}

/// `a_sp / a_pp`, undefined when `a_pp` is zero.
pub fn ratio(a_sp: f64, a_pp: f64) -> Result<f64, MeasureError> {
    if a_pp > 0.0 {
        Ok(a_sp / a_pp)
    } else {
        Err(MeasureError::Undefined(format!("A_pp = {a_pp}")))
    }
}

/// One record per (model, layer). Tables of the same model are averaged
/// entry-wise over paired tasks before M2's ratio is taken. Every table of
/// a model must cover the same layers.
pub fn measure_records(tables: &[AccuracyTable], strategy: Strategy) -> Result<Vec<MeasureRecord>, MeasureError> {
    let (p, s) = object_sources(strategy)?;
    let mut by_model: BTreeMap<&str, Vec<&AccuracyTable>> = BTreeMap::new();
    for t in tables {
        by_model.entry(t.model.as_str()).or_default().push(t);
    }
    let mut out = Vec::new();
    for (model, group) in by_model {
        let layers = group[0].layers();
        for t in &group[1..] {
            if t.layers() != layers {
                return Err(MeasureError::Undefined(format!(
                    "tasks {:?} and {:?} of model {model:?} cover different layers",
                    group[0].task, t.task
                )));
            }
        }
        let n = group.len() as f64;
        for layer in layers {
            let mut sum = [0.0; 3];
            for t in &group {
                sum[0] += entry(t, layer, p, Target::Primary)?;
                sum[1] += entry(t, layer, s, Target::Primary)?;
                sum[2] += entry(t, layer, s, Target::Secondary)?;
            }
            let [a_pp, a_sp, a_ss] = sum.map(|v| v / n);
            out.push(MeasureRecord {
                model: model.to_string(),
                layer,
                m1: a_ss,
                m2: ratio(a_sp, a_pp)?,
                strategy,
                a_pp,
                a_sp,
                a_ss,
                n_sets: group.len(),
            });
        }
    }
    Ok(out)
}

/// Among layers whose M1 is within `tie_window` of the best, the one with
/// the lowest M2; remaining ties go to the lowest layer.
pub fn recommend_layer(records: &[MeasureRecord], tie_window: f64) -> Result<u32, MeasureError> {
    recommend_record(records, tie_window).map(|r| r.layer)
}

pub fn recommend_record(records: &[MeasureRecord], tie_window: f64) -> Result<&MeasureRecord, MeasureError> {
    let best = records
        .iter()
        .map(|r| r.m1)
        .fold(f64::NEG_INFINITY, f64::max);
    if records.is_empty() {
        return Err(MeasureError::Empty);
    }
    // absorbs rounding in m1 values that sit exactly on the window edge
    let floor = best - tie_window - 1e-12;
    records
        .iter()
        .filter(|r| r.m1 >= floor)
        .min_by(|a, b| a.m2.total_cmp(&b.m2).then(a.layer.cmp(&b.layer)))
        .ok_or(MeasureError::Empty)
}

/// Recommended record per model.
pub fn recommend_per_model(records: &[MeasureRecord], tie_window: f64) -> Result<Vec<MeasureRecord>, MeasureError> {
    let mut by_model: BTreeMap<&str, Vec<MeasureRecord>> = BTreeMap::new();
    for r in records {
        by_model.entry(r.model.as_str()).or_default().push(r.clone());
    }
    by_model
        .values()
        .map(|rs| recommend_record(rs, tie_window).cloned())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of `r` under a t distribution with `n - 2` degrees
    /// of freedom.
    pub p: f64,
    pub n: usize,
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation, MeasureError> {
    let n = xs.len();
    if n != ys.len() {
        return Err(MeasureError::Correlation(format!("lengths {n} and {}", ys.len())));
    }
    if n < 3 {
        return Err(MeasureError::Correlation(format!("{n} points, need at least 3")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MeasureError::Correlation("non-finite input".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MeasureError::Correlation("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    // P(|T| >= |t|) with t^2 = r^2 df / (1 - r^2) equals I_{1-r^2}(df/2, 1/2)
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        statrs::function::beta::beta_reg(df / 2.0, 0.5, 1.0 - r * r)
    };
    Ok(Correlation { r, p, n })
}

/// Cosine similarity of one token to every token of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub image_id: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchor: (usize, usize),
    /// Row-major.
    pub values: Vec<f64>,
    pub cls: Option<f64>,
}

impl SimilarityGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_w + col]
    }
}

fn cosine(a: &[f32], norm_a: f64, b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        nb += y as f64 * y as f64;
    }
    if nb == 0.0 {
        return 0.0;
    }
    (dot / (norm_a * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Zero-norm tokens get similarity 0.
pub fn cosine_map(embedding: &LayerEmbedding, anchor: (usize, usize)) -> Result<SimilarityGrid, MeasureError> {
    let (gh, gw) = (embedding.grid_h, embedding.grid_w);
    if anchor.0 >= gh || anchor.1 >= gw {
        return Err(MeasureError::AnchorOutOfGrid {
            anchor,
            grid_h: gh,
            grid_w: gw,
        });
    }
    let a = embedding.token_at(anchor.0, anchor.1);
    let norm = a.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(MeasureError::ZeroAnchor);
    }
    Ok(SimilarityGrid {
        image_id: embedding.image_id,
        grid_h: gh,
        grid_w: gw,
        anchor,
        values: (0..gh * gw).map(|i| cosine(a, norm, embedding.token(i))).collect(),
        cls: embedding.cls.as_deref().map(|c| cosine(a, norm, c)),
    })
}

const MEASURES_MAGIC: &str = "#tokprobe-measures\t1";
const MEASURES_COLUMNS: &str = "model\tlayer\tstrategy\tm1\tm2\ta_pp\ta_sp\ta_ss\tn_sets";

/// Contents of a measures file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasureFile {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<MeasureRecord>,
}

/// Tab-separated measures file, records in (model, layer, strategy) order
/// after `#key\tvalue` metadata lines.
pub fn write_measures(file: &MeasureFile, mut w: impl Write) -> std::io::Result<()> {
    let mut sorted: Vec<&MeasureRecord> = file.records.iter().collect();
    sorted.sort_by(|a, b| (&a.model, a.layer, a.strategy).cmp(&(&b.model, b.layer, b.strategy)));
    writeln!(w, "{MEASURES_MAGIC}")?;
    for (k, v) in &file.meta {
        writeln!(w, "#{k}\t{v}")?;
    }
    writeln!(w, "{MEASURES_COLUMNS}")?;
    for r in sorted {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.model, r.layer, r.strategy, r.m1, r.m2, r.a_pp, r.a_sp, r.a_ss, r.n_sets
        )?;
    }
    Ok(())
}

pub fn read_measures(reader: impl BufRead) -> Result<MeasureFile, MeasureError> {
    let perr = |line: usize, msg: String| MeasureError::Parse { line, msg };
    let mut file = MeasureFile::default();
    let mut columns_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| perr(n, e.to_string()))?;
        if n == 1 {
            if line != MEASURES_MAGIC {
                return Err(perr(1, format!("expected {MEASURES_MAGIC:?}")));
            }
            continue;
        }
        if !columns_seen {
            if line == MEASURES_COLUMNS {
                columns_seen = true;
                continue;
            }
            let (k, v) = line
                .strip_prefix('#')
                .and_then(|l| l.split_once('\t'))
                .ok_or_else(|| perr(n, "expected a #key line or the column header".into()))?;
            file.meta.insert(k.to_string(), v.to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(perr(n, format!("{} fields, expected 9", f.len())));
        }
        let num = |s: &str, name: &str| s.parse::<f64>().map_err(|e| perr(n, format!("{name}: {e}")));
        file.records.push(MeasureRecord {
            model: f[0].to_string(),
            layer: f[1].parse().map_err(|e| perr(n, format!("layer: {e}")))?,
            strategy: f[2].parse().map_err(|e| perr(n, e))?,
            m1: num(f[3], "m1")?,
            m2: num(f[4], "m2")?,
            a_pp: num(f[5], "a_pp")?,
            a_sp: num(f[6], "a_sp")?,
            a_ss: num(f[7], "a_ss")?,
            n_sets: f[8].parse().map_err(|e| perr(n, format!("n_sets: {e}")))?,
        });
    }
    if !columns_seen {
        return Err(perr(1, "missing column header".into()));
    }
    Ok(file)
}

pub fn save_measures(file: &MeasureFile, path: impl AsRef<Path>) -> Result<(), MeasureError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_measures(file, &mut buf).expect("write to memory");
    std::fs::write(path, buf).map_err(|source| MeasureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_measures(path: impl AsRef<Path>) -> Result<MeasureFile, MeasureError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeasureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_measures(text.as_bytes())
}
