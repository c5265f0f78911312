use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MeasureError, MeasureRecord, SimilarityGrid};
use crate::probe::{AccuracyTable, GlobalTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub model: String,
    pub layer: u32,
    pub m1: f64,
    pub m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub name: String,
    pub n: usize,
    pub r: f64,
    pub p: f64,
}

/// Everything one analysis produced, plus the settings behind it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Digest of the run manifest the inputs came from.
    pub manifest_digest: Option<String>,
    pub settings: BTreeMap<String, String>,
    pub measures: Vec<MeasureRecord>,
    pub recommendations: Vec<Recommendation>,
    pub correlations: Vec<CorrelationRecord>,
    pub tables: Vec<AccuracyTable>,
    pub global: Vec<GlobalTable>,
}

impl Report {
    /// Put every list in its canonical order.
    pub fn normalize(&mut self) {
        self.measures
            .sort_by(|a, b| (&a.model, a.layer, a.strategy).cmp(&(&b.model, b.layer, b.strategy)));
        self.recommendations.sort_by(|a, b| a.model.cmp(&b.model));
        self.correlations.sort_by(|a, b| a.name.cmp(&b.name));
        for t in &mut self.tables {
            t.normalize();
        }
        self.tables.sort_by(|a, b| (&a.model, &a.task).cmp(&(&b.model, &b.task)));
        for g in &mut self.global {
            g.rows.sort_by_key(|r| (r.layer, r.strategy));
        }
        self.global.sort_by(|a, b| a.model.cmp(&b.model));
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("#tokprobe-report\t1".into());
        if let Some(d) = &self.manifest_digest {
            line(format!("#manifest_digest\t{d}"));
        }
        for (k, v) in &self.settings {
            line(format!("#setting\t{k}\t{v}"));
        }
        line("[measures]".into());
        line("model\tlayer\tstrategy\tm1\tm2\ta_pp\ta_sp\ta_ss\tn_sets".into());
        for r in &self.measures {
            line(format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.model, r.layer, r.strategy, r.m1, r.m2, r.a_pp, r.a_sp, r.a_ss, r.n_sets
            ));
        }
        line("[recommendations]".into());
        line("model\tlayer\tm1\tm2".into());
        for r in &self.recommendations {
            line(format!("{}\t{}\t{}\t{}", r.model, r.layer, r.m1, r.m2));
        }
        line("[correlations]".into());
        line("name\tn\tr\tp".into());
        for c in &self.correlations {
            line(format!("{}\t{}\t{}\t{}", c.name, c.n, c.r, c.p));
        }
        line("[accuracy]".into());
        line("model\ttask\tlayer\tsource\ttarget\taccuracy\tn_test".into());
        for t in &self.tables {
            for r in &t.rows {
                line(format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    t.model, t.task, r.layer, r.source, r.target, r.accuracy, r.n_test
                ));
            }
        }
        line("[global]".into());
        line("model\tlayer\tstrategy\taccuracy\tin_caption\tnot_in_caption".into());
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for g in &self.global {
            for r in &g.rows {
                line(format!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    g.model,
                    r.layer,
                    r.strategy,
                    r.overall.accuracy,
                    na(r.in_caption.map(|s| s.accuracy)),
                    na(r.not_in_caption.map(|s| s.accuracy))
                ));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Json,
}

impl ReportFormat {
    /// JSON for `.json` paths, tab-separated text otherwise.
    pub fn from_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            ReportFormat::Json
        } else {
            ReportFormat::Tsv
        }
    }
}

/// Write a normalized copy of `report`.
pub fn emit_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), MeasureError> {
    let path = path.as_ref();
    let mut report = report.clone();
    report.normalize();
    let text = match format {
        ReportFormat::Tsv => report.to_tsv(),
        ReportFormat::Json => report.to_json(),
    };
    std::fs::write(path, text).map_err(|source| MeasureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a JSON report.
pub fn load_report(path: impl AsRef<Path>) -> Result<Report, MeasureError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeasureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| MeasureError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Per-layer accuracy curves, one row per (model, task, source, target, layer).
pub fn accuracy_curves(tables: &[AccuracyTable]) -> String {
    let mut rows = Vec::new();
    for t in tables {
        for r in &t.rows {
            rows.push((t.model.as_str(), t.task.as_str(), r.source, r.target, r.layer, r.accuracy));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1, a.2, a.3, a.4).cmp(&(b.0, b.1, b.2, b.3, b.4)));
    let mut s = String::from("model\ttask\tsource\ttarget\tlayer\taccuracy\n");
    for (m, t, src, tgt, l, a) in rows {
        let _ = writeln!(s, "{m}\t{t}\t{src}\t{tgt}\t{l}\t{a}");
    }
    s
}

/// A similarity grid as `grid_h` tab-separated rows under a short header.
pub fn similarity_tsv(grid: &SimilarityGrid) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "#image_id\t{}", grid.image_id);
    let _ = writeln!(s, "#anchor\t{}\t{}", grid.anchor.0, grid.anchor.1);
    if let Some(c) = grid.cls {
        let _ = writeln!(s, "#cls\t{c}");
    }
    for row in grid.values.chunks(grid.grid_w) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join("\t"));
        s.push('\n');
    }
    s
}
