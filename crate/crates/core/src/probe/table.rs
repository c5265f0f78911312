use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProbeError, Target, TokenSource};
use crate::select::Strategy;

const ACCURACY_MAGIC: &str = "#tokprobe-accuracy\t1";
const GLOBAL_MAGIC: &str = "#tokprobe-global-accuracy\t1";
const ACCURACY_COLUMNS: &str =
    "layer\tsource\ttarget\taccuracy\tn_train\tn_test\tval_accuracy\tn_val\tepochs_run\tconverged";
const GLOBAL_COLUMNS: &str = "layer\tstrategy\taccuracy\tn_test\tin_caption\tn_in_caption\tnot_in_caption\tn_not_in_caption\tn_train\tepochs_run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub layer: u32,
    pub source: TokenSource,
    pub target: Target,
    /// Test accuracy.
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub val_accuracy: Option<f64>,
    pub n_val: usize,
    pub epochs_run: usize,
    pub converged: bool,
}

/// Paired-task accuracies keyed by (layer, token source, target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub model: String,
    pub task: String,
    /// Settings the table was produced with, e.g. seeds and thresholds.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<AccuracyRow>,
}

fn key(r: &AccuracyRow) -> (u32, TokenSource, Target) {
    (r.layer, r.source, r.target)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProbeError + '_ {
    move |source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), ProbeError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(io_err(path))?;
    std::fs::write(path, buf).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("table serializes");
    s.push('\n');
    s
}

/// Header lines (`#key\tvalue`) followed by the column line, then rows.
struct TsvReader {
    meta: Vec<(String, String)>,
    rows: Vec<(usize, Vec<String>)>,
}

impl TsvReader {
    fn parse(reader: impl BufRead, magic: &str, columns: &str) -> Result<Self, ProbeError> {
        let mut lines = reader.lines().enumerate();
        let perr = |line: usize, msg: String| ProbeError::Parse { line, msg };
        let read = |r: Option<(usize, std::io::Result<String>)>| -> Result<Option<(usize, String)>, ProbeError> {
            match r {
                None => Ok(None),
                Some((i, Ok(l))) => Ok(Some((i + 1, l))),
                Some((i, Err(e))) => Err(perr(i + 1, e.to_string())),
            }
        };
        match read(lines.next())? {
            Some((_, l)) if l == magic => {}
            _ => return Err(perr(1, format!("expected {magic:?}"))),
        }
        let mut meta = Vec::new();
        loop {
            match read(lines.next())? {
                Some((n, l)) if l.starts_with('#') => {
                    let (k, v) = l[1..]
                        .split_once('\t')
                        .ok_or_else(|| perr(n, "header line without a tab".into()))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                Some((_, l)) if l == columns => break,
                Some((n, _)) => return Err(perr(n, "unexpected column header".into())),
                None => return Err(perr(0, "missing column header".into())),
            }
        }
        let width = columns.split('\t').count();
        let mut rows = Vec::new();
        while let Some((n, l)) = read(lines.next())? {
            if l.is_empty() {
                continue;
            }
            let fields: Vec<String> = l.split('\t').map(str::to_string).collect();
            if fields.len() != width {
                return Err(perr(n, format!("{} fields, expected {width}", fields.len())));
            }
            rows.push((n, fields));
        }
        Ok(Self { meta, rows })
    }
}

fn field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T, ProbeError>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| ProbeError::Parse { line, msg: format!("{name}: {e}") })
}

fn opt_field(line: usize, name: &str, s: &str) -> Result<Option<f64>, ProbeError> {
    if s == "NA" {
        Ok(None)
    } else {
        field(line, name, s).map(Some)
    }
}

impl AccuracyTable {
    pub fn new(model: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            task: task.into(),
            meta: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    /// Sort rows by key; a later row replaces an earlier one with the same key.
    pub fn normalize(&mut self) {
        let mut map = BTreeMap::new();
        for r in self.rows.drain(..) {
            map.insert(key(&r), r);
        }
        self.rows = map.into_values().collect();
    }

    pub fn get(&self, layer: u32, source: TokenSource, target: Target) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| key(r) == (layer, source, target))
    }

    pub fn accuracy(&self, layer: u32, source: TokenSource, target: Target) -> Option<f64> {
        self.get(layer, source, target).map(|r| r.accuracy)
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.rows.iter().map(|r| r.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{ACCURACY_MAGIC}")?;
        writeln!(w, "#model\t{}", self.model)?;
        writeln!(w, "#task\t{}", self.task)?;
        for (k, v) in &self.meta {
            writeln!(w, "#{k}\t{v}")?;
        }
        writeln!(w, "{ACCURACY_COLUMNS}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.layer,
                r.source,
                r.target,
                r.accuracy,
                r.n_train,
                r.n_test,
                opt(r.val_accuracy),
                r.n_val,
                r.epochs_run,
                r.converged as u8
            )?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<Self, ProbeError> {
        let tsv = TsvReader::parse(reader, ACCURACY_MAGIC, ACCURACY_COLUMNS)?;
        let mut table = Self::new("", "");
        for (k, v) in tsv.meta {
            match k.as_str() {
                "model" => table.model = v,
                "task" => table.task = v,
                _ => {
                    table.meta.insert(k, v);
                }
            }
        }
        for (n, f) in tsv.rows {
            table.rows.push(AccuracyRow {
                layer: field(n, "layer", &f[0])?,
                source: field(n, "source", &f[1])?,
                target: field(n, "target", &f[2])?,
                accuracy: field(n, "accuracy", &f[3])?,
                n_train: field(n, "n_train", &f[4])?,
                n_test: field(n, "n_test", &f[5])?,
                val_accuracy: opt_field(n, "val_accuracy", &f[6])?,
                n_val: field(n, "n_val", &f[7])?,
                epochs_run: field(n, "epochs_run", &f[8])?,
                converged: field::<u8>(n, "converged", &f[9])? != 0,
            });
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, ProbeError> {
        serde_json::from_str(text).map_err(|e| ProbeError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Write JSON when the path ends in `.json`, tab-separated text otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        let path = path.as_ref();
        if is_json(path) {
            write_file(path, |b| b.write_all(self.to_json().as_bytes()))
        } else {
            write_file(path, |b| self.write_tsv(b))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        if is_json(path) {
            Self::from_json(&text)
        } else {
            Self::read_tsv(text.as_bytes())
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub layer: u32,
    pub strategy: Strategy,
    pub overall: SubsetAccuracy,
    /// Test samples whose category a caption names; absent when too few.
    pub in_caption: Option<SubsetAccuracy>,
    pub not_in_caption: Option<SubsetAccuracy>,
    pub n_train: usize,
    pub epochs_run: usize,
}

/// Many-class accuracies keyed by (layer, strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalTable {
    pub model: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<GlobalRow>,
}

impl GlobalTable {
    pub fn get(&self, layer: u32, strategy: Strategy) -> Option<&GlobalRow> {
        self.rows.iter().find(|r| (r.layer, r.strategy) == (layer, strategy))
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{GLOBAL_MAGIC}")?;
        writeln!(w, "#model\t{}", self.model)?;
        for (k, v) in &self.meta {
            writeln!(w, "#{k}\t{v}")?;
        }
        writeln!(w, "{GLOBAL_COLUMNS}")?;
        let split = |s: Option<SubsetAccuracy>| match s {
            Some(s) => (s.accuracy.to_string(), s.n),
            None => ("NA".to_string(), 0),
        };
        for r in &self.rows {
            let (ia, inn) = split(r.in_caption);
            let (na, nn) = split(r.not_in_caption);
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{ia}\t{inn}\t{na}\t{nn}\t{}\t{}",
                r.layer, r.strategy, r.overall.accuracy, r.overall.n, r.n_train, r.epochs_run
            )?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<Self, ProbeError> {
        let tsv = TsvReader::parse(reader, GLOBAL_MAGIC, GLOBAL_COLUMNS)?;
        let mut table = GlobalTable {
            model: String::new(),
            meta: BTreeMap::new(),
            rows: Vec::new(),
        };
        for (k, v) in tsv.meta {
            if k == "model" {
                table.model = v;
            } else {
                table.meta.insert(k, v);
            }
        }
        for (n, f) in tsv.rows {
            let subset = |a: &str, c: &str, name: &str| -> Result<Option<SubsetAccuracy>, ProbeError> {
                Ok(opt_field(n, name, a)?.map(|accuracy| SubsetAccuracy {
                    accuracy,
                    n: c.parse().unwrap_or(0),
                }))
            };
            table.rows.push(GlobalRow {
                layer: field(n, "layer", &f[0])?,
                strategy: field(n, "strategy", &f[1])?,
                overall: SubsetAccuracy {
                    accuracy: field(n, "accuracy", &f[2])?,
                    n: field(n, "n_test", &f[3])?,
                },
                in_caption: subset(&f[4], &f[5], "in_caption")?,
                not_in_caption: subset(&f[6], &f[7], "not_in_caption")?,
                n_train: field(n, "n_train", &f[8])?,
                epochs_run: field(n, "epochs_run", &f[9])?,
            });
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        let path = path.as_ref();
        if is_json(path) {
            write_file(path, |b| b.write_all(self.to_json().as_bytes()))
        } else {
            write_file(path, |b| self.write_tsv(b))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        if is_json(path) {
            serde_json::from_str(&text).map_err(|e| ProbeError::Parse {
                line: e.line(),
                msg: e.to_string(),
            })
        } else {
            Self::read_tsv(text.as_bytes())
        }
    }
}
