//! Line-delimited task files.
//!
//! ```text
//! #tokprobe-taskset	1
//! #name	set1
//! #seed	0
//! #primary	cat	dog
//! #secondary	bench	chair	couch	bed
//! image_id	primary	secondary	split
//! 139	0	2	TRAIN
//! ```
//!
//! Global task files use the `#tokprobe-globaltask` magic, a
//! `#train_image_limit` and `#categories` header, and the columns
//! `image_id label split mentioned`.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{GlobalSample, GlobalTask, PairedSample, TaskError, TaskSet, TaskSpec};

const TASKSET_MAGIC: &str = "#tokprobe-taskset";
const GLOBAL_MAGIC: &str = "#tokprobe-globaltask";
const VERSION: &str = "1";

fn perr(line: usize, msg: impl Into<String>) -> TaskError {
    TaskError::Parse {
        line,
        msg: msg.into(),
    }
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<Option<String>, TaskError> {
        self.line += 1;
        self.inner.next().transpose().map_err(TaskError::from)
    }

    fn expect_header(&mut self, key: &str) -> Result<Vec<String>, TaskError> {
        let line = self
            .next_line()?
            .ok_or_else(|| perr(self.line, format!("missing #{key} header")))?;
        let mut fields = line.split('\t');
        if fields.next() != Some(&format!("#{key}")) {
            return Err(perr(self.line, format!("expected #{key} header, got {line:?}")));
        }
        Ok(fields.map(str::to_string).collect())
    }

    fn expect_single(&mut self, key: &str) -> Result<String, TaskError> {
        let mut v = self.expect_header(key)?;
        if v.len() != 1 {
            return Err(perr(self.line, format!("#{key} takes one value")));
        }
        Ok(v.remove(0))
    }

    fn expect_exact(&mut self, text: &str) -> Result<(), TaskError> {
        match self.next_line()? {
            Some(l) if l == text => Ok(()),
            other => Err(perr(self.line, format!("expected {text:?}, got {other:?}"))),
        }
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, raw: Option<&str>) -> Result<T, TaskError>
where
    T::Err: std::fmt::Display,
{
    let raw = raw.ok_or_else(|| perr(line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|e| perr(line, format!("column {name}: {e} ({raw:?})")))
}

impl TaskSet {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let spec = &self.spec;
        writeln!(w, "{TASKSET_MAGIC}\t{VERSION}")?;
        writeln!(w, "#name\t{}", spec.name)?;
        writeln!(w, "#seed\t{}", spec.seed)?;
        writeln!(w, "#primary\t{}", spec.primary_categories.join("\t"))?;
        writeln!(w, "#secondary\t{}", spec.secondary_categories.join("\t"))?;
        writeln!(w, "image_id\tprimary\tsecondary\tsplit")?;
        for s in &self.samples {
            writeln!(w, "{}\t{}\t{}\t{}", s.image_id, s.primary, s.secondary, s.split)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TaskError> {
        let mut lines = Lines {
            inner: r.lines(),
            line: 0,
        };
        let version = lines.expect_single(&TASKSET_MAGIC[1..])?;
        if version != VERSION {
            return Err(perr(1, format!("unsupported task file version {version}")));
        }
        let name = lines.expect_single("name")?;
        let seed_raw = lines.expect_single("seed")?;
        let seed = parse_field(lines.line, "seed", Some(&seed_raw))?;
        let primary = lines.expect_header("primary")?;
        let secondary = lines.expect_header("secondary")?;
        lines.expect_exact("image_id\tprimary\tsecondary\tsplit")?;
        let spec = TaskSpec {
            name,
            primary_categories: primary,
            secondary_categories: secondary,
            seed,
        };
        spec.validate()?;
        let mut samples = Vec::new();
        while let Some(row) = lines.next_line()? {
            if row.is_empty() {
                continue;
            }
            let n = lines.line;
            let mut f = row.split('\t');
            let sample = PairedSample {
                image_id: parse_field(n, "image_id", f.next())?,
                primary: parse_field(n, "primary", f.next())?,
                secondary: parse_field(n, "secondary", f.next())?,
                split: parse_field(n, "split", f.next())?,
            };
            if sample.primary >= spec.primary_categories.len()
                || sample.secondary >= spec.secondary_categories.len()
            {
                return Err(perr(n, "label index out of range"));
            }
            samples.push(sample);
        }
        Ok(TaskSet { spec, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TaskError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl GlobalTask {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{GLOBAL_MAGIC}\t{VERSION}")?;
        writeln!(w, "#train_image_limit\t{}", self.train_image_limit)?;
        writeln!(w, "#categories\t{}", self.categories.join("\t"))?;
        writeln!(w, "image_id\tlabel\tsplit\tmentioned")?;
        for s in &self.samples {
            writeln!(w, "{}\t{}\t{}\t{}", s.image_id, s.label, s.split, s.mentioned as u8)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TaskError> {
        let mut lines = Lines {
            inner: r.lines(),
            line: 0,
        };
        let version = lines.expect_single(&GLOBAL_MAGIC[1..])?;
        if version != VERSION {
            return Err(perr(1, format!("unsupported task file version {version}")));
        }
        let limit_raw = lines.expect_single("train_image_limit")?;
        let train_image_limit = parse_field(lines.line, "train_image_limit", Some(&limit_raw))?;
        let categories = lines.expect_header("categories")?;
        lines.expect_exact("image_id\tlabel\tsplit\tmentioned")?;
        let mut samples = Vec::new();
        while let Some(row) = lines.next_line()? {
            if row.is_empty() {
                continue;
            }
            let n = lines.line;
            let mut f = row.split('\t');
            let image_id = parse_field(n, "image_id", f.next())?;
            let label: usize = parse_field(n, "label", f.next())?;
            let split = parse_field(n, "split", f.next())?;
            let mentioned = match f.next() {
                Some("1") => true,
                Some("0") => false,
                other => return Err(perr(n, format!("mentioned must be 0 or 1, got {other:?}"))),
            };
            if label >= categories.len() {
                return Err(perr(n, "label index out of range"));
            }
            samples.push(GlobalSample {
                image_id,
                label,
                split,
                mentioned,
            });
        }
        Ok(GlobalTask {
            categories,
            train_image_limit,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TaskError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
