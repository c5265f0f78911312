//! `TOKPROB1` per-layer token embedding files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "TOKPROB1"
//! name_len     u32
//! model_name   name_len bytes, UTF-8
//! layer_index  u32
//! grid_h       u32
//! grid_w       u32
//! embed_dim    u32
//! has_cls      u8       0 or 1
//! dtype        u8       0 = f32
//! record_count u64
//! records      record_count x stride
//!     image_id u64
//!     cls      embed_dim x f32          (only when has_cls)
//!     tokens   grid_h x grid_w x embed_dim x f32, row-major
//! trailer      u64      record_count again
//! ```
//!
//! Records are sorted by strictly increasing image id, so a record's offset
//! is `header_len + index * stride`.

mod manifest;
pub mod synthetic;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{LayerReaderSet, LayerStore, ManifestLayer, StoreManifest, MANIFEST_FILE};

pub const MAGIC: &[u8; 8] = b"TOKPROB1";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a TOKPROB1 file")]
    BadMagic { path: String },
    #[error("{path}: malformed header at byte {offset}: {msg}")]
    Header {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error("{path}: truncated at byte {offset}, expected {expected} bytes")]
    Truncated {
        path: String,
        offset: u64,
        expected: u64,
    },
    #[error("{path}: {extra} unexpected trailing bytes after byte {offset}")]
    TrailingBytes { path: String, offset: u64, extra: u64 },
    #[error("{path}: trailer at byte {offset} records {found} entries, header says {expected}")]
    CountMismatch {
        path: String,
        offset: u64,
        found: u64,
        expected: u64,
    },
    #[error("image id {id} at byte {offset} does not exceed previous id {previous}")]
    NonIncreasingId { id: u64, previous: u64, offset: u64 },
    #[error("non-finite value in image {image_id} at byte {offset}")]
    NonFinite { image_id: u64, offset: u64 },
    #[error("record for image {image_id} does not match header: {msg}")]
    DimMismatch { image_id: u64, msg: String },
    #[error("image {0} not found")]
    NotFound(u64),
    #[error("layer {0} not in store")]
    MissingLayer(u32),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("synthetic layout: {0}")]
    Layout(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFileHeader {
    pub model_name: String,
    pub layer_index: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub embed_dim: u32,
    pub has_cls: bool,
    pub record_count: u64,
}

impl LayerFileHeader {
    pub fn n_tokens(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
    }

    /// Encoded header length in bytes.
    pub fn byte_len(&self) -> u64 {
        8 + 4 + self.model_name.len() as u64 + 4 * 4 + 1 + 1 + 8
    }

    /// Bytes per record: id, optional CLS vector, token block.
    pub fn stride(&self) -> u64 {
        let d = self.embed_dim as u64;
        8 + if self.has_cls { 4 * d } else { 0 } + 4 * d * self.n_tokens() as u64
    }

    /// Exact size of a file holding `record_count` records.
    pub fn file_len(&self) -> u64 {
        self.byte_len() + self.record_count * self.stride() + 8
    }

    fn validate(&self) -> Result<(), String> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(format!("token grid {}x{} is empty", self.grid_h, self.grid_w));
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be at least 1".into());
        }
        if u32::try_from(self.model_name.len()).is_err() {
            return Err("model name too long".into());
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.model_name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model_name.as_bytes());
        for v in [self.layer_index, self.grid_h, self.grid_w, self.embed_dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.has_cls as u8);
        out.push(DTYPE_F32);
        out.extend_from_slice(&self.record_count.to_le_bytes());
        out
    }
}

/// One image's vectors at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEmbedding {
    pub image_id: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub cls: Option<Vec<f32>>,
    /// `grid_h * grid_w * embed_dim` values, token-major, rows first.
    pub tokens: Vec<f32>,
}

impl LayerEmbedding {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Vector of the token at row-major index `i`.
    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn token_at(&self, row: usize, col: usize) -> &[f32] {
        self.token(row * self.grid_w + col)
    }

    fn check_against(&self, h: &LayerFileHeader) -> Result<(), StoreError> {
        let mismatch = |msg: String| StoreError::DimMismatch {
            image_id: self.image_id,
            msg,
        };
        if (self.grid_h, self.grid_w, self.embed_dim)
            != (h.grid_h as usize, h.grid_w as usize, h.embed_dim as usize)
        {
            return Err(mismatch(format!(
                "dims {}x{}x{} vs header {}x{}x{}",
                self.grid_h, self.grid_w, self.embed_dim, h.grid_h, h.grid_w, h.embed_dim
            )));
        }
        if self.tokens.len() != h.n_tokens() * h.embed_dim as usize {
            return Err(mismatch(format!("token block has {} values", self.tokens.len())));
        }
        match (&self.cls, h.has_cls) {
            (Some(c), true) if c.len() == h.embed_dim as usize => Ok(()),
            (None, false) => Ok(()),
            (Some(c), true) => Err(mismatch(format!("cls has {} values", c.len()))),
            (Some(_), false) => Err(mismatch("cls present but header has_cls = false".into())),
            (None, true) => Err(mismatch("cls missing but header has_cls = true".into())),
        }
    }
}

/// Streaming writer. Records must arrive in strictly increasing id order
/// and match the header's dimensions; [`LayerWriter::finish`] checks the
/// count and writes the trailer.
pub struct LayerWriter {
    header: LayerFileHeader,
    out: BufWriter<File>,
    path: PathBuf,
    written: u64,
    last_id: Option<u64>,
}

impl LayerWriter {
    pub fn create(path: impl AsRef<Path>, header: LayerFileHeader) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        header.validate().map_err(|msg| StoreError::Header {
            path: path.display().to_string(),
            offset: 0,
            msg,
        })?;
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(io_err(&path))?;
        Ok(Self {
            header,
            out,
            path,
            written: 0,
            last_id: None,
        })
    }

    pub fn write(&mut self, record: &LayerEmbedding) -> Result<(), StoreError> {
        record.check_against(&self.header)?;
        let offset = self.header.byte_len() + self.written * self.header.stride();
        if let Some(previous) = self.last_id {
            if record.image_id <= previous {
                return Err(StoreError::NonIncreasingId {
                    id: record.image_id,
                    previous,
                    offset,
                });
            }
        }
        if self.written == self.header.record_count {
            return Err(StoreError::CountMismatch {
                path: self.path.display().to_string(),
                offset,
                found: self.written + 1,
                expected: self.header.record_count,
            });
        }
        let values = record.cls.iter().flatten().chain(&record.tokens);
        if let Some(pos) = values.clone().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                image_id: record.image_id,
                offset: offset + 8 + 4 * pos as u64,
            });
        }
        let mut buf = Vec::with_capacity(self.header.stride() as usize);
        buf.extend_from_slice(&record.image_id.to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(io_err(&self.path))?;
        self.written += 1;
        self.last_id = Some(record.image_id);
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), StoreError> {
        if self.written != self.header.record_count {
            return Err(StoreError::CountMismatch {
                path: self.path.display().to_string(),
                offset: self.header.byte_len() + self.written * self.header.stride(),
                found: self.written,
                expected: self.header.record_count,
            });
        }
        self.out
            .write_all(&self.written.to_le_bytes())
            .map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Write a complete layer file.
pub fn write_layer_file<'a>(
    header: &LayerFileHeader,
    records: impl IntoIterator<Item = &'a LayerEmbedding>,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let mut w = LayerWriter::create(path, header.clone())?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// Random-access reader. Holds the id column in memory; vectors are read
/// on demand with positioned reads, so one reader can serve many threads.
#[derive(Debug)]
pub struct LayerReader {
    path: PathBuf,
    file: File,
    header: LayerFileHeader,
    ids: Vec<u64>,
}

impl LayerReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let pstr = path.display().to_string();
        let file = File::open(&path).map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        let truncated = |expected: u64| StoreError::Truncated {
            path: pstr.clone(),
            offset: len,
            expected,
        };

        let mut fixed = [0u8; 12];
        if len < 12 {
            if len >= 8 {
                read_exact_at(&file, &mut fixed[..8], 0).map_err(io_err(&path))?;
                if &fixed[..8] != MAGIC {
                    return Err(StoreError::BadMagic { path: pstr });
                }
            }
            return Err(truncated(12));
        }
        read_exact_at(&file, &mut fixed, 0).map_err(io_err(&path))?;
        if &fixed[..8] != MAGIC {
            return Err(StoreError::BadMagic { path: pstr });
        }
        let name_len = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as u64;
        let header_len = 12 + name_len + 26;
        if len < header_len {
            return Err(truncated(header_len));
        }
        let mut rest = vec![0u8; (name_len + 26) as usize];
        read_exact_at(&file, &mut rest, 12).map_err(io_err(&path))?;
        let model_name = String::from_utf8(rest[..name_len as usize].to_vec()).map_err(|_| {
            StoreError::Header {
                path: pstr.clone(),
                offset: 12,
                msg: "model name is not UTF-8".into(),
            }
        })?;
        let tail = &rest[name_len as usize..];
        let u32_at = |i: usize| u32::from_le_bytes(tail[i..i + 4].try_into().unwrap());
        let has_cls = match tail[16] {
            0 => false,
            1 => true,
            other => {
                return Err(StoreError::Header {
                    path: pstr,
                    offset: 12 + name_len + 16,
                    msg: format!("has_cls byte is {other}"),
                })
            }
        };
        if tail[17] != DTYPE_F32 {
            return Err(StoreError::Header {
                path: pstr,
                offset: 12 + name_len + 17,
                msg: format!("unsupported dtype {}", tail[17]),
            });
        }
        let header = LayerFileHeader {
            model_name,
            layer_index: u32_at(0),
            grid_h: u32_at(4),
            grid_w: u32_at(8),
            embed_dim: u32_at(12),
            has_cls,
            record_count: u64::from_le_bytes(tail[18..26].try_into().unwrap()),
        };
        header.validate().map_err(|msg| StoreError::Header {
            path: pstr.clone(),
            offset: 12 + name_len,
            msg,
        })?;
        debug_assert_eq!(header.byte_len(), header_len);

        let expected = header
            .record_count
            .checked_mul(header.stride())
            .and_then(|b| b.checked_add(header_len + 8))
            .ok_or_else(|| StoreError::Header {
                path: pstr.clone(),
                offset: 12 + name_len + 18,
                msg: "record count overflows".into(),
            })?;
        if len < expected {
            return Err(truncated(expected));
        }
        if len > expected {
            return Err(StoreError::TrailingBytes {
                path: pstr,
                offset: expected,
                extra: len - expected,
            });
        }
        let mut word = [0u8; 8];
        read_exact_at(&file, &mut word, expected - 8).map_err(io_err(&path))?;
        let trailer = u64::from_le_bytes(word);
        if trailer != header.record_count {
            return Err(StoreError::CountMismatch {
                path: pstr,
                offset: expected - 8,
                found: trailer,
                expected: header.record_count,
            });
        }

        let mut ids = Vec::with_capacity(header.record_count as usize);
        for i in 0..header.record_count {
            let offset = header_len + i * header.stride();
            read_exact_at(&file, &mut word, offset).map_err(io_err(&path))?;
            let id = u64::from_le_bytes(word);
            if let Some(&previous) = ids.last() {
                if id <= previous {
                    return Err(StoreError::NonIncreasingId { id, previous, offset });
                }
            }
            ids.push(id);
        }
        Ok(Self {
            path,
            file,
            header,
            ids,
        })
    }

    pub fn header(&self) -> &LayerFileHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.ids.binary_search(&image_id).is_ok()
    }

    pub fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError> {
        let idx = self
            .ids
            .binary_search(&image_id)
            .map_err(|_| StoreError::NotFound(image_id))?;
        self.read_record(idx)
    }

    /// Record at position `idx` in id order.
    pub fn read_record(&self, idx: usize) -> Result<LayerEmbedding, StoreError> {
        let h = &self.header;
        let offset = h.byte_len() + idx as u64 * h.stride();
        let mut buf = vec![0u8; h.stride() as usize];
        read_exact_at(&self.file, &mut buf, offset).map_err(io_err(&self.path))?;
        let image_id = u64::from_le_bytes(buf[..8].try_into().unwrap());
        let mut values = Vec::with_capacity((buf.len() - 8) / 4);
        for (k, chunk) in buf[8..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(StoreError::NonFinite {
                    image_id,
                    offset: offset + 8 + 4 * k as u64,
                });
            }
            values.push(v);
        }
        let d = h.embed_dim as usize;
        let cls = h.has_cls.then(|| values.drain(..d).collect());
        Ok(LayerEmbedding {
            image_id,
            grid_h: h.grid_h as usize,
            grid_w: h.grid_w as usize,
            embed_dim: d,
            cls,
            tokens: values,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<LayerEmbedding, StoreError>> + '_ {
        (0..self.len()).map(|i| self.read_record(i))
    }
}

/// Summary of a structurally valid file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub header: LayerFileHeader,
    pub file_len: u64,
}

/// Full structural check: header, exact size, trailer, increasing ids and
/// finite values in every record.
pub fn validate_layer_file(path: impl AsRef<Path>) -> Result<ValidationReport, StoreError> {
    let reader = LayerReader::open(&path)?;
    for record in reader.iter() {
        record?;
    }
    Ok(ValidationReport {
        file_len: reader.header.file_len(),
        header: reader.header,
    })
}
