use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerEmbedding, LayerFileHeader, LayerReader, StoreError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer: u32,
    /// Path relative to the manifest's directory.
    pub file: String,
    pub grid_h: u32,
    pub grid_w: u32,
    pub embed_dim: u32,
    pub has_cls: bool,
}

/// Describes one extraction run: a model's layer files and how inputs were
/// preprocessed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub model: String,
    pub preprocessing: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hook_point: Option<String>,
    pub layers: Vec<ManifestLayer>,
    /// Image ids the extractor could not process.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_images: Vec<u64>,
}

impl StoreManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn layer(&self, layer: u32) -> Option<&ManifestLayer> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// A directory holding a manifest and its layer files.
#[derive(Debug, Clone)]
pub struct LayerStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

impl LayerStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = StoreManifest::load(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn layer_path(&self, layer: u32) -> Result<PathBuf, StoreError> {
        self.manifest
            .layer(layer)
            .map(|l| self.dir.join(&l.file))
            .ok_or(StoreError::MissingLayer(layer))
    }

    /// Open a layer file and check it against the manifest entry.
    pub fn open_layer(&self, layer: u32) -> Result<LayerReader, StoreError> {
        let entry = self.manifest.layer(layer).ok_or(StoreError::MissingLayer(layer))?;
        let reader = LayerReader::open(self.dir.join(&entry.file))?;
        let h = reader.header();
        if (h.layer_index, h.grid_h, h.grid_w, h.embed_dim, h.has_cls)
            != (entry.layer, entry.grid_h, entry.grid_w, entry.embed_dim, entry.has_cls)
        {
            return Err(StoreError::Manifest(format!(
                "{} disagrees with manifest entry for layer {layer}",
                entry.file
            )));
        }
        if h.model_name != self.manifest.model {
            return Err(StoreError::Manifest(format!(
                "{} belongs to model {:?}, manifest names {:?}",
                entry.file, h.model_name, self.manifest.model
            )));
        }
        Ok(reader)
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.manifest.layers.iter().map(|l| l.layer).collect();
        l.sort_unstable();
        l
    }
}

/// The same layer of one model spread over several files, e.g. train and
/// validation extractions. Lookups try each file in turn.
#[derive(Debug)]
pub struct LayerReaderSet {
    readers: Vec<LayerReader>,
}

impl LayerReaderSet {
    pub fn new(readers: Vec<LayerReader>) -> Result<Self, StoreError> {
        let first = readers
            .first()
            .ok_or_else(|| StoreError::Manifest("no layer files given".into()))?
            .header();
        for r in &readers[1..] {
            let h = r.header();
            if (&h.model_name, h.layer_index, h.grid_h, h.grid_w, h.embed_dim, h.has_cls)
                != (
                    &first.model_name,
                    first.layer_index,
                    first.grid_h,
                    first.grid_w,
                    first.embed_dim,
                    first.has_cls,
                )
            {
                return Err(StoreError::Manifest(format!(
                    "{} is incompatible with {}",
                    r.path().display(),
                    readers[0].path().display()
                )));
            }
        }
        Ok(Self { readers })
    }

    /// Open `layer` in every store that has it.
    pub fn open(stores: &[LayerStore], layer: u32) -> Result<Self, StoreError> {
        let readers = stores
            .iter()
            .filter(|s| s.manifest.layer(layer).is_some())
            .map(|s| s.open_layer(layer))
            .collect::<Result<Vec<_>, _>>()?;
        if readers.is_empty() {
            return Err(StoreError::MissingLayer(layer));
        }
        Self::new(readers)
    }

    pub fn header(&self) -> &LayerFileHeader {
        self.readers[0].header()
    }

    pub fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError> {
        self.readers
            .iter()
            .find(|r| r.contains(image_id))
            .ok_or(StoreError::NotFound(image_id))?
            .fetch(image_id)
    }
}
