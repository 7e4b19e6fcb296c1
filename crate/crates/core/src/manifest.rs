//! Image-set directory format.
//!
//! A set directory holds `manifest.json` next to the files it names. The
//! manifest is parsed strictly: unknown keys are an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, load_mask, ImageSet, LayerDecomposition, LinearImage};
use crate::sidecar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetManifest {
    pub schema_version: u32,
    /// Name of the reference view; must appear exactly once in `images`.
    pub reference: String,
    pub mask: String,
    /// 8/16-bit RGB PNG views, in order.
    pub images: Vec<String>,
    /// Optional float sidecars for the views; used instead of the PNGs
    /// when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_images: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
}

/// Float sidecar names of the ground-truth layers, one per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFiles {
    pub highlight: Vec<String>,
    pub albedo: Vec<String>,
    pub shading: Vec<String>,
}

impl SetManifest {
    /// Parses and validates `dir/manifest.json`.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Manifest(format!("missing file {}", path.display())))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let manifest: SetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate(dir)?;
        Ok(manifest)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn reference_index(&self) -> Result<usize> {
        let hits: Vec<usize> = self
            .images
            .iter()
            .enumerate()
            .filter_map(|(i, n)| (*n == self.reference).then_some(i))
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Manifest(format!(
                "reference {} is not among the images",
                self.reference
            ))),
            _ => Err(Error::Manifest(format!(
                "reference {} is listed more than once",
                self.reference
            ))),
        }
    }

    /// Checks the schema version, list lengths and that every named file
    /// exists.
    pub fn validate(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.images.len() < 2 {
            return Err(Error::Manifest(format!(
                "a set needs at least 2 images, manifest lists {}",
                self.images.len()
            )));
        }
        self.reference_index()?;
        let n = self.images.len();
        let mut names: Vec<&String> = vec![&self.mask];
        names.extend(&self.images);
        if let Some(raw) = &self.raw_images {
            check_len("raw_images", raw.len(), n)?;
            names.extend(raw);
        }
        if let Some(gt) = &self.ground_truth {
            check_len("ground_truth.highlight", gt.highlight.len(), n)?;
            check_len("ground_truth.albedo", gt.albedo.len(), n)?;
            check_len("ground_truth.shading", gt.shading.len(), n)?;
            names.extend(gt.highlight.iter().chain(&gt.albedo).chain(&gt.shading));
        }
        for name in names {
            if Path::new(name).components().count() != 1 {
                return Err(Error::Manifest(format!("{name} must be a plain file name")));
            }
            if !dir.join(name).is_file() {
                return Err(Error::Manifest(format!("missing file {name}")));
            }
        }
        Ok(())
    }

    /// Loads the views and mask, preferring float sidecars when listed.
    pub fn load_set(&self, dir: impl AsRef<Path>, gamma: f64) -> Result<ImageSet> {
        let dir = dir.as_ref();
        let images = match &self.raw_images {
            Some(raw) => raw
                .iter()
                .map(|n| sidecar::read_image(dir.join(n)))
                .collect::<Result<Vec<_>>>()?,
            None => self
                .images
                .iter()
                .map(|n| load_image(dir.join(n), gamma))
                .collect::<Result<Vec<_>>>()?,
        };
        let mask = load_mask(dir.join(&self.mask))?;
        ImageSet::new(images, self.reference_index()?, mask)
    }

    pub fn load_ground_truth(&self, dir: impl AsRef<Path>) -> Result<Option<Vec<LayerDecomposition>>> {
        let dir = dir.as_ref();
        let Some(gt) = &self.ground_truth else {
            return Ok(None);
        };
        let read = |n: &String| -> Result<LinearImage> { sidecar::read_image(dir.join(n)) };
        let mut out = Vec::with_capacity(gt.highlight.len());
        for ((h, a), s) in gt.highlight.iter().zip(&gt.albedo).zip(&gt.shading) {
            out.push(LayerDecomposition::new(read(h)?, read(a)?, read(s)?)?);
        }
        Ok(Some(out))
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Manifest(format!(
            "{what} lists {got} entries but there are {want} images"
        )));
    }
    Ok(())
}
