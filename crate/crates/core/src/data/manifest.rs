use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdgm::ExposureLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub input: PathBuf,
    pub gt: PathBuf,
    pub label: ExposureLabel,
}

/// Image pairs with exposure labels. Stored as JSON; a relative `root` is
/// resolved against the manifest file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn input_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.input)
    }

    pub fn gt_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Read and check that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            m.root = base.join(&m.root);
        }
        for e in &m.entries {
            for p in [m.input_path(e), m.gt_path(e)] {
                if !p.is_file() {
                    return Err(Error::CorruptFile {
                        path: path.to_path_buf(),
                        reason: format!("missing file {}", p.display()),
                    });
                }
            }
        }
        Ok(m)
    }

    /// Entries whose input differs from the ground truth.
    pub fn degraded(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.label != ExposureLabel::Gt)
    }
}
