//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "WECDGCKP"
//! version      u32      1
//! seed         u64
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `CheckpointHeader`)
//! count        u32
//! count × entry:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × f64
//! ```
//!
//! Entries are written in name order, so equal parameters give equal files.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterTree;
use crate::autodiff::Precision;
use crate::pipeline::{ModelConfig, Wecdg};
use crate::sdgm::{Sdgm, SdgmConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WECDGCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CheckpointHeader {
    Restoration { model: ModelConfig },
    Sdgm { sdgm: SdgmConfig },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterTree,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(self.params.seed())?;
        let header = serde_json::to_vec(&self.header)?;
        out.write_u32::<LittleEndian>(header.len() as u32)?;
        out.extend_from_slice(&header);
        out.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        let eof = |e: std::io::Error| corrupt(format!("truncated: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(eof)?;
        let hlen = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut header = vec![0u8; hlen.min(bytes.len())];
        r.read_exact(&mut header).map_err(eof)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| corrupt(format!("header: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut params = ParameterTree::new(seed);
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let mut name = vec![0u8; nlen.min(bytes.len())];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|e| corrupt(format!("entry name: {e}")))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(eof)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n * 8 <= bytes.len())
                .ok_or_else(|| corrupt(format!("entry `{name}` has an impossible shape")))?;
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(eof)?;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("entry `{name}`: {e}")))?;
            if params.contains(&name) {
                return Err(corrupt(format!("duplicate entry `{name}`")));
            }
            params.insert(name, t);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn restoration(model: &Wecdg, params: &ParameterTree) -> Self {
        Self {
            header: CheckpointHeader::Restoration {
                model: model.config.clone(),
            },
            params: params.clone(),
        }
    }

    pub fn sdgm(sdgm: &Sdgm, params: &ParameterTree) -> Self {
        Self {
            header: CheckpointHeader::Sdgm { sdgm: sdgm.config },
            params: params.clone(),
        }
    }

    /// Rebuild the restoration network, optionally at another precision.
    pub fn into_restoration(self, path: &Path, precision: Option<Precision>) -> Result<(Wecdg, ParameterTree)> {
        let CheckpointHeader::Restoration { mut model } = self.header else {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: "expected a restoration checkpoint, found a descriptor-module one".into(),
            });
        };
        if let Some(p) = precision {
            model.precision = p;
        }
        let (net, mut tree) = Wecdg::new(model)?;
        fill(&mut tree, self.params, path)?;
        Ok((net, tree))
    }

    pub fn into_sdgm(self, path: &Path) -> Result<(Sdgm, ParameterTree)> {
        let CheckpointHeader::Sdgm { sdgm } = self.header else {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: "expected a descriptor-module checkpoint, found a restoration one".into(),
            });
        };
        let mut tree = ParameterTree::new(self.params.seed());
        let module = Sdgm::new(&mut tree, sdgm);
        fill(&mut tree, self.params, path)?;
        Ok((module, tree))
    }
}

/// Copy stored values into a freshly built tree; both must hold the same
/// names and shapes.
fn fill(tree: &mut ParameterTree, stored: ParameterTree, path: &Path) -> Result<()> {
    if let Some(extra) = stored.names().find(|n| !tree.contains(n)) {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("unexpected parameter `{extra}`"),
        });
    }
    tree.load_from(&stored.into_entries()).map_err(|e| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
