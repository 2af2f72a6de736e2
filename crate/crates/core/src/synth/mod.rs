//! Synthetic token-grid classification tasks and their on-disk form.

mod io;
mod tasks;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_grid, decode_header, encode_grid, load_grid, save_grid, GridHeader, DTYPE_F64, MAGIC, VERSION};
pub use tasks::{
    blank_example, gen_group_recall, gen_spatial_locate, gen_temporal_order, generate, group_recall_example,
    temporal_order_example, CueBook, LabeledExample, SyntheticTaskSpec, TaskKind, DISTRACTOR_GAIN,
};

pub const MANIFEST: &str = "manifest.json";

/// Index of a dataset directory: the generating spec plus one `.tgrd` file
/// per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticTaskSpec,
    pub classes: usize,
    pub files: Vec<String>,
}

pub fn save_dataset(dir: impl AsRef<Path>, spec: &SyntheticTaskSpec, data: &[LabeledExample]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let name = format!("{i:06}.tgrd");
        save_grid(dir.join(&name), &ex.grid, Some(ex.label))?;
        files.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        classes: spec.classes(),
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<LabeledExample>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut data = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let (grid, label) = load_grid(dir.join(name))?;
        let label = label.ok_or_else(|| Error::Data(format!("{name}: unlabelled grid in a dataset")))?;
        if label >= manifest.classes {
            return Err(Error::Data(format!("{name}: label {label} out of {} classes", manifest.classes)));
        }
        data.push(LabeledExample { grid, label });
    }
    Ok((manifest, data))
}
