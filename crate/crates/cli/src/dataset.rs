//! Dataset directory layout: RVOL volumes plus a JSON manifest naming every
//! file with its dims and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dtpdt_core::error::{Error, Result};
use dtpdt_core::rvol;
use dtpdt_core::synth::{AirwayTree, GroundTruthBundle, Sample};

#[derive(Debug, Serialize, Deserialize)]
pub struct FileSet {
    pub input: String,
    pub mask: String,
    pub dc: String,
    pub centerline: String,
    pub tree: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: String,
    pub seed: u64,
    pub dims: [usize; 3],
    pub dc_max: f64,
    pub files: FileSet,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    pub dims: [usize; 3],
    pub volumes: Vec<VolumeEntry>,
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every volume of a dataset directory, validating dims against the
/// manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Sample)>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.volumes.len());
    for entry in &manifest.volumes {
        let input = rvol::import_volume(&dir.join(&entry.files.input), false)?;
        let mask = rvol::import_volume(&dir.join(&entry.files.mask), false)?;
        let dc_map = rvol::import_volume(&dir.join(&entry.files.dc), false)?;
        let centerline = rvol::import_volume(&dir.join(&entry.files.centerline), false)?;
        let tree: AirwayTree =
            serde_json::from_slice(&std::fs::read(dir.join(&entry.files.tree))?)?;
        let dims = (entry.dims[0], entry.dims[1], entry.dims[2]);
        for (name, v) in [
            ("input", &input),
            ("mask", &mask),
            ("dc", &dc_map),
            ("centerline", &centerline),
        ] {
            if v.dims() != dims {
                return Err(Error::Data(format!(
                    "{} {name} volume has dims {:?}, manifest says {dims:?}",
                    entry.id,
                    v.dims()
                )));
            }
        }
        if !mask.is_binary() {
            return Err(Error::Data(format!("{} mask is not binary", entry.id)));
        }
        out.push((
            entry.id.clone(),
            Sample {
                input,
                bundle: GroundTruthBundle {
                    mask,
                    tree,
                    dc_map,
                    dc_max: entry.dc_max,
                    centerline_mask: centerline,
                },
            },
        ));
    }
    Ok(out)
}
