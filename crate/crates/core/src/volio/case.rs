//! BraTS-style case directories: `{root}/{id}/{id}-t1n.nii.gz`, ... `{id}-seg.nii.gz`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti;
use crate::error::{Error, Result};
use crate::volcore::{LabelMap, Modality, MultiModalImage};

#[derive(Clone, Debug)]
pub struct CaseBundle {
    pub case_id: String,
    pub image: MultiModalImage,
    pub seg: Option<LabelMap>,
}

impl CaseBundle {
    pub fn new(case_id: impl Into<String>, image: MultiModalImage, seg: Option<LabelMap>) -> Result<Self> {
        if let Some(s) = &seg {
            image.geometry().check_same(s.geometry(), "segmentation vs image")?;
        }
        Ok(Self {
            case_id: case_id.into(),
            image,
            seg,
        })
    }
}

/// File suffixes for the four modalities and the segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSuffixes {
    /// In [`Modality::ALL`] order.
    pub modalities: [String; 4],
    pub seg: String,
}

impl Default for CaseSuffixes {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.map(|m| m.default_suffix().to_string()),
            seg: "seg".into(),
        }
    }
}

impl CaseSuffixes {
    /// Parses `t1n,t1c,t2w,t2f[,seg]`.
    pub fn parse(list: &str) -> Result<Self> {
        let parts: Vec<&str> = list.split(',').map(str::trim).collect();
        if !(parts.len() == 4 || parts.len() == 5) || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "expected 4 or 5 comma-separated suffixes, got {list:?}"
            )));
        }
        Ok(Self {
            modalities: std::array::from_fn(|i| parts[i].to_string()),
            seg: parts.get(4).unwrap_or(&"seg").to_string(),
        })
    }
}

/// Existing `{dir}/{id}-{suffix}.nii.gz` or `.nii`, or `None`.
fn find_file(dir: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}-{suffix}.{ext}")))
        .find(|p| p.is_file())
}

pub fn case_id_of(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("cannot derive a case id from {}", dir.display())))
}

pub fn load_case(dir: impl AsRef<Path>, suffixes: &CaseSuffixes) -> Result<CaseBundle> {
    let dir = dir.as_ref();
    let id = case_id_of(dir)?;
    let mut vols = Vec::with_capacity(4);
    for suffix in &suffixes.modalities {
        let path = find_file(dir, &id, suffix).ok_or_else(|| Error::MissingModality {
            case: id.clone(),
            path: dir.join(format!("{id}-{suffix}.nii.gz")),
        })?;
        vols.push(nifti::read_volume(path)?);
    }
    let image = MultiModalImage::new(vols.try_into().expect("four modalities"))?;
    let seg = find_file(dir, &id, &suffixes.seg)
        .map(nifti::read_labels)
        .transpose()?;
    CaseBundle::new(id, image, seg)
}

pub fn write_case(bundle: &CaseBundle, root: impl AsRef<Path>, suffixes: &CaseSuffixes) -> Result<PathBuf> {
    let dir = root.as_ref().join(&bundle.case_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (vol, suffix) in bundle.image.channels().iter().zip(&suffixes.modalities) {
        nifti::write_volume(vol, dir.join(format!("{}-{suffix}.nii.gz", bundle.case_id)), true)?;
    }
    if let Some(seg) = &bundle.seg {
        nifti::write_labels(seg, dir.join(format!("{}-{}.nii.gz", bundle.case_id, suffixes.seg)), true)?;
    }
    Ok(dir)
}

/// Sorted ids of the subdirectories of `root` that hold a first-modality file.
pub fn discover_cases(root: impl AsRef<Path>, suffixes: &CaseSuffixes) -> Result<Vec<String>> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(id) = path.file_name().and_then(|n| n.to_str()) {
            if find_file(&path, id, &suffixes.modalities[0]).is_some() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
