//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<patch_id>/modality_<m>.tns   float32, T × C × H × W
//! <root>/<patch_id>/dates.json         {"<m>": [d1, d2, ...]}
//! <root>/<patch_id>/semantic.tns       int32, H × W
//! <root>/<patch_id>/instances.tns      int32, H × W
//! <root>/<patch_id>/labels.json        {"<instance id>": class}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tns::TnsArray;
use super::types::{AnnotationSet, ModalitySeries, MultimodalSample};
use crate::error::{create_dir_all, read_json, write_json, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub modality_id: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory the manifest was loaded from; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
    pub patch_ids: Vec<String>,
    pub folds: BTreeMap<String, usize>,
    pub stats: Vec<ChannelStats>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for id in &self.patch_ids {
            match self.folds.get(id) {
                Some(f) if (1..=5).contains(f) => {}
                Some(f) => return Err(Error::Validation(format!("patch {id} has fold {f} outside [1, 5]"))),
                None => return Err(Error::Validation(format!("patch {id} has no fold"))),
            }
        }
        if self.folds.len() != self.patch_ids.len() {
            return Err(Error::Validation("fold map lists unknown patches".into()));
        }
        for s in &self.stats {
            if s.mean.len() != s.std.len() || s.std.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Validation(format!(
                    "modality {} statistics need one positive std per channel",
                    s.modality_id
                )));
            }
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Validation("class_names length differs from num_classes".into()));
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mut m: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        create_dir_all(root)?;
        write_json(&root.join(MANIFEST_FILE), self)
    }

    pub fn patches_in_folds(&self, folds: &[usize]) -> Vec<String> {
        self.patch_ids
            .iter()
            .filter(|id| folds.contains(&self.folds[*id]))
            .cloned()
            .collect()
    }

    pub fn stats_for(&self, modality_id: usize) -> Option<&ChannelStats> {
        self.stats.iter().find(|s| s.modality_id == modality_id)
    }
}

fn modality_file(m: usize) -> String {
    format!("modality_{m}.tns")
}

/// Writes one patch directory under `root`; returns its path.
pub fn save_sample(sample: &MultimodalSample, num_classes: usize, root: &Path) -> Result<PathBuf> {
    sample.validate(num_classes)?;
    let dir = root.join(&sample.patch_id);
    create_dir_all(&dir)?;
    let mut dates = BTreeMap::new();
    for m in &sample.modalities {
        TnsArray::f32(m.shape().to_vec(), m.data().to_vec()).write(&dir.join(modality_file(m.modality_id())))?;
        dates.insert(m.modality_id().to_string(), m.dates().to_vec());
    }
    write_json(&dir.join("dates.json"), &dates)?;
    let a = &sample.annotations;
    let hw = vec![a.height, a.width];
    TnsArray::i32(hw.clone(), a.semantic.clone()).write(&dir.join("semantic.tns"))?;
    TnsArray::i32(hw, a.instances.clone()).write(&dir.join("instances.tns"))?;
    let labels: BTreeMap<String, i32> = a.parcel_labels.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    write_json(&dir.join("labels.json"), &labels)?;
    Ok(dir)
}

pub fn load_sample(patch_id: &str, manifest: &DatasetManifest) -> Result<MultimodalSample> {
    load_sample_from(&manifest.root, patch_id, manifest.num_classes)
}

pub fn load_sample_from(root: &Path, patch_id: &str, num_classes: usize) -> Result<MultimodalSample> {
    let dir = root.join(patch_id);
    let dates_path = dir.join("dates.json");
    let dates: BTreeMap<String, Vec<i32>> = read_json(&dates_path)?;
    let mut ids: Vec<usize> = dates
        .keys()
        .map(|k| k.parse::<usize>().map_err(|_| Error::format(&dates_path, format!("bad modality key {k:?}"))))
        .collect::<Result<_>>()?;
    ids.sort_unstable();
    let mut modalities = Vec::with_capacity(ids.len());
    for m in ids {
        let path = dir.join(modality_file(m));
        let (shape, data) = TnsArray::read(&path)?.into_f32(&path)?;
        if shape.len() != 4 {
            return Err(Error::format(&path, format!("expected rank 4, found shape {shape:?}")));
        }
        let d = dates[&m.to_string()].clone();
        modalities.push(ModalitySeries::new(m, [shape[0], shape[1], shape[2], shape[3]], data, d)?);
    }
    let sem_path = dir.join("semantic.tns");
    let (sem_shape, semantic) = TnsArray::read(&sem_path)?.into_i32(&sem_path)?;
    let inst_path = dir.join("instances.tns");
    let (inst_shape, instances) = TnsArray::read(&inst_path)?.into_i32(&inst_path)?;
    if sem_shape.len() != 2 || sem_shape != inst_shape {
        return Err(Error::format(&inst_path, format!("raster shapes {sem_shape:?} and {inst_shape:?} differ")));
    }
    let labels_path = dir.join("labels.json");
    let raw: BTreeMap<String, i32> = read_json(&labels_path)?;
    let parcel_labels = raw
        .into_iter()
        .map(|(k, v)| {
            k.parse::<i32>()
                .map(|id| (id, v))
                .map_err(|_| Error::format(&labels_path, format!("bad instance id {k:?}")))
        })
        .collect::<Result<_>>()?;
    let sample = MultimodalSample {
        patch_id: patch_id.to_string(),
        modalities,
        annotations: AnnotationSet {
            height: sem_shape[0],
            width: sem_shape[1],
            semantic,
            instances,
            parcel_labels,
        },
    };
    sample.validate(num_classes)?;
    Ok(sample)
}
