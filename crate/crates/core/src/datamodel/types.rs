use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Conventional names of the three modalities, by id.
pub const MODALITY_NAMES: [&str; 3] = ["S2", "S1A", "S1D"];

pub fn modality_name(id: usize) -> String {
    MODALITY_NAMES
        .get(id)
        .map_or_else(|| format!("M{id}"), |s| s.to_string())
}

/// Raster code of pixels excluded from every loss and metric.
pub fn void_label(num_classes: usize) -> i32 {
    num_classes as i32
}

/// Raster code of non-parcel pixels (segmentation background).
pub fn background_label(num_classes: usize) -> i32 {
    num_classes as i32 + 1
}

/// One modality's image time series, `T × C × H × W`, with day-of-year dates.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySeries {
    modality_id: usize,
    shape: [usize; 4],
    data: Vec<f32>,
    dates: Vec<i32>,
}

impl ModalitySeries {
    pub fn new(modality_id: usize, shape: [usize; 4], data: Vec<f32>, dates: Vec<i32>) -> Result<Self> {
        let s = Self {
            modality_id,
            shape,
            data,
            dates,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [t, c, h, w] = self.shape;
        if self.data.len() != t * c * h * w {
            return Err(Error::Validation(format!(
                "modality {} data length {} does not match shape {:?}",
                self.modality_id,
                self.data.len(),
                self.shape
            )));
        }
        if self.dates.len() != t {
            return Err(Error::Validation(format!(
                "modality {} has {} dates for {t} acquisitions",
                self.modality_id,
                self.dates.len()
            )));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "modality {} dates are not strictly increasing",
                self.modality_id
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "modality {} contains non-finite values",
                self.modality_id
            )));
        }
        Ok(())
    }

    pub fn modality_id(&self) -> usize {
        self.modality_id
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dates(&self) -> &[i32] {
        &self.dates
    }

    /// Value at acquisition `t`, channel `c`, pixel `p = y*W + x`.
    #[inline]
    pub fn at(&self, t: usize, c: usize, p: usize) -> f32 {
        let hw = self.shape[2] * self.shape[3];
        self.data[(t * self.shape[1] + c) * hw + p]
    }

    /// Keeps only the listed acquisitions, in order.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let [_, c, h, w] = self.shape;
        let plane = c * h * w;
        let mut data = Vec::with_capacity(keep.len() * plane);
        for &t in keep {
            data.extend_from_slice(&self.data[t * plane..(t + 1) * plane]);
        }
        Self::new(
            self.modality_id,
            [keep.len(), c, h, w],
            data,
            keep.iter().map(|&t| self.dates[t]).collect(),
        )
    }
}

/// Per-pixel semantic and instance rasters plus the class of every parcel.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub height: usize,
    pub width: usize,
    pub semantic: Vec<i32>,
    pub instances: Vec<i32>,
    pub parcel_labels: BTreeMap<i32, i32>,
}

impl AnnotationSet {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.height * self.width;
        if self.semantic.len() != n || self.instances.len() != n {
            return Err(Error::Validation(format!(
                "annotation rasters must have {n} pixels"
            )));
        }
        let void = void_label(num_classes);
        let background = background_label(num_classes);
        for (&sem, &inst) in self.semantic.iter().zip(&self.instances) {
            if !(0..=background).contains(&sem) {
                return Err(Error::Validation(format!("semantic value {sem} out of range")));
            }
            if inst < 0 {
                return Err(Error::Validation(format!("negative instance id {inst}")));
            }
            if inst > 0 {
                let Some(&label) = self.parcel_labels.get(&inst) else {
                    return Err(Error::Validation(format!(
                        "instance id {inst} missing from parcel labels"
                    )));
                };
                if sem != void && sem != label {
                    return Err(Error::Validation(format!(
                        "instance {inst} pixel has semantic class {sem}, parcel label is {label}"
                    )));
                }
            }
        }
        for (&id, &label) in &self.parcel_labels {
            if id <= 0 || !(0..num_classes as i32).contains(&label) {
                return Err(Error::Validation(format!(
                    "parcel {id} has invalid label {label}"
                )));
            }
        }
        Ok(())
    }

    /// Pixel indices of every parcel, by instance id.
    pub fn parcel_pixels(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut out: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (p, &id) in self.instances.iter().enumerate() {
            if id > 0 {
                out.entry(id).or_default().push(p);
            }
        }
        out
    }
}

/// All modalities of one patch plus its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub patch_id: String,
    pub modalities: Vec<ModalitySeries>,
    pub annotations: AnnotationSet,
}

impl MultimodalSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Validation(format!("patch {} has no modality", self.patch_id)));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate()?;
            if m.modality_id() != i {
                return Err(Error::Validation(format!(
                    "patch {}: modality at position {i} has id {}",
                    self.patch_id,
                    m.modality_id()
                )));
            }
            let [_, _, h, w] = m.shape();
            if (h, w) != (self.annotations.height, self.annotations.width) {
                return Err(Error::Validation(format!(
                    "patch {}: modality {i} is {h}x{w}, annotations are {}x{}",
                    self.patch_id, self.annotations.height, self.annotations.width
                )));
            }
        }
        self.annotations.validate(num_classes)
    }

    pub fn height(&self) -> usize {
        self.annotations.height
    }

    pub fn width(&self) -> usize {
        self.annotations.width
    }
}
