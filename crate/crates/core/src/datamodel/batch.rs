//! Variable-length collation with padding masks, and standardization.

use super::io::DatasetManifest;
use super::types::{AnnotationSet, MultimodalSample};
use crate::error::{Error, Result};

/// Date written at padded positions.
pub const PAD_DATE: i32 = -1;

/// One modality of a [`Batch`]: `data` is `B × T_max × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub modality_id: usize,
    pub t_max: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// `B × T_max`, true at real (kept) acquisitions.
    pub mask: Vec<bool>,
    /// `B × T_max`, [`PAD_DATE`] at padded positions.
    pub dates: Vec<i32>,
}

impl ModalityBatch {
    pub fn frame_len(&self, height: usize, width: usize) -> usize {
        self.channels * height * width
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.t_max..(b + 1) * self.t_max]
    }

    pub fn dates_row(&self, b: usize) -> &[i32] {
        &self.dates[b * self.t_max..(b + 1) * self.t_max]
    }

    pub fn count_real(&self, b: usize) -> usize {
        self.mask_row(b).iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub patch_ids: Vec<String>,
    pub modalities: Vec<ModalityBatch>,
    pub annotations: Vec<AnnotationSet>,
}

/// Pads every modality to its longest series in the batch.
pub fn collate(samples: &[&MultimodalSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("cannot collate an empty sample list".into()))?;
    let (h, w) = (first.height(), first.width());
    let n_mod = first.modalities.len();
    for s in samples {
        if s.height() != h || s.width() != w || s.modalities.len() != n_mod {
            return Err(Error::Invalid(format!(
                "sample {} does not match the batch geometry",
                s.patch_id
            )));
        }
        for (m, series) in s.modalities.iter().enumerate() {
            if series.channels() != first.modalities[m].channels() {
                return Err(Error::Invalid(format!(
                    "sample {} modality {m} has {} channels, expected {}",
                    s.patch_id,
                    series.channels(),
                    first.modalities[m].channels()
                )));
            }
        }
    }
    let b = samples.len();
    let modalities = (0..n_mod)
        .map(|m| {
            let c = first.modalities[m].channels();
            let t_max = samples.iter().map(|s| s.modalities[m].len()).max().unwrap_or(0);
            let frame = c * h * w;
            let mut data = vec![0.0; b * t_max * frame];
            let mut mask = vec![false; b * t_max];
            let mut dates = vec![PAD_DATE; b * t_max];
            for (bi, s) in samples.iter().enumerate() {
                let series = &s.modalities[m];
                let t = series.len();
                let dst = &mut data[bi * t_max * frame..(bi * t_max + t) * frame];
                for (d, v) in dst.iter_mut().zip(series.data()) {
                    *d = f64::from(*v);
                }
                mask[bi * t_max..bi * t_max + t].fill(true);
                dates[bi * t_max..bi * t_max + t].copy_from_slice(series.dates());
            }
            ModalityBatch {
                modality_id: m,
                t_max,
                channels: c,
                data,
                mask,
                dates,
            }
        })
        .collect();
    Ok(Batch {
        size: b,
        height: h,
        width: w,
        patch_ids: samples.iter().map(|s| s.patch_id.clone()).collect(),
        modalities,
        annotations: samples.iter().map(|s| s.annotations.clone()).collect(),
    })
}

/// `(x − mean) / std` per channel at real positions; padding stays zero.
pub fn normalize(batch: &Batch, manifest: &DatasetManifest) -> Result<Batch> {
    let mut out = batch.clone();
    let hw = batch.height * batch.width;
    for mb in &mut out.modalities {
        let stats = manifest
            .stats_for(mb.modality_id)
            .ok_or_else(|| Error::Invalid(format!("no statistics for modality {}", mb.modality_id)))?;
        if stats.mean.len() != mb.channels {
            return Err(Error::Invalid(format!(
                "modality {} statistics have {} channels, batch has {}",
                mb.modality_id,
                stats.mean.len(),
                mb.channels
            )));
        }
        let frame = mb.channels * hw;
        for (slot, frame_data) in mb.data.chunks_mut(frame).enumerate() {
            if !mb.mask[slot] {
                continue;
            }
            for (c, plane) in frame_data.chunks_mut(hw).enumerate() {
                let (mu, sd) = (stats.mean[c], stats.std[c]);
                plane.iter_mut().for_each(|v| *v = (*v - mu) / sd);
            }
        }
    }
    Ok(out)
}

/// Standardizes a single sample in place of a batch round trip.
pub fn normalize_sample(sample: &MultimodalSample, manifest: &DatasetManifest) -> Result<Vec<Vec<f64>>> {
    let hw = sample.height() * sample.width();
    sample
        .modalities
        .iter()
        .map(|m| {
            let stats = manifest
                .stats_for(m.modality_id())
                .ok_or_else(|| Error::Invalid(format!("no statistics for modality {}", m.modality_id())))?;
            Ok(m.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = (i / hw) % m.channels();
                    (f64::from(v) - stats.mean[c]) / stats.std[c]
                })
                .collect())
        })
        .collect()
}
