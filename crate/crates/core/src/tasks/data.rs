//! Loaded datasets and batch assembly for parcels and patches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::datamodel::{background_label, load_sample, void_label, DatasetManifest, MultimodalSample, PAD_DATE};
use crate::encoders::sample_pixels;
use crate::error::{Error, Result};
use crate::fusion::{ModelInput, SeqBatch};

/// A dataset held in memory with its manifest; values are standardized
/// when batches are assembled.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub manifest: DatasetManifest,
    pub samples: Vec<MultimodalSample>,
    index: BTreeMap<String, usize>,
}

/// One parcel: its patch, instance id, class and usable (non-VOID) pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelRef {
    pub patch: usize,
    pub instance: i32,
    pub label: usize,
    pub pixels: Vec<usize>,
}

impl TaskData {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let samples = manifest
            .patch_ids
            .iter()
            .map(|id| load_sample(id, &manifest))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, samples)
    }

    pub fn new(manifest: DatasetManifest, samples: Vec<MultimodalSample>) -> Result<Self> {
        if manifest.patch_ids.len() != samples.len() {
            return Err(Error::Invalid("manifest and sample counts differ".into()));
        }
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.patch_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            samples,
            index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn channels(&self) -> Vec<usize> {
        self.samples
            .first()
            .map(|s| s.modalities.iter().map(|m| m.channels()).collect())
            .unwrap_or_default()
    }

    /// Sample indices of the patches in `folds`, in manifest order.
    pub fn patches(&self, folds: &[usize]) -> Vec<usize> {
        self.manifest
            .patches_in_folds(folds)
            .iter()
            .map(|id| self.index[id])
            .collect()
    }

    pub fn parcels(&self, patches: &[usize]) -> Vec<ParcelRef> {
        let void = void_label(self.num_classes());
        let mut out = Vec::new();
        for &p in patches {
            let ann = &self.samples[p].annotations;
            for (id, pixels) in ann.parcel_pixels() {
                let usable: Vec<usize> = pixels.into_iter().filter(|&px| ann.semantic[px] != void).collect();
                if usable.is_empty() {
                    continue;
                }
                out.push(ParcelRef {
                    patch: p,
                    instance: id,
                    label: ann.parcel_labels[&id] as usize,
                    pixels: usable,
                });
            }
        }
        out
    }

    fn scale(&self, modality: usize) -> Result<(&[f64], &[f64])> {
        let s = self
            .manifest
            .stats_for(modality)
            .ok_or_else(|| Error::Invalid(format!("no statistics for modality {modality}")))?;
        Ok((&s.mean, &s.std))
    }

    /// Pixel sets for `parcels`: every modality of a parcel uses the same
    /// `sample_size` pixels drawn with replacement.
    pub fn parcel_batch(
        &self,
        parcels: &[&ParcelRef],
        sample_size: usize,
        rng: &mut impl Rng,
    ) -> Result<(ModelInput, Vec<Option<usize>>)> {
        if parcels.is_empty() {
            return Err(Error::Invalid("empty parcel batch".into()));
        }
        let picks = parcels
            .iter()
            .map(|p| sample_pixels(&p.pixels, sample_size, rng))
            .collect::<Result<Vec<_>>>()?;
        let n = parcels.len();
        let n_mod = self.samples[parcels[0].patch].modalities.len();
        let mut mods = Vec::with_capacity(n_mod);
        for m in 0..n_mod {
            let (mean, std) = self.scale(m)?;
            let series: Vec<_> = parcels.iter().map(|p| &self.samples[p.patch].modalities[m]).collect();
            let t = series.iter().map(|s| s.len()).max().unwrap_or(0);
            let c = series[0].channels();
            let mut data = vec![0.0; n * t * c * sample_size];
            let mut dates = vec![PAD_DATE; n * t];
            let mut mask = vec![false; n * t];
            for (i, s) in series.iter().enumerate() {
                let [ti, ci, h, w] = s.shape();
                if ci != c {
                    return Err(Error::Invalid(format!("modality {m} channel count varies across patches")));
                }
                let hw = h * w;
                for tt in 0..ti {
                    dates[i * t + tt] = s.dates()[tt];
                    mask[i * t + tt] = true;
                    let frame = &s.data()[tt * c * hw..(tt + 1) * c * hw];
                    let dst = &mut data[(i * t + tt) * c * sample_size..(i * t + tt + 1) * c * sample_size];
                    for cc in 0..c {
                        for (k, &px) in picks[i].iter().enumerate() {
                            dst[cc * sample_size + k] = (f64::from(frame[cc * hw + px]) - mean[cc]) / std[cc];
                        }
                    }
                }
            }
            mods.push(SeqBatch {
                modality_id: m,
                n,
                t,
                c,
                height: 1,
                width: sample_size,
                data,
                dates,
                mask,
            });
        }
        let targets = parcels.iter().map(|p| Some(p.label)).collect();
        Ok((ModelInput::new(mods)?, targets))
    }

    /// Full patches with per-pixel targets (classes, background as `K`,
    /// VOID ignored).
    pub fn patch_batch(&self, patches: &[usize]) -> Result<(ModelInput, Vec<Option<usize>>)> {
        if patches.is_empty() {
            return Err(Error::Invalid("empty patch batch".into()));
        }
        let first = &self.samples[patches[0]];
        let (h, w) = (first.height(), first.width());
        let hw = h * w;
        let n = patches.len();
        let mut mods = Vec::new();
        for m in 0..first.modalities.len() {
            let (mean, std) = self.scale(m)?;
            let t = patches.iter().map(|&p| self.samples[p].modalities[m].len()).max().unwrap_or(0);
            let c = first.modalities[m].channels();
            let mut data = vec![0.0; n * t * c * hw];
            let mut dates = vec![PAD_DATE; n * t];
            let mut mask = vec![false; n * t];
            for (i, &p) in patches.iter().enumerate() {
                let s = &self.samples[p];
                if s.height() != h || s.width() != w {
                    return Err(Error::Invalid("patches in a batch must share their size".into()));
                }
                let series = &s.modalities[m];
                for tt in 0..series.len() {
                    dates[i * t + tt] = series.dates()[tt];
                    mask[i * t + tt] = true;
                    let src = &series.data()[tt * c * hw..(tt + 1) * c * hw];
                    let dst = &mut data[(i * t + tt) * c * hw..(i * t + tt + 1) * c * hw];
                    for (k, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
                        let cc = k / hw;
                        *d = (f64::from(v) - mean[cc]) / std[cc];
                    }
                }
            }
            mods.push(SeqBatch {
                modality_id: m,
                n,
                t,
                c,
                height: h,
                width: w,
                data,
                dates,
                mask,
            });
        }
        let k = self.num_classes();
        let mut targets = Vec::with_capacity(n * hw);
        for &p in patches {
            targets.extend(semantic_targets(&self.samples[p].annotations.semantic, k));
        }
        Ok((ModelInput::new(mods)?, targets))
    }
}

/// Raster codes to training targets: classes stay, background becomes `K`,
/// VOID is ignored.
pub fn semantic_targets(semantic: &[i32], num_classes: usize) -> Vec<Option<usize>> {
    let void = void_label(num_classes);
    let background = background_label(num_classes);
    semantic
        .iter()
        .map(|&s| {
            if s == void {
                None
            } else if s == background {
                Some(num_classes)
            } else {
                Some(s as usize)
            }
        })
        .collect()
}
