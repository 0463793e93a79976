//! Batched model inputs and the data-level operations on them: date
//! interpolation, early fusion, temporal dropout and acquisition
//! subsampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::datamodel::{Batch, ModalitySeries, MultimodalSample, PAD_DATE};
use crate::error::{Error, Result};

/// One modality for `n` items: `data` is `[n, t, c, height*width]`.
/// Parcels are stored with `height = 1` and `width = S` sampled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub modality_id: usize,
    pub n: usize,
    pub t: usize,
    pub c: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// `[n, t]`.
    pub dates: Vec<i32>,
    /// `[n, t]`, true at acquisitions the model may use.
    pub mask: Vec<bool>,
}

impl SeqBatch {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.pixels()
    }

    pub fn frame(&self, n: usize, t: usize) -> &[f64] {
        let f = self.frame_len();
        &self.data[(n * self.t + t) * f..(n * self.t + t + 1) * f]
    }

    pub fn mask_row(&self, n: usize) -> &[bool] {
        &self.mask[n * self.t..(n + 1) * self.t]
    }

    pub fn dates_row(&self, n: usize) -> &[i32] {
        &self.dates[n * self.t..(n + 1) * self.t]
    }

    pub fn count_real(&self, n: usize) -> usize {
        self.mask_row(n).iter().filter(|&&m| m).count()
    }

    pub fn total_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn check(&self) -> Result<()> {
        if self.data.len() != self.n * self.t * self.frame_len()
            || self.dates.len() != self.n * self.t
            || self.mask.len() != self.n * self.t
        {
            return Err(Error::Invalid(format!(
                "modality {} batch buffers do not match [{}, {}, {}, {}]",
                self.modality_id,
                self.n,
                self.t,
                self.c,
                self.pixels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub n: usize,
    pub modalities: Vec<SeqBatch>,
}

impl ModelInput {
    pub fn new(modalities: Vec<SeqBatch>) -> Result<Self> {
        let first = modalities
            .first()
            .ok_or_else(|| Error::Invalid("model input without modalities".into()))?;
        let (n, h, w) = (first.n, first.height, first.width);
        for (i, m) in modalities.iter().enumerate() {
            m.check()?;
            if m.n != n || m.height != h || m.width != w {
                return Err(Error::Invalid("modalities disagree on batch or frame size".into()));
            }
            if m.modality_id != i {
                return Err(Error::Invalid(format!("modality at position {i} has id {}", m.modality_id)));
            }
        }
        Ok(Self { n, modalities })
    }

    /// Takes a (normalized) patch batch as is.
    pub fn from_batch(batch: &Batch) -> Result<Self> {
        Self::new(
            batch
                .modalities
                .iter()
                .map(|mb| SeqBatch {
                    modality_id: mb.modality_id,
                    n: batch.size,
                    t: mb.t_max,
                    c: mb.channels,
                    height: batch.height,
                    width: batch.width,
                    data: mb.data.clone(),
                    dates: mb.dates.clone(),
                    mask: mb.mask.clone(),
                })
                .collect(),
        )
    }

    pub fn modality(&self, id: usize) -> Result<&SeqBatch> {
        self.modalities
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("input has no modality {id}")))
    }

    pub fn height(&self) -> usize {
        self.modalities[0].height
    }

    pub fn width(&self) -> usize {
        self.modalities[0].width
    }
}

/// Piecewise-linear interpolation of rows `src` (one per date, all of
/// length `f`) to `targets`, clamping outside the source range.
pub fn interpolate_rows(src: &[&[f64]], src_dates: &[i32], targets: &[i32]) -> Vec<f64> {
    assert_eq!(src.len(), src_dates.len());
    assert!(!src.is_empty(), "interpolating an empty series");
    let f = src[0].len();
    let mut out = Vec::with_capacity(targets.len() * f);
    for &d in targets {
        let hi = src_dates.partition_point(|&s| s < d);
        if hi == 0 {
            out.extend_from_slice(src[0]);
        } else if hi == src.len() {
            out.extend_from_slice(src[src.len() - 1]);
        } else if src_dates[hi] == d {
            out.extend_from_slice(src[hi]);
        } else {
            let (d0, d1) = (f64::from(src_dates[hi - 1]), f64::from(src_dates[hi]));
            let w = (f64::from(d) - d0) / (d1 - d0);
            out.extend(src[hi - 1].iter().zip(src[hi]).map(|(a, b)| a + w * (b - a)));
        }
    }
    out
}

/// Resamples a series to `targets` (strictly increasing day-of-year dates).
pub fn interpolate_to_dates(series: &ModalitySeries, targets: &[i32]) -> Result<ModalitySeries> {
    if series.is_empty() {
        return Err(Error::Invalid(format!(
            "cannot interpolate empty modality {}",
            series.modality_id()
        )));
    }
    let [t, c, h, w] = series.shape();
    let frame = c * h * w;
    let src: Vec<Vec<f64>> = series
        .data()
        .chunks(frame)
        .map(|fr| fr.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let rows: Vec<&[f64]> = src.iter().map(Vec::as_slice).collect();
    debug_assert_eq!(rows.len(), t);
    let data = interpolate_rows(&rows, series.dates(), targets)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    ModalitySeries::new(series.modality_id(), [targets.len(), c, h, w], data, targets.to_vec())
}

/// Interpolates every modality to the dates of `target` and concatenates
/// channels in modality order.
pub fn early_fuse_sample(sample: &MultimodalSample, target: usize) -> Result<ModalitySeries> {
    let base = sample
        .modalities
        .get(target)
        .ok_or_else(|| Error::Invalid(format!("sample has no modality {target}")))?;
    if sample.modalities.len() == 1 {
        return Ok(base.clone());
    }
    let dates = base.dates().to_vec();
    let [t, _, h, w] = base.shape();
    let resampled = sample
        .modalities
        .iter()
        .map(|m| {
            if m.modality_id() == target {
                Ok(m.clone())
            } else {
                interpolate_to_dates(m, &dates)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let c: usize = resampled.iter().map(ModalitySeries::channels).sum();
    let mut data = Vec::with_capacity(t * c * h * w);
    for ti in 0..t {
        for m in &resampled {
            let f = m.channels() * h * w;
            data.extend_from_slice(&m.data()[ti * f..(ti + 1) * f]);
        }
    }
    ModalitySeries::new(target, [t, c, h, w], data, dates)
}

/// Batch form of early fusion. Each item keeps the slots of the target
/// modality; only acquisitions unmasked in each source take part in the
/// interpolation, and masked target slots are left zero.
pub fn early_fuse(input: &ModelInput, target: usize) -> Result<SeqBatch> {
    let base = input.modality(target)?;
    let p = base.pixels();
    let c: usize = input.modalities.iter().map(|m| m.c).sum();
    let mut data = vec![0.0; input.n * base.t * c * p];
    for n in 0..input.n {
        let slots: Vec<usize> = (0..base.t).filter(|&t| base.mask_row(n)[t]).collect();
        let targets: Vec<i32> = slots.iter().map(|&t| base.dates_row(n)[t]).collect();
        let mut offset = 0;
        for m in &input.modalities {
            let block = m.c * p;
            let resampled = if m.modality_id == target {
                slots.iter().flat_map(|&t| m.frame(n, t).iter().copied()).collect()
            } else {
                let real: Vec<usize> = (0..m.t).filter(|&t| m.mask_row(n)[t]).collect();
                if real.is_empty() && !slots.is_empty() {
                    return Err(Error::Invalid(format!(
                        "item {n} has no usable acquisition of modality {}",
                        m.modality_id
                    )));
                }
                let rows: Vec<&[f64]> = real.iter().map(|&t| m.frame(n, t)).collect();
                let dates: Vec<i32> = real.iter().map(|&t| m.dates_row(n)[t]).collect();
                if slots.is_empty() {
                    Vec::new()
                } else {
                    interpolate_rows(&rows, &dates, &targets)
                }
            };
            for (k, &t) in slots.iter().enumerate() {
                let dst = (n * base.t + t) * c * p + offset;
                data[dst..dst + block].copy_from_slice(&resampled[k * block..(k + 1) * block]);
            }
            offset += block;
        }
    }
    Ok(SeqBatch {
        modality_id: target,
        n: input.n,
        t: base.t,
        c,
        height: base.height,
        width: base.width,
        data,
        dates: base.dates.clone(),
        mask: base.mask.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Masks out each usable acquisition of modality `m` with probability
/// `p[m]` in the training phase. An item that would lose every acquisition
/// of a modality keeps one chosen uniformly among them.
pub fn temporal_dropout(input: &ModelInput, p: &[f64], rng: &mut impl Rng, phase: Phase) -> ModelInput {
    let mut out = input.clone();
    if phase == Phase::Eval {
        return out;
    }
    for m in &mut out.modalities {
        let rate = p.get(m.modality_id).copied().unwrap_or(0.0);
        if rate <= 0.0 {
            continue;
        }
        for n in 0..m.n {
            let row = &mut m.mask[n * m.t..(n + 1) * m.t];
            let real: Vec<usize> = (0..row.len()).filter(|&t| row[t]).collect();
            for &t in &real {
                if rng.gen::<f64>() < rate {
                    row[t] = false;
                }
            }
            if !real.is_empty() && !row.iter().any(|&k| k) {
                row[real[rng.gen_range(0..real.len())]] = true;
            }
        }
    }
    out
}

/// Number of acquisitions kept out of `available` at `ratio`: `⌈ratio·T⌉`, at least 1.
pub fn kept_count(available: usize, ratio: f64) -> usize {
    ((ratio * available as f64 - 1e-9).ceil() as usize).clamp(1, available.max(1))
}

/// Keeps `kept_count(T, ratio)` uniformly chosen usable acquisitions of
/// `modality` per item and leaves the other modalities untouched.
pub fn subsample_acquisitions(input: &ModelInput, modality: usize, ratio: f64, rng: &mut impl Rng) -> Result<ModelInput> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("keep ratio {ratio} outside (0, 1]")));
    }
    let mut out = input.clone();
    let m = out
        .modalities
        .get_mut(modality)
        .ok_or_else(|| Error::Invalid(format!("input has no modality {modality}")))?;
    for n in 0..m.n {
        let row = &mut m.mask[n * m.t..(n + 1) * m.t];
        let real: Vec<usize> = (0..row.len()).filter(|&t| row[t]).collect();
        if real.is_empty() {
            continue;
        }
        let keep = kept_count(real.len(), ratio);
        let mut chosen = vec![false; real.len()];
        for i in sample(rng, real.len(), keep) {
            chosen[i] = true;
        }
        for (k, &t) in real.iter().enumerate() {
            row[t] = chosen[k];
        }
    }
    Ok(out)
}

/// Replaces the dates of masked slots by [`PAD_DATE`].
pub fn scrub_masked_dates(m: &mut SeqBatch) {
    for (d, &keep) in m.dates.iter_mut().zip(&m.mask) {
        if !keep {
            *d = PAD_DATE;
        }
    }
}
