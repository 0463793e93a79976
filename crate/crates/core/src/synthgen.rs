//! Deterministic toy multimodal SITS datasets.
//!
//! Every class has, per modality and channel, a temporal profile made of
//! two Gaussian bumps over day-of-year. A complementarity plan then ties
//! some classes together in one modality so that only the other modality
//! can separate them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    background_label, make_folds, save_sample, AnnotationSet, ChannelStats, DatasetManifest, ModalitySeries,
    MultimodalSample,
};
use crate::error::{create_dir_all, write_json, Error, Result};
use crate::rng::stream;

pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

/// Which classes are made indistinguishable in which modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComplementarityPlan {
    /// No tying: every class is separable in every modality.
    Independent,
    /// Classes 0 and 1 share their optical profile, classes 2 and 3 share
    /// their radar profiles.
    #[default]
    Designed,
    /// The optical modality separates everything but classes 0 and 1; the
    /// radar modalities only separate classes 0 and 1 from the rest.
    OpticalDominant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patches: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Channels per modality; modality 0 is optical, the rest radar-like.
    pub channels: Vec<usize>,
    /// Inclusive `[min, max]` acquisition count per modality.
    pub t_ranges: Vec<[usize; 2]>,
    pub cloud_rate: f64,
    pub speckle_scale: f64,
    /// Standard deviation of additive per-pixel noise.
    pub pixel_jitter: f64,
    pub plan: ComplementarityPlan,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patches: 100,
            height: 32,
            width: 32,
            num_classes: 6,
            channels: vec![4, 3, 3],
            t_ranges: vec![[8, 12], [18, 24], [18, 24]],
            cloud_rate: 0.2,
            speckle_scale: 0.3,
            pixel_jitter: 0.05,
            plan: ComplementarityPlan::Designed,
            n_folds: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth config: {m}")));
        if self.n_patches == 0 || self.height == 0 || self.width == 0 || self.num_classes == 0 {
            return bad("all counts must be positive");
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return bad("every modality needs at least one channel");
        }
        if self.t_ranges.len() != self.channels.len() {
            return bad("t_ranges must list one range per modality");
        }
        if self.t_ranges.iter().any(|r| r[0] == 0 || r[0] > r[1] || r[1] > 366) {
            return bad("acquisition ranges must satisfy 1 <= min <= max <= 366");
        }
        if !(0.0..=1.0).contains(&self.cloud_rate) {
            return bad("cloud_rate must lie in [0, 1]");
        }
        if !(self.speckle_scale >= 0.0) || !(self.pixel_jitter >= 0.0) {
            return bad("noise scales must be nonnegative");
        }
        if self.plan != ComplementarityPlan::Independent && self.num_classes < 6 {
            return bad("complementarity plans need at least 6 classes");
        }
        if self.height * self.width < 16 {
            return bad("patches must have at least 16 pixels");
        }
        if !(2..=5).contains(&self.n_folds) {
            return bad("n_folds must lie in [2, 5]");
        }
        Ok(())
    }

    pub fn modalities(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Bump {
    fn eval(&self, day: f64) -> f64 {
        let z = (day - self.center) / self.width;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

/// Temporal curves of one class: `curves[modality][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub curves: Vec<Vec<[Bump; 2]>>,
}

impl ClassProfile {
    pub fn value(&self, modality: usize, channel: usize, day: f64) -> f64 {
        self.curves[modality][channel].iter().map(|b| b.eval(day)).sum()
    }
}

/// Slot-based bump centers: `35 + spacing * slot` with spacing at least 60
/// days for up to 6 classes.
fn slot_center(slot: usize, k: usize) -> f64 {
    let spacing = if k <= 1 { 60.0 } else { (300.0 / (k - 1) as f64).min(60.0) };
    35.0 + spacing * slot as f64
}

/// Base profiles before any complementarity is applied. Optical classes use
/// slot `k`, radar classes the reversed slot `K-1-k`, so every pair of
/// classes differs in its main bump center in every modality. Adjacent
/// slots alternate main amplitude between 0.6 and 1.2.
pub fn base_profiles(num_classes: usize, channels: &[usize]) -> Vec<ClassProfile> {
    (0..num_classes)
        .map(|k| {
            let curves = channels
                .iter()
                .enumerate()
                .map(|(m, &c)| {
                    let slot = if m == 0 { k } else { num_classes - 1 - k };
                    let center = slot_center(slot, num_classes);
                    let amp = if slot % 2 == 0 { 0.6 } else { 1.2 };
                    (0..c)
                        .map(|ch| {
                            let scale = 1.0 - 0.12 * ch as f64;
                            [
                                Bump {
                                    amplitude: amp * scale,
                                    center,
                                    width: 22.0 + 4.0 * ch as f64,
                                },
                                Bump {
                                    amplitude: 0.25,
                                    center: 60.0 + 90.0 * ch as f64 + if m == 0 { 0.0 } else { 40.0 },
                                    width: 40.0,
                                },
                            ]
                        })
                        .collect()
                })
                .collect();
            ClassProfile { curves }
        })
        .collect()
}

/// Ties class profiles together according to `plan`.
pub fn apply_complementarity(mut profiles: Vec<ClassProfile>, plan: ComplementarityPlan) -> Result<Vec<ClassProfile>> {
    if plan == ComplementarityPlan::Independent {
        return Ok(profiles);
    }
    if profiles.len() < 6 {
        return Err(Error::Config(format!(
            "complementarity plans need at least 6 classes, got {}",
            profiles.len()
        )));
    }
    let n_mod = profiles[0].curves.len();
    match plan {
        ComplementarityPlan::Designed => {
            profiles[1].curves[0] = profiles[0].curves[0].clone();
            for m in 1..n_mod {
                profiles[3].curves[m] = profiles[2].curves[m].clone();
            }
        }
        ComplementarityPlan::OpticalDominant => {
            profiles[1].curves[0] = profiles[0].curves[0].clone();
            for m in 1..n_mod {
                let shared = profiles[2].curves[m].clone();
                for p in profiles.iter_mut().skip(3) {
                    p.curves[m] = shared.clone();
                }
            }
        }
        ComplementarityPlan::Independent => unreachable!(),
    }
    Ok(profiles)
}

pub fn class_profiles(config: &SynthConfig) -> Result<Vec<ClassProfile>> {
    apply_complementarity(base_profiles(config.num_classes, &config.channels), config.plan)
}

/// A generated patch plus generation-time facts not stored in the sample.
#[derive(Clone, Debug)]
pub struct GeneratedPatch {
    pub sample: MultimodalSample,
    /// Per optical acquisition: replaced by a cloud.
    pub occluded: Vec<bool>,
}

const CLOUD_LEVEL: f64 = 1.8;
const BACKGROUND_LEVEL: f64 = 0.15;

/// Nearest-seed tessellation with eroded borders; returns the instance
/// raster (0 = background) with ids `1..=n`.
fn tessellate(h: usize, w: usize, rng: &mut impl Rng) -> Vec<i32> {
    loop {
        let n = rng.gen_range(4..=10usize);
        let seeds: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
            .collect();
        let two_sided = rng.gen_bool(0.5);
        let cell: Vec<usize> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                (0..n)
                    .min_by(|&a, &b| {
                        let da = (seeds[a].0 - y).powi(2) + (seeds[a].1 - x).powi(2);
                        let db = (seeds[b].0 - y).powi(2) + (seeds[b].1 - x).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap()
            })
            .collect();
        let mut raster = vec![0i32; h * w];
        for p in 0..h * w {
            let (y, x) = (p / w, p % w);
            let mut border = false;
            for (dy, dx) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = cell[ny as usize * w + nx as usize];
                if q != cell[p] && (two_sided || q > cell[p]) {
                    border = true;
                }
            }
            if !border {
                raster[p] = cell[p] as i32 + 1;
            }
        }
        // renumber surviving cells densely
        let mut remap = BTreeMap::new();
        for v in raster.iter_mut().filter(|v| **v > 0) {
            let next = remap.len() as i32 + 1;
            *v = *remap.entry(*v).or_insert(next);
        }
        if (4..=10).contains(&remap.len()) {
            return raster;
        }
    }
}

fn draw_dates(t: usize, rng: &mut impl Rng) -> Vec<i32> {
    let mut d: Vec<i32> = sample_indices(rng, 366, t).into_iter().map(|i| i as i32 + 1).collect();
    d.sort_unstable();
    d
}

/// Renders one patch from `profiles`.
pub fn generate_patch(
    config: &SynthConfig,
    profiles: &[ClassProfile],
    patch_id: &str,
    rng: &mut impl Rng,
) -> Result<GeneratedPatch> {
    let (h, w, k) = (config.height, config.width, config.num_classes);
    let hw = h * w;
    let instances = tessellate(h, w, rng);
    let n_parcels = instances.iter().copied().max().unwrap_or(0);
    let parcel_labels: BTreeMap<i32, i32> = (1..=n_parcels).map(|id| (id, rng.gen_range(0..k) as i32)).collect();
    // per-parcel phenology shift (days) and amplitude scale
    let variation: BTreeMap<i32, (f64, f64)> = (1..=n_parcels)
        .map(|id| (id, (rng.gen_range(-6.0..6.0), rng.gen_range(0.9..1.1))))
        .collect();
    let semantic: Vec<i32> = instances
        .iter()
        .map(|&id| if id > 0 { parcel_labels[&id] } else { background_label(k) })
        .collect();

    let jitter = Normal::new(0.0, config.pixel_jitter.max(1e-12)).expect("valid normal");
    let speckle = if config.speckle_scale > 0.0 {
        let shape = 1.0 / (config.speckle_scale * config.speckle_scale);
        Some(Gamma::new(shape, 1.0 / shape).expect("valid gamma"))
    } else {
        None
    };
    let mut occluded = Vec::new();
    let mut modalities = Vec::with_capacity(config.modalities());
    for (m, &channels) in config.channels.iter().enumerate() {
        let [lo, hi] = config.t_ranges[m];
        let t = rng.gen_range(lo..=hi);
        let dates = draw_dates(t, rng);
        let mut data = vec![0f32; t * channels * hw];
        for (ti, &day) in dates.iter().enumerate() {
            let cloudy = m == 0 && rng.gen_bool(config.cloud_rate);
            if m == 0 {
                occluded.push(cloudy);
            }
            for c in 0..channels {
                let plane = &mut data[(ti * channels + c) * hw..(ti * channels + c + 1) * hw];
                for (p, slot) in plane.iter_mut().enumerate() {
                    let id = instances[p];
                    let clean = if cloudy {
                        CLOUD_LEVEL
                    } else if id > 0 {
                        let (shift, scale) = variation[&id];
                        let class = parcel_labels[&id] as usize;
                        profiles[class].value(m, c, f64::from(day) - shift) * scale
                    } else {
                        BACKGROUND_LEVEL
                    };
                    let mut v = clean + jitter.sample(rng);
                    if m > 0 {
                        if let Some(g) = &speckle {
                            v = v.max(0.0) * g.sample(rng);
                        }
                    }
                    *slot = v as f32;
                }
            }
        }
        modalities.push(ModalitySeries::new(m, [t, channels, h, w], data, dates)?);
    }
    let sample = MultimodalSample {
        patch_id: patch_id.to_string(),
        modalities,
        annotations: AnnotationSet {
            height: h,
            width: w,
            semantic,
            instances,
            parcel_labels,
        },
    };
    sample.validate(k)?;
    Ok(GeneratedPatch { sample, occluded })
}

pub fn patch_id(index: usize) -> String {
    format!("patch_{index:05}")
}

/// Generates patch `index` from its own random stream.
pub fn generate_indexed(config: &SynthConfig, profiles: &[ClassProfile], index: usize) -> Result<GeneratedPatch> {
    let mut rng = stream(config.seed, "synth/patch", index as u64);
    generate_patch(config, profiles, &patch_id(index), &mut rng)
}

/// Per-channel mean and std accumulated over a set of samples.
pub fn channel_stats(samples: &[&MultimodalSample], channels: &[usize]) -> Vec<ChannelStats> {
    channels
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let mut sum = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            let mut n = vec![0usize; c];
            for s in samples {
                let series = &s.modalities[m];
                let hw = series.shape()[2] * series.shape()[3];
                for (i, &v) in series.data().iter().enumerate() {
                    let ch = (i / hw) % c;
                    let v = f64::from(v);
                    sum[ch] += v;
                    sq[ch] += v * v;
                    n[ch] += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().zip(&n).map(|(s, &k)| s / k.max(1) as f64).collect();
            let std = sq
                .iter()
                .zip(&n)
                .zip(&mean)
                .map(|((q, &k), mu)| {
                    let var = (q / k.max(1) as f64 - mu * mu).max(0.0);
                    if var > 0.0 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            ChannelStats {
                modality_id: m,
                mean,
                std,
            }
        })
        .collect()
}

/// Generates every patch in memory. Channel statistics are computed on
/// every fold but the last; the manifest root is left empty.
pub fn generate_in_memory(config: &SynthConfig) -> Result<(DatasetManifest, Vec<MultimodalSample>)> {
    config.validate()?;
    let profiles = class_profiles(config)?;
    let ids: Vec<String> = (0..config.n_patches).map(patch_id).collect();
    let folds = make_folds(&ids, config.n_folds, config.seed)?;
    let samples = (0..config.n_patches)
        .map(|i| generate_indexed(config, &profiles, i).map(|p| p.sample))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MultimodalSample> = samples
        .iter()
        .filter(|s| folds[&s.patch_id] != config.n_folds)
        .collect();
    let manifest = DatasetManifest {
        root: PathBuf::new(),
        patch_ids: ids,
        folds,
        stats: channel_stats(&refs, &config.channels),
        num_classes: config.num_classes,
        class_names: (0..config.num_classes).map(|k| format!("class_{k}")).collect(),
    };
    manifest.validate()?;
    Ok((manifest, samples))
}

/// Writes a full dataset under `root` and returns its manifest.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let (mut manifest, samples) = generate_in_memory(config)?;
    create_dir_all(root)?;
    for sample in &samples {
        save_sample(sample, config.num_classes, root)?;
    }
    manifest.root = root.to_path_buf();
    write_json(&root.join(SYNTH_CONFIG_FILE), config)?;
    manifest.save(root)?;
    Ok(manifest)
}
