use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{modality_name, MODALITY_NAMES};
use crate::error::{Error, Result};

/// How modalities are combined. `Single(m)` is a unimodal model on modality `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    Early,
    Mid,
    Late,
    Decision,
    Single(usize),
}

impl Scheme {
    pub fn is_fusion(self) -> bool {
        !matches!(self, Scheme::Single(_))
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Early => f.write_str("early"),
            Scheme::Mid => f.write_str("mid"),
            Scheme::Late => f.write_str("late"),
            Scheme::Decision => f.write_str("decision"),
            Scheme::Single(m) => f.write_str(&modality_name(*m)),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "early" => return Ok(Scheme::Early),
            "mid" => return Ok(Scheme::Mid),
            "late" => return Ok(Scheme::Late),
            "decision" => return Ok(Scheme::Decision),
            _ => {}
        }
        if let Some(m) = MODALITY_NAMES.iter().position(|n| n.eq_ignore_ascii_case(&lower)) {
            return Ok(Scheme::Single(m));
        }
        if let Some(m) = lower.strip_prefix('m').and_then(|d| d.parse().ok()) {
            return Ok(Scheme::Single(m));
        }
        Err(Error::Config(format!(
            "unknown scheme '{s}' (expected early, mid, late, decision or a modality name such as S2)"
        )))
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Parcel classification.
    Parcel,
    /// Semantic segmentation with a background class.
    Semantic,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Parcel => "parcel",
            Task::Semantic => "semantic",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parcel" | "classification" => Ok(Task::Parcel),
            "semantic" | "segmentation" => Ok(Task::Semantic),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected parcel or semantic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub scheme: Scheme,
    pub aux: bool,
    /// Auxiliary loss weight per modality.
    pub lambda: Vec<f64>,
    pub temporal_dropout: bool,
    /// Drop probability per modality, used when `temporal_dropout` is set.
    pub dropout: Vec<f64>,
    /// Modality whose dates early fusion interpolates to.
    pub interp_target: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Late,
            aux: false,
            lambda: vec![0.5; 3],
            temporal_dropout: false,
            dropout: vec![0.4, 0.2, 0.2],
            interp_target: 0,
        }
    }
}

impl FusionConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    /// Dropout rates actually applied during training.
    pub fn effective_dropout(&self) -> Vec<f64> {
        if self.temporal_dropout {
            self.dropout.clone()
        } else {
            vec![0.0; self.dropout.len()]
        }
    }

    /// Checks value ranges and the scheme/task/aux rules for `m` modalities.
    pub fn validate(&self, task: Task, m: usize) -> Result<()> {
        check_combination(self.scheme, task, self.aux)?;
        if self.lambda.len() != m || self.dropout.len() != m {
            return Err(Error::Config(format!(
                "lambda and dropout need one entry per modality ({m}), got {} and {}",
                self.lambda.len(),
                self.dropout.len()
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("auxiliary weights must be finite and >= 0".into()));
        }
        if self.dropout.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::Config("dropout probabilities must lie in [0, 1)".into()));
        }
        if self.interp_target >= m {
            return Err(Error::Config(format!(
                "interpolation target {} is not one of {m} modalities",
                self.interp_target
            )));
        }
        match self.scheme {
            Scheme::Single(s) if s >= m => Err(Error::Config(format!("modality {s} does not exist ({m} modalities)"))),
            s if s.is_fusion() && m < 2 => Err(Error::Config(format!("{s} fusion needs at least two modalities"))),
            _ => Ok(()),
        }
    }
}

/// The legality rules for (scheme, task, auxiliary supervision).
pub fn check_combination(scheme: Scheme, task: Task, aux: bool) -> Result<()> {
    if scheme == Scheme::Mid && task == Task::Semantic {
        return Err(Error::Config(
            "mid fusion is not supported for semantic segmentation: merging per-date feature maps \
             along time has no counterpart in the U-TAE encoder"
                .into(),
        ));
    }
    if scheme == Scheme::Early && aux {
        return Err(Error::Config(
            "auxiliary supervision cannot be used with early fusion: the modalities are merged \
             before any encoder, so there is no per-modality branch to supervise"
                .into(),
        ));
    }
    if let (Scheme::Single(_), true) = (scheme, aux) {
        return Err(Error::Config(
            "auxiliary supervision needs a fusion scheme with several modality branches".into(),
        ));
    }
    Ok(())
}

/// Encoder and decoder widths shared by all schemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_classes: usize,
    /// Channels per modality.
    pub channels: Vec<usize>,
    pub sample_size: usize,
    pub pixel_mlp: Vec<usize>,
    /// Spatial embedding width `F`, shared so mid fusion can stack sequences.
    pub embed_width: usize,
    pub heads: usize,
    pub key_width: usize,
    /// L-TAE output MLP widths.
    pub temporal_mlp: Vec<usize>,
    pub period: f64,
    pub decoder_hidden: usize,
    pub utae_widths: Vec<usize>,
    pub seg_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            channels: vec![4, 3, 3],
            sample_size: 32,
            pixel_mlp: vec![32, 64],
            embed_width: 64,
            heads: 4,
            key_width: 8,
            temporal_mlp: vec![64],
            period: 1000.0,
            decoder_hidden: 32,
            utae_widths: vec![32, 64, 128],
            seg_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn modalities(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.num_classes,
            self.sample_size,
            self.embed_width,
            self.heads,
            self.key_width,
            self.decoder_hidden,
            self.seg_hidden,
        ];
        if widths.contains(&0)
            || self.channels.is_empty()
            || self.channels.contains(&0)
            || self.pixel_mlp.is_empty()
            || self.pixel_mlp.contains(&0)
            || self.temporal_mlp.contains(&0)
            || self.utae_widths.is_empty()
            || self.utae_widths.contains(&0)
        {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.embed_width % self.heads != 0 || self.utae_widths.iter().any(|w| w % self.heads != 0) {
            return Err(Error::Config(format!(
                "embedding and U-TAE widths must be divisible by {} heads",
                self.heads
            )));
        }
        if !(self.period > 0.0) {
            return Err(Error::Config("positional encoding period must be positive".into()));
        }
        Ok(())
    }

    pub fn temporal_width(&self) -> usize {
        self.temporal_mlp.last().copied().unwrap_or(self.embed_width)
    }
}
