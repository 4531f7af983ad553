//! Clip annotations, per-frame feature sequences, and their on-disk form.

mod io;
mod split;
mod synth;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use io::{
    load_dataset, load_splits, read_annotations, read_features, save_dataset, save_splits,
    write_annotations, write_features, ANNOTATIONS_FILE, FEATURES_FILE, FEATURES_MAGIC,
    FEATURES_VERSION, META_FILE,
};
pub use split::{split_dataset, Splits};
pub use synth::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {} at {location}: {reason}", path.display())]
    Malformed {
        path: PathBuf,
        location: String,
        reason: String,
    },
    #[error("clip {clip_id}: {reason}")]
    Invariant { clip_id: String, reason: String },
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("split fractions must be non-negative and sum to 1 (got sum {sum})")]
    Fractions { sum: f64 },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// Object class responsible for an anticipated incident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskClass {
    Cyclist,
    Pedestrian,
    Vehicle,
}

impl RiskClass {
    pub const ALL: [RiskClass; 3] = [
        RiskClass::Cyclist,
        RiskClass::Pedestrian,
        RiskClass::Vehicle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskClass::Cyclist => "cyclist",
            RiskClass::Pedestrian => "pedestrian",
            RiskClass::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for RiskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-clip label. Frame indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accident_start_t: Option<usize>,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_class: Option<RiskClass>,
    pub frame_rate_f: f64,
}

impl ClipAnnotation {
    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(DataError::Invariant {
                clip_id: self.clip_id.clone(),
                reason,
            })
        };
        if !(self.frame_rate_f.is_finite() && self.frame_rate_f > 0.0) {
            return fail(format!(
                "frame_rate_f must be > 0, got {}",
                self.frame_rate_f
            ));
        }
        if self.num_frames == 0 {
            return fail("num_frames must be at least 1".into());
        }
        match (self.label, self.accident_start_t) {
            (Label::Positive, None) => fail("positive clip without accident_start_t".into()),
            (Label::Positive, Some(t)) if t < 1 || t > self.num_frames => fail(format!(
                "accident_start_t {t} outside 1..={}",
                self.num_frames
            )),
            (Label::Negative, Some(_)) => fail("negative clip with accident_start_t".into()),
            (Label::Negative, _) if self.risk_class.is_some() => {
                fail("negative clip with risk_class".into())
            }
            _ => Ok(()),
        }
    }
}

/// Shared feature dimensions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub global_dim: usize,
    pub num_locals: usize,
    pub local_dim: usize,
}

/// Per-frame global features and masked per-object local features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub clip_id: String,
    /// `num_frames × global_dim`.
    pub global: Tensor,
    /// One `num_locals × local_dim` matrix per frame.
    pub locals: Vec<Tensor>,
    /// One presence flag per local slot per frame.
    pub mask: Vec<Vec<bool>>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.global.rows()
    }

    pub fn validate(&self, dims: FeatureDims) -> Result<()> {
        let fail = |reason: String| {
            Err(DataError::Invariant {
                clip_id: self.clip_id.clone(),
                reason,
            })
        };
        let frames = self.num_frames();
        if self.global.cols() != dims.global_dim {
            return fail(format!(
                "global dim {} != {}",
                self.global.cols(),
                dims.global_dim
            ));
        }
        if self.locals.len() != frames || self.mask.len() != frames {
            return fail("local features or mask do not cover every frame".into());
        }
        for (t, (loc, mask)) in self.locals.iter().zip(&self.mask).enumerate() {
            if loc.shape() != (dims.num_locals, dims.local_dim) || mask.len() != dims.num_locals {
                return fail(format!("frame {}: local shape {:?}", t + 1, loc.shape()));
            }
            for (slot, &present) in mask.iter().enumerate() {
                if !present && loc.row(slot).iter().any(|&v| v != 0.0) {
                    return fail(format!(
                        "frame {}: masked-out slot {slot} has non-zero features",
                        t + 1
                    ));
                }
            }
        }
        if !self.global.is_finite() || self.locals.iter().any(|l| !l.is_finite()) {
            return fail("non-finite feature value".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub annotation: ClipAnnotation,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: FeatureDims,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.clips
            .iter()
            .filter(|c| c.annotation.is_positive())
            .count()
    }

    pub fn annotations(&self) -> Vec<ClipAnnotation> {
        self.clips.iter().map(|c| c.annotation.clone()).collect()
    }

    /// Validates every clip, plus cross-record consistency: unique ids,
    /// matching frame counts, and positives either all or never carrying a
    /// risk class.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut with_class = None;
        for clip in &self.clips {
            let a = &clip.annotation;
            a.validate()?;
            clip.features.validate(self.dims)?;
            if !seen.insert(a.clip_id.as_str()) {
                return Err(DataError::Invariant {
                    clip_id: a.clip_id.clone(),
                    reason: "duplicate clip_id".into(),
                });
            }
            if a.clip_id != clip.features.clip_id {
                return Err(DataError::Invariant {
                    clip_id: a.clip_id.clone(),
                    reason: format!("feature record is for `{}`", clip.features.clip_id),
                });
            }
            if a.num_frames != clip.features.num_frames() {
                return Err(DataError::Invariant {
                    clip_id: a.clip_id.clone(),
                    reason: format!(
                        "annotation has {} frames, features have {}",
                        a.num_frames,
                        clip.features.num_frames()
                    ),
                });
            }
            if a.is_positive() {
                let has = a.risk_class.is_some();
                if *with_class.get_or_insert(has) != has {
                    return Err(DataError::Invariant {
                        clip_id: a.clip_id.clone(),
                        reason: "risk_class present on some positives but not others".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Summary of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub num_clips: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub frame_rate_f: f64,
    pub num_classes: usize,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.train_size + self.val_size + self.test_size != self.num_clips {
            return Err(DataError::Config {
                field: "num_clips",
                reason: format!(
                    "split sizes {}+{}+{} do not sum to {}",
                    self.train_size, self.val_size, self.test_size, self.num_clips
                ),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann() -> ClipAnnotation {
        ClipAnnotation {
            clip_id: "c0".into(),
            label: Label::Positive,
            accident_start_t: Some(10),
            num_frames: 10,
            risk_class: None,
            frame_rate_f: 20.0,
        }
    }

    #[test]
    fn annotation_invariants() {
        assert!(ann().validate().is_ok());
        let mut a = ann();
        a.accident_start_t = None;
        assert!(matches!(a.validate(), Err(DataError::Invariant { .. })));
        let mut a = ann();
        a.accident_start_t = Some(11);
        assert!(a.validate().is_err());
        let mut a = ann();
        a.accident_start_t = Some(0);
        assert!(a.validate().is_err());
        let mut a = ann();
        a.label = Label::Negative;
        assert!(a.validate().is_err());
        a.accident_start_t = None;
        assert!(a.validate().is_ok());
        a.risk_class = Some(RiskClass::Vehicle);
        assert!(a.validate().is_err());
        let mut a = ann();
        a.frame_rate_f = 0.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn annotation_json_omits_absent_optionals() {
        let mut a = ann();
        a.label = Label::Negative;
        a.accident_start_t = None;
        let json = serde_json::to_string(&a).unwrap();
        assert!(!json.contains("accident_start_t"));
        assert!(!json.contains("risk_class"));
        assert!(json.contains("\"label\":\"negative\""));
    }

    #[test]
    fn masked_rows_must_be_zero() {
        let dims = FeatureDims {
            global_dim: 1,
            num_locals: 2,
            local_dim: 1,
        };
        let mut f = FeatureSequence {
            clip_id: "c".into(),
            global: Tensor::zeros(1, 1),
            locals: vec![Tensor::from_rows(&[[1.0], [0.0]])],
            mask: vec![vec![true, false]],
        };
        assert!(f.validate(dims).is_ok());
        f.locals[0].set(1, 0, 0.5);
        assert!(f.validate(dims).is_err());
    }
}
