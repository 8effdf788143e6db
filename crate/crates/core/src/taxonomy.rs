//! Distortion vocabulary, label sets, bounding boxes and the pseudo-score
//! band rule.
//!
//! The canonical label strings are a wire-format contract: every JSONL file
//! read or written by this crate uses them verbatim.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of distortion labels an annotator may assign to a frame.
pub const MAX_GROUND_TRUTH_LABELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaxonomyError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("\"no issue\" cannot be combined with distortion labels")]
    NoIssueMixed,
    #[error("ground truth allows at most three issue labels, got {0}")]
    TooManyLabels(usize),
    #[error("invalid bounding box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("boxes given for label {0:?} which is not in the label set")]
    BoxWithoutLabel(String),
    #[error("label {0:?} has no bounding boxes")]
    MissingBoxes(String),
    #[error("\"no issue\" cannot carry bounding boxes")]
    BoxesOnNoIssue,
}

/// One of the eight structural-distortion categories, or the `no issue`
/// sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistortionLabel {
    LimbDeformation,
    LimbIncompleteness,
    ExtraLimbs,
    TorsoDeformation,
    FacialDeformation,
    MeshPenetration,
    NonAnimalDistortion,
    MotionBlur,
    NoIssue,
}

impl DistortionLabel {
    /// The eight distortion categories, excluding the sentinel.
    pub const DISTORTIONS: [DistortionLabel; 8] = [
        DistortionLabel::LimbDeformation,
        DistortionLabel::LimbIncompleteness,
        DistortionLabel::ExtraLimbs,
        DistortionLabel::TorsoDeformation,
        DistortionLabel::FacialDeformation,
        DistortionLabel::MeshPenetration,
        DistortionLabel::NonAnimalDistortion,
        DistortionLabel::MotionBlur,
    ];

    /// All nine identifiers, sentinel last.
    pub const ALL: [DistortionLabel; 9] = [
        DistortionLabel::LimbDeformation,
        DistortionLabel::LimbIncompleteness,
        DistortionLabel::ExtraLimbs,
        DistortionLabel::TorsoDeformation,
        DistortionLabel::FacialDeformation,
        DistortionLabel::MeshPenetration,
        DistortionLabel::NonAnimalDistortion,
        DistortionLabel::MotionBlur,
        DistortionLabel::NoIssue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionLabel::LimbDeformation => "limb deformation",
            DistortionLabel::LimbIncompleteness => "limb incompleteness",
            DistortionLabel::ExtraLimbs => "extra limbs",
            DistortionLabel::TorsoDeformation => "torso deformation",
            DistortionLabel::FacialDeformation => "facial deformation",
            DistortionLabel::MeshPenetration => "mesh penetration",
            DistortionLabel::NonAnimalDistortion => "non-animal distortion and collapse",
            DistortionLabel::MotionBlur => "motion blur",
            DistortionLabel::NoIssue => "no issue",
        }
    }

    pub fn is_distortion(self) -> bool {
        self != DistortionLabel::NoIssue
    }
}

impl fmt::Display for DistortionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionLabel {
    type Err = TaxonomyError;

    /// Case-insensitive match on the canonical strings only. No trimming and
    /// no synonyms.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DistortionLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaxonomyError::UnknownLabel(s.to_string()))
    }
}

impl Serialize for DistortionLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DistortionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelRole {
    GroundTruth,
    Prediction,
}

/// A deduplicated set of distortion labels for one frame.
///
/// The `no issue` sentinel is accepted on construction but never stored: a
/// clean frame is the empty set. Mixing the sentinel with a distortion label
/// is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSet {
    labels: BTreeSet<DistortionLabel>,
    role: LabelRole,
}

impl LabelSet {
    pub fn new<I>(labels: I, role: LabelRole) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = DistortionLabel>,
    {
        let mut set = BTreeSet::new();
        let mut saw_sentinel = false;
        for label in labels {
            if label.is_distortion() {
                set.insert(label);
            } else {
                saw_sentinel = true;
            }
        }
        if saw_sentinel && !set.is_empty() {
            return Err(TaxonomyError::NoIssueMixed);
        }
        if role == LabelRole::GroundTruth && set.len() > MAX_GROUND_TRUTH_LABELS {
            return Err(TaxonomyError::TooManyLabels(set.len()));
        }
        Ok(Self { labels: set, role })
    }

    pub fn ground_truth<I>(labels: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = DistortionLabel>,
    {
        Self::new(labels, LabelRole::GroundTruth)
    }

    pub fn prediction<I>(labels: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = DistortionLabel>,
    {
        Self::new(labels, LabelRole::Prediction)
    }

    /// The clean (`no issue`) set.
    pub fn clean(role: LabelRole) -> Self {
        Self {
            labels: BTreeSet::new(),
            role,
        }
    }

    /// Parse canonical strings. `"null"` and `"no issue"` both mean clean.
    pub fn parse_strs<S: AsRef<str>>(items: &[S], role: LabelRole) -> Result<Self, TaxonomyError> {
        let mut labels = Vec::with_capacity(items.len());
        for item in items {
            let s = item.as_ref();
            if s.eq_ignore_ascii_case("null") {
                labels.push(DistortionLabel::NoIssue);
            } else {
                labels.push(s.parse()?);
            }
        }
        Self::new(labels, role)
    }

    pub fn role(&self) -> LabelRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// True when the frame carries no distortion label.
    pub fn is_clean(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: DistortionLabel) -> bool {
        self.labels.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = DistortionLabel> + '_ {
        self.labels.iter().copied()
    }

    pub fn as_set(&self) -> &BTreeSet<DistortionLabel> {
        &self.labels
    }

    /// Same labels regardless of role.
    pub fn same_labels(&self, other: &LabelSet) -> bool {
        self.labels == other.labels
    }

    /// Canonical strings; empty for a clean frame.
    pub fn to_strings(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.as_str().to_string()).collect()
    }
}

/// Axis-aligned box in pixel coordinates with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, TaxonomyError> {
        let invalid = |reason| TaxonomyError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(invalid("negative coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("requires x1 < x2 and y1 < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Validate against known frame dimensions as well.
    pub fn within(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, TaxonomyError> {
        let b = Self::new(x1, y1, x2, y2)?;
        if x2 > width || y2 > height {
            return Err(TaxonomyError::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "outside frame dimensions",
            });
        }
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, TaxonomyError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union. Symmetric in its arguments.
pub fn bbox_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    // a.area() + b.area() is commutative, so the result is bitwise symmetric
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Ground-truth annotation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub frame_ref: String,
    labels: LabelSet,
    boxes: BTreeMap<DistortionLabel, Vec<BoundingBox>>,
}

impl FrameAnnotation {
    pub fn new(
        frame_id: impl Into<String>,
        frame_ref: impl Into<String>,
        labels: LabelSet,
        boxes: BTreeMap<DistortionLabel, Vec<BoundingBox>>,
    ) -> Result<Self, TaxonomyError> {
        let labels = if labels.role() == LabelRole::GroundTruth {
            labels
        } else {
            LabelSet::ground_truth(labels.iter())?
        };
        for (label, list) in &boxes {
            if !label.is_distortion() {
                return Err(TaxonomyError::BoxesOnNoIssue);
            }
            if !labels.contains(*label) {
                return Err(TaxonomyError::BoxWithoutLabel(label.to_string()));
            }
            if list.is_empty() {
                return Err(TaxonomyError::MissingBoxes(label.to_string()));
            }
        }
        for label in labels.iter() {
            if !boxes.contains_key(&label) {
                return Err(TaxonomyError::MissingBoxes(label.to_string()));
            }
        }
        Ok(Self {
            frame_id: frame_id.into(),
            frame_ref: frame_ref.into(),
            labels,
            boxes,
        })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn boxes(&self) -> &BTreeMap<DistortionLabel, Vec<BoundingBox>> {
        &self.boxes
    }

    pub fn is_distorted(&self) -> bool {
        !self.labels.is_clean()
    }
}

/// Closed interval of point-wise scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreBand {
    pub lo: f64,
    pub hi: f64,
}

impl ScoreBand {
    pub fn new(lo: f64, hi: f64) -> Option<Self> {
        (1.0 <= lo && lo < hi && hi <= 5.0).then_some(Self { lo, hi })
    }

    pub fn contains(&self, s: f64) -> bool {
        self.lo <= s && s <= self.hi
    }
}

/// Band a pseudo point-wise score is drawn from, keyed by label count.
pub fn pseudo_score_band(n_labels: usize) -> ScoreBand {
    let (lo, hi) = match n_labels {
        0 => (4.0, 5.0),
        1 => (3.0, 4.0),
        2 => (2.0, 3.0),
        _ => (1.0, 2.0),
    };
    ScoreBand { lo, hi }
}

/// Uniform draw from the band, rounded half-up to two decimals.
pub fn sample_pseudo_score(n_labels: usize, seed: u64) -> f64 {
    let band = pseudo_score_band(n_labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen();
    let x = band.lo + u * (band.hi - band.lo);
    let hundredths = (x * 100.0 + 0.5).floor();
    (hundredths / 100.0).clamp(band.lo, band.hi)
}
