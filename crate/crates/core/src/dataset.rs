//! JSONL ingestion with per-line validation.
//!
//! Loads are all-or-nothing: every line is checked, and any failure rejects
//! the whole file with the complete list of problems.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::bench::CotCandidate;
use crate::grpo::Side;
use crate::parser;
use crate::reward::Preference;
use crate::taxonomy::{
    BoundingBox, DistortionLabel, FrameAnnotation, LabelRole, LabelSet, TaxonomyError,
};

#[derive(Debug, Clone, PartialEq)]
pub enum LineError {
    Schema {
        line: usize,
        field: String,
        reason: String,
    },
    DuplicateId {
        line: usize,
        id: String,
    },
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LineError::Schema {
                line,
                field,
                reason,
            } => {
                write!(f, "line {line}: field `{field}`: {reason}")
            }
            LineError::DuplicateId { line, id } => write!(f, "line {line}: duplicate id {id:?}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invalid record(s) in {path}:\n{}", errors.len(), join_lines(errors))]
    Invalid {
        path: PathBuf,
        errors: Vec<LineError>,
    },
}

fn join_lines(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(|e| format!("  {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl DatasetError {
    pub fn line_errors(&self) -> &[LineError] {
        match self {
            DatasetError::Invalid { errors, .. } => errors,
            DatasetError::Io { .. } => &[],
        }
    }
}

/// A ground-truth frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePairRecord {
    pub pair_id: String,
    pub prompt: String,
    pub a: FrameAnnotation,
    pub b: FrameAnnotation,
    pub gt_pref: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_id: String,
    pub labels: LabelSet,
    pub rating: Option<f64>,
}

/// One sampled response for one side of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRollout {
    pub pair_id: String,
    pub side: Side,
    pub rollout_index: usize,
    pub text: String,
}

/// One sampled response for a single frame, as written by the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRollout {
    pub frame_id: String,
    pub rollout_index: usize,
    pub text: String,
    pub model_id: String,
}

type Fields = Map<String, Value>;

struct LineCtx<'a> {
    line: usize,
    errors: &'a mut Vec<LineError>,
}

impl LineCtx<'_> {
    fn fail(&mut self, field: &str, reason: impl Into<String>) {
        self.errors.push(LineError::Schema {
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        });
    }

    fn string(&mut self, obj: &Fields, field: &str) -> Option<String> {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
            Some(Value::String(_)) => {
                self.fail(field, "must not be empty");
                None
            }
            Some(_) => {
                self.fail(field, "expected a string");
                None
            }
            None => {
                self.fail(field, "missing");
                None
            }
        }
    }

    fn number(&mut self, obj: &Fields, field: &str) -> Option<f64> {
        match obj.get(field).map(|v| (v, v.as_f64())) {
            Some((_, Some(x))) if x.is_finite() => Some(x),
            Some(_) => {
                self.fail(field, "expected a finite number");
                None
            }
            None => {
                self.fail(field, "missing");
                None
            }
        }
    }

    fn labels(&mut self, obj: &Fields, field: &str, role: LabelRole) -> Option<LabelSet> {
        let items = match obj.get(field) {
            Some(Value::Array(items)) => items,
            Some(_) => {
                self.fail(field, "expected an array of label strings");
                return None;
            }
            None => {
                self.fail(field, "missing");
                return None;
            }
        };
        let mut strs = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            match item.as_str() {
                Some(s) => strs.push(s),
                None => {
                    self.fail(&format!("{field}[{i}]"), "expected a string");
                    return None;
                }
            }
        }
        match LabelSet::parse_strs(&strs, role) {
            Ok(set) => Some(set),
            Err(TaxonomyError::TooManyLabels(n)) => {
                self.fail(
                    field,
                    format!("at most three issue labels allowed, got {n}"),
                );
                None
            }
            Err(e) => {
                self.fail(field, e.to_string());
                None
            }
        }
    }

    fn boxes(
        &mut self,
        obj: &Fields,
        field: &str,
    ) -> Option<BTreeMap<DistortionLabel, Vec<BoundingBox>>> {
        let map = match obj.get(field) {
            None | Some(Value::Null) => return Some(BTreeMap::new()),
            Some(Value::Object(m)) => m,
            Some(_) => {
                self.fail(field, "expected an object of label -> [[x1,y1,x2,y2]]");
                return None;
            }
        };
        let mut out = BTreeMap::new();
        let mut ok = true;
        for (key, list) in map {
            let path = format!("{field}.{key}");
            let label = match key.parse::<DistortionLabel>() {
                Ok(l) => l,
                Err(e) => {
                    self.fail(&path, e.to_string());
                    ok = false;
                    continue;
                }
            };
            let Some(items) = list.as_array() else {
                self.fail(&path, "expected a list of boxes");
                ok = false;
                continue;
            };
            let mut parsed = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let coords: Option<Vec<f64>> = item
                    .as_array()
                    .map(|c| c.iter().filter_map(Value::as_f64).collect());
                match coords.filter(|c| c.len() == 4) {
                    Some(c) => match BoundingBox::new(c[0], c[1], c[2], c[3]) {
                        Ok(b) => parsed.push(b),
                        Err(e) => {
                            self.fail(&format!("{path}[{i}]"), e.to_string());
                            ok = false;
                        }
                    },
                    None => {
                        self.fail(&format!("{path}[{i}]"), "expected [x1, y1, x2, y2]");
                        ok = false;
                    }
                }
            }
            out.insert(label, parsed);
        }
        ok.then_some(out)
    }

    fn annotation(
        &mut self,
        obj: &Fields,
        prefix: &str,
        frame_id: String,
    ) -> Option<FrameAnnotation> {
        let field = |f: &str| {
            if prefix.is_empty() {
                f.to_string()
            } else {
                format!("{prefix}.{f}")
            }
        };
        let frame = self.string_at(obj, "frame", &field("frame"));
        let labels = self.labels_at(obj, "labels", &field("labels"));
        let boxes = self.boxes_at(obj, "bboxes", &field("bboxes"));
        let (frame, labels, boxes) = (frame?, labels?, boxes?);
        match FrameAnnotation::new(frame_id, frame, labels, boxes) {
            Ok(a) => Some(a),
            Err(e) => {
                self.fail(&field("bboxes"), e.to_string());
                None
            }
        }
    }

    // the *_at variants report a prefixed field path
    fn string_at(&mut self, obj: &Fields, key: &str, path: &str) -> Option<String> {
        let before = self.errors.len();
        let v = self.string(obj, key);
        self.rename_since(before, path);
        v
    }

    fn labels_at(&mut self, obj: &Fields, key: &str, path: &str) -> Option<LabelSet> {
        let before = self.errors.len();
        let v = self.labels(obj, key, LabelRole::GroundTruth);
        self.rename_since(before, path);
        v
    }

    fn boxes_at(
        &mut self,
        obj: &Fields,
        key: &str,
        path: &str,
    ) -> Option<BTreeMap<DistortionLabel, Vec<BoundingBox>>> {
        let before = self.errors.len();
        let v = self.boxes(obj, key);
        if path != key {
            for e in &mut self.errors[before..] {
                if let LineError::Schema { field, .. } = e {
                    *field = format!("{}{}", path, &field[key.len()..]);
                }
            }
        }
        v
    }

    fn rename_since(&mut self, before: usize, path: &str) {
        for e in &mut self.errors[before..] {
            if let LineError::Schema { field, .. } = e {
                if let Some(rest) = field.find('[').map(|i| field[i..].to_string()) {
                    *field = format!("{path}{rest}");
                } else {
                    *field = path.to_string();
                }
            }
        }
    }
}

/// Read non-blank lines and hand each parsed JSON object to `f`.
fn load_jsonl<T>(
    path: &Path,
    id_field: Option<&str>,
    mut f: impl FnMut(&mut LineCtx<'_>, &Fields) -> Option<T>,
) -> Result<Vec<T>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut errors = Vec::new();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let obj = match serde_json::from_str::<Value>(raw) {
            Ok(Value::Object(o)) => o,
            Ok(_) => {
                errors.push(LineError::Schema {
                    line,
                    field: "<record>".into(),
                    reason: "expected a JSON object".into(),
                });
                continue;
            }
            Err(e) => {
                errors.push(LineError::Schema {
                    line,
                    field: "<record>".into(),
                    reason: format!("invalid JSON: {e}"),
                });
                continue;
            }
        };
        if let Some(id) = id_field.and_then(|k| obj.get(k)).and_then(Value::as_str) {
            if !seen.insert(id.to_string()) {
                errors.push(LineError::DuplicateId {
                    line,
                    id: id.to_string(),
                });
                continue;
            }
        }
        let mut ctx = LineCtx {
            line,
            errors: &mut errors,
        };
        if let Some(v) = f(&mut ctx, &obj) {
            out.push(v);
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Invalid {
            path: path.to_path_buf(),
            errors,
        })
    }
}

fn parse_preference(ctx: &mut LineCtx<'_>, obj: &Fields, field: &str) -> Option<Preference> {
    match obj.get(field).and_then(Value::as_str) {
        Some(s) if s.eq_ignore_ascii_case("A") => Some(Preference::AWins),
        Some(s) if s.eq_ignore_ascii_case("B") => Some(Preference::BWins),
        Some(s) if s.eq_ignore_ascii_case("TIE") => Some(Preference::Tie),
        Some(s) => {
            ctx.fail(
                field,
                format!("expected \"A\", \"B\" or \"TIE\", got {s:?}"),
            );
            None
        }
        None => {
            ctx.fail(field, "missing or not a string");
            None
        }
    }
}

pub fn ingest_pairs(path: &Path) -> Result<Vec<FramePairRecord>, DatasetError> {
    load_jsonl(path, Some("pair_id"), |ctx, obj| {
        let pair_id = ctx.string(obj, "pair_id");
        let prompt = match obj.get("prompt") {
            Some(Value::String(s)) => Some(s.clone()),
            _ => {
                ctx.fail("prompt", "missing or not a string");
                None
            }
        };
        let id = pair_id.clone().unwrap_or_default();
        let mut side = |key: &str| match obj.get(key) {
            Some(Value::Object(inner)) => {
                ctx.annotation(inner, key, format!("{id}/{}", key.to_uppercase()))
            }
            _ => {
                ctx.fail(key, "missing or not an object");
                None
            }
        };
        let a = side("a");
        let b = side("b");
        let gt_pref = parse_preference(ctx, obj, "preference");
        Some(FramePairRecord {
            pair_id: pair_id?,
            prompt: prompt?,
            a: a?,
            b: b?,
            gt_pref: gt_pref?,
        })
    })
}

pub fn ingest_frames(path: &Path) -> Result<Vec<FrameAnnotation>, DatasetError> {
    load_jsonl(path, Some("frame_id"), |ctx, obj| {
        let frame_id = ctx.string(obj, "frame_id")?;
        ctx.annotation(obj, "", frame_id)
    })
}

pub fn ingest_pair_predictions(path: &Path) -> Result<Vec<PairPrediction>, DatasetError> {
    load_jsonl(path, Some("pair_id"), |ctx, obj| {
        let pair_id = ctx.string(obj, "pair_id");
        let score_a = ctx.number(obj, "score_a");
        let score_b = ctx.number(obj, "score_b");
        Some(PairPrediction {
            pair_id: pair_id?,
            score_a: score_a?,
            score_b: score_b?,
        })
    })
}

/// Frame predictions, given either directly (`labels`, optional `rating`) or
/// as raw scorer output (`text`), which is run through the response parser.
/// For raw output only sample 0 of each frame is used.
pub fn ingest_frame_predictions(path: &Path) -> Result<Vec<FramePrediction>, DatasetError> {
    let records = load_jsonl(path, None, |ctx, obj| {
        let frame_id = ctx.string(obj, "frame_id")?;
        if let Some(text) = obj.get("text") {
            let Some(text) = text.as_str() else {
                ctx.fail("text", "expected a string");
                return None;
            };
            let index = obj
                .get("rollout_index")
                .and_then(Value::as_u64)
                .unwrap_or(0);
            if index != 0 {
                return Some(None);
            }
            let parsed = parser::parse_answer(text);
            return Some(Some((
                ctx.line,
                FramePrediction {
                    frame_id,
                    labels: parsed.labels,
                    rating: parsed.rating,
                },
            )));
        }
        let labels = ctx.labels(obj, "labels", LabelRole::Prediction);
        let rating = match obj.get("rating") {
            None | Some(Value::Null) => None,
            Some(_) => Some(ctx.number(obj, "rating")?),
        };
        Some(Some((
            ctx.line,
            FramePrediction {
                frame_id,
                labels: labels?,
                rating,
            },
        )))
    })?;
    let mut seen = HashSet::new();
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for (line, p) in records.into_iter().flatten() {
        if !seen.insert(p.frame_id.clone()) {
            errors.push(LineError::DuplicateId {
                line,
                id: p.frame_id,
            });
        } else {
            out.push(p);
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Invalid {
            path: path.to_path_buf(),
            errors,
        })
    }
}

pub fn ingest_pair_rollouts(path: &Path) -> Result<Vec<PairRollout>, DatasetError> {
    load_jsonl(path, None, |ctx, obj| {
        let pair_id = ctx.string(obj, "pair_id");
        let side = match obj.get("side").and_then(Value::as_str) {
            Some(s) if s.eq_ignore_ascii_case("A") => Some(Side::A),
            Some(s) if s.eq_ignore_ascii_case("B") => Some(Side::B),
            _ => {
                ctx.fail("side", "expected \"A\" or \"B\"");
                None
            }
        };
        let rollout_index = match obj.get("rollout_index").and_then(Value::as_u64) {
            Some(i) => Some(i as usize),
            None => {
                ctx.fail("rollout_index", "expected a non-negative integer");
                None
            }
        };
        let text = match obj.get("text") {
            Some(Value::String(s)) => Some(s.clone()),
            _ => {
                ctx.fail("text", "missing or not a string");
                None
            }
        };
        Some(PairRollout {
            pair_id: pair_id?,
            side: side?,
            rollout_index: rollout_index?,
            text: text?,
        })
    })
}

pub fn ingest_cot_candidates(path: &Path) -> Result<Vec<CotCandidate>, DatasetError> {
    load_jsonl(path, Some("frame_id"), |ctx, obj| {
        let frame_id = ctx.string(obj, "frame_id");
        let labels = ctx.labels(obj, "labels", LabelRole::Prediction);
        let regions = ctx.boxes(obj, "bboxes");
        let reasoning = obj
            .get("reasoning")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let (frame_id, labels, regions) = (frame_id?, labels?, regions?);
        if let Some(stray) = regions.keys().find(|l| !labels.contains(**l)) {
            ctx.fail(
                &format!("bboxes.{stray}"),
                "region label not among predicted labels",
            );
            return None;
        }
        Some(CotCandidate {
            frame_id,
            labels,
            regions,
            reasoning,
        })
    })
}

fn boxes_json(boxes: &BTreeMap<DistortionLabel, Vec<BoundingBox>>) -> Value {
    let map: Map<String, Value> = boxes
        .iter()
        .map(|(l, bs)| {
            let list = bs
                .iter()
                .map(|b| Value::from(b.coords().to_vec()))
                .collect();
            (l.as_str().to_string(), Value::Array(list))
        })
        .collect();
    Value::Object(map)
}

/// A frame annotation in `frames.jsonl` form.
pub fn frame_json(a: &FrameAnnotation) -> Value {
    serde_json::json!({
        "frame_id": a.frame_id,
        "frame": a.frame_ref,
        "labels": a.labels().to_strings(),
        "bboxes": boxes_json(a.boxes()),
    })
}

/// A pair record in `pairs.jsonl` form.
pub fn pair_json(p: &FramePairRecord) -> Value {
    let side = |a: &FrameAnnotation| {
        serde_json::json!({
            "frame": a.frame_ref,
            "labels": a.labels().to_strings(),
            "bboxes": boxes_json(a.boxes()),
        })
    };
    serde_json::json!({
        "pair_id": p.pair_id,
        "prompt": p.prompt,
        "a": side(&p.a),
        "b": side(&p.b),
        "preference": p.gt_pref.as_str(),
    })
}
