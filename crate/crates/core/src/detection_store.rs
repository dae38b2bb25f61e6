//! Per-frame object detections, the class blocklist, and fill-object
//! selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes that are either too frequent or useless as navigation landmarks.
pub const DEFAULT_BLOCKED_CLASSES: [&str; 6] = [
    "bus",
    "car(automobile)",
    "license plate",
    "wheel",
    "rearview mirror",
    "taillight",
];

/// One line of the detections JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub class_name: String,
    pub confidence: f64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, frame_index: usize) -> Self {
        Self {
            video_id: video_id.into(),
            frame_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// Detections of one frame, highest confidence first.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameDetections {
    pub frame: Option<FrameRef>,
    detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn new(frame: FrameRef, mut detections: Vec<Detection>) -> Self {
        detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Self {
            frame: Some(frame),
            detections,
        }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Lowercased, underscore-free spellings under which a class can match:
/// the full name plus, for `base(alias)` names, the base and the alias.
fn name_forms(name: &str) -> Vec<String> {
    let full: String = name
        .trim()
        .to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .replace(" (", "(")
        .replace("( ", "(")
        .replace(" )", ")");
    let mut forms = vec![full.clone()];
    if let (Some(open), Some(close)) = (full.find('('), full.rfind(')')) {
        if open < close {
            let base = full[..open].trim();
            let alias = full[open + 1..close].trim();
            for form in [base, alias] {
                if !form.is_empty() {
                    forms.push(form.to_string());
                }
            }
        }
    }
    forms
}

/// Surface form used when a class fills an `<OBJECT>` slot:
/// `traffic_light` becomes `traffic light`, `car_(automobile)` becomes `car`.
pub fn display_name(class_name: &str) -> String {
    let forms = name_forms(class_name);
    forms.get(1).cloned().unwrap_or_else(|| forms[0].clone())
}

pub fn same_class(a: &str, b: &str) -> bool {
    let fa = name_forms(a);
    name_forms(b).iter().any(|f| fa.contains(f))
}

/// Case-insensitive class blocklist.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClassFilter {
    blocked: BTreeSet<String>,
}

impl ClassFilter {
    pub fn new<I, S>(classes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            blocked: classes
                .into_iter()
                .flat_map(|c| name_forms(c.as_ref()))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Filter with [`DEFAULT_BLOCKED_CLASSES`].
    pub fn default_blocklist() -> Self {
        Self::new(DEFAULT_BLOCKED_CLASSES)
    }

    /// One class per line; blank lines and `#` comments ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    pub fn is_blocked(&self, class_name: &str) -> bool {
        name_forms(class_name)
            .iter()
            .any(|f| self.blocked.contains(f))
    }
}

pub fn apply_class_filter(fd: &FrameDetections, filter: &ClassFilter) -> FrameDetections {
    FrameDetections {
        frame: fd.frame.clone(),
        detections: fd
            .detections
            .iter()
            .filter(|d| !filter.is_blocked(&d.class_name))
            .cloned()
            .collect(),
    }
}

/// All loaded detections keyed by frame.
#[derive(Clone, Debug, Default)]
pub struct DetectionStore {
    frames: BTreeMap<FrameRef, FrameDetections>,
    /// Records dropped during load, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl DetectionStore {
    pub fn from_records(records: impl IntoIterator<Item = (usize, DetectionRecord)>) -> Self {
        let mut grouped: BTreeMap<FrameRef, Vec<Detection>> = BTreeMap::new();
        let mut skipped = Vec::new();
        for (line, r) in records {
            let key = FrameRef::new(r.video_id.clone(), r.frame_index);
            let entry = grouped.entry(key).or_default();
            if let Some(reason) = record_problem(&r) {
                log::warn!("detection on line {line} skipped: {reason}");
                skipped.push((line, reason));
                continue;
            }
            entry.push(Detection {
                class_name: r.class_name,
                confidence: r.confidence,
                bbox: r.bbox,
            });
        }
        Self {
            frames: grouped
                .into_iter()
                .map(|(k, v)| (k.clone(), FrameDetections::new(k, v)))
                .collect(),
            skipped,
        }
    }

    /// Reads the detections JSONL file. Unknown fields are ignored; a
    /// malformed line is a parse error naming its line number.
    pub fn load(path: &Path) -> Result<Self> {
        let records = crate::jsonl::read_numbered_records::<DetectionRecord>(path)?;
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameDetections> {
        self.frames.values()
    }

    /// Detections for `frame`, empty when the frame has none.
    pub fn get(&self, frame: &FrameRef) -> FrameDetections {
        self.frames.get(frame).cloned().unwrap_or_else(|| FrameDetections {
            frame: Some(frame.clone()),
            detections: Vec::new(),
        })
    }

    pub fn filtered(&self, filter: &ClassFilter) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|(k, v)| (k.clone(), apply_class_filter(v, filter)))
                .collect(),
            skipped: self.skipped.clone(),
        }
    }
}

fn record_problem(r: &DetectionRecord) -> Option<String> {
    if !(r.confidence.is_finite() && (0.0..=1.0).contains(&r.confidence)) {
        return Some(format!("confidence {} outside [0, 1]", r.confidence));
    }
    let [x, y, w, h] = r.bbox;
    if r.bbox.iter().any(|v| !v.is_finite()) || x < 0.0 || y < 0.0 {
        return Some(format!("bbox {:?} has negative or non-finite origin", r.bbox));
    }
    if w <= 0.0 || h <= 0.0 {
        return Some(format!("bbox {:?} has non-positive size", r.bbox));
    }
    if r.class_name.trim().is_empty() {
        return Some("empty class name".to_string());
    }
    None
}

/// Draws one detection with probability proportional to confidence, skipping
/// classes in `recently_used` unless that would leave nothing to draw from.
pub fn select_object(
    fd: &FrameDetections,
    recently_used: &[String],
    rng: &mut impl Rng,
) -> Option<String> {
    let fresh: Vec<&Detection> = fd
        .detections
        .iter()
        .filter(|d| !recently_used.iter().any(|u| same_class(u, &d.class_name)))
        .collect();
    let pool: Vec<&Detection> = if fresh.is_empty() {
        fd.detections.iter().collect()
    } else {
        fresh
    };
    if pool.is_empty() {
        return None;
    }
    let total: f64 = pool.iter().map(|d| d.confidence).sum();
    if total <= 0.0 {
        return Some(pool[rng.gen_range(0..pool.len())].class_name.clone());
    }
    let mut target = rng.gen::<f64>() * total;
    for d in &pool {
        if target < d.confidence {
            return Some(d.class_name.clone());
        }
        target -= d.confidence;
    }
    pool.last().map(|d| d.class_name.clone())
}
