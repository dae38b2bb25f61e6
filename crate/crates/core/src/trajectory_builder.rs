//! Video clip to VLN sample: frame sampling, action prediction and merging,
//! and one templated sentence per merged action.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action_predictor::{predict_sequence, FrameImage, RotationConfig, TurnLabel};
use crate::detection_store::{display_name, select_object, DetectionStore, FrameRef};
use crate::error::{Error, Result};
use crate::seed::{unit_rng, UnitRng};
use crate::template_engine::{fill_template, Category, TemplateBank, TemplateSampler};

/// Longest run of FORWARD actions described by one sentence.
pub const MAX_FORWARD_RUN: usize = 6;

/// Template draws for a slotted sentence before falling back to a slotless one.
pub const MAX_RESAMPLE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub path: PathBuf,
    /// Seconds from the start of the video.
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClipRecord {
    video_id: String,
    frames: Vec<FrameEntry>,
}

/// A pre-extracted video: frames in timestamp order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    frames: Vec<FrameEntry>,
    base_dir: Option<PathBuf>,
}

impl VideoClip {
    pub fn new(video_id: impl Into<String>, frames: Vec<FrameEntry>) -> Result<Self> {
        let video_id = video_id.into();
        if frames.is_empty() {
            return Err(Error::invalid(format!("clip {video_id} has no frames")));
        }
        if frames.iter().any(|f| !f.t.is_finite()) {
            return Err(Error::invalid(format!("clip {video_id} has a non-finite timestamp")));
        }
        if frames.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid(format!(
                "clip {video_id}: timestamps must be strictly increasing"
            )));
        }
        Ok(Self {
            video_id,
            frames,
            base_dir: None,
        })
    }

    /// Relative frame paths are resolved against `dir`.
    pub fn with_base_dir(mut self, dir: &Path) -> Self {
        self.base_dir = Some(dir.to_path_buf());
        self
    }

    pub fn frames(&self) -> &[FrameEntry] {
        &self.frames
    }

    pub fn duration(&self) -> f64 {
        self.frames.last().map(|f| f.t).unwrap_or(0.0) - self.frames[0].t
    }

    pub fn resolve(&self, frame: &FrameEntry) -> PathBuf {
        match &self.base_dir {
            Some(dir) if frame.path.is_relative() => dir.join(&frame.path),
            _ => frame.path.clone(),
        }
    }

    pub fn to_record_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ClipRecord {
            video_id: self.video_id.clone(),
            frames: self.frames.clone(),
        })?)
    }
}

/// Reads the clip manifest JSONL `{video_id, frames: [{index, path, t}]}`.
/// Relative frame paths are taken relative to the manifest's directory.
pub fn load_clips(path: &Path) -> Result<Vec<VideoClip>> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    crate::jsonl::read_numbered_records::<ClipRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            VideoClip::new(r.video_id, r.frames)
                .map(|c| c.with_base_dir(&base))
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: e.to_string(),
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub interval_s: f64,
    /// Inclusive range of sampled frames per trajectory.
    pub length_range: (usize, usize),
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            interval_s: 1.0,
            length_range: (25, 40),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval_s.is_finite() && self.interval_s > 0.0) {
            return Err(Error::invalid(format!("interval_s must be positive, got {}", self.interval_s)));
        }
        let (lo, hi) = self.length_range;
        if lo < 2 || lo > hi {
            return Err(Error::invalid(format!(
                "length range must satisfy 2 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledFrames {
    /// Positions into the clip's frame list.
    pub positions: Vec<usize>,
    pub target_len: usize,
    /// The clip was too short for `target_len`.
    pub truncated: bool,
}

/// Draws a target length from the configured range and a start offset
/// uniformly over the slack that still fits it, then picks frames every
/// `interval_s` seconds.
pub fn sample_frames(clip: &VideoClip, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<SampledFrames> {
    cfg.validate()?;
    let span = clip.duration();
    if clip.frames.len() < 2 || span + 1e-9 < cfg.interval_s {
        return Err(Error::ClipRejected {
            video_id: clip.video_id.clone(),
            reason: format!(
                "{} frame(s) spanning {span:.3}s cannot give 2 frames {}s apart",
                clip.frames.len(),
                cfg.interval_s
            ),
        });
    }
    let (lo, hi) = cfg.length_range;
    let target = rng.gen_range(lo..=hi);
    let slack = span - (target - 1) as f64 * cfg.interval_s;
    let offset = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
    sample_frames_at(clip, cfg.interval_s, target, offset)
}

/// Deterministic core of [`sample_frames`]: frames nearest to
/// `t0 + offset + k * interval_s` for `k = 0..target_len`, stopping at the
/// end of the clip. Ties go to the earlier frame.
pub fn sample_frames_at(
    clip: &VideoClip,
    interval_s: f64,
    target_len: usize,
    offset: f64,
) -> Result<SampledFrames> {
    let t0 = clip.frames[0].t;
    let t_end = clip.frames.last().expect("non-empty clip").t;
    let mut positions: Vec<usize> = Vec::with_capacity(target_len);
    for k in 0..target_len {
        let t = t0 + offset + k as f64 * interval_s;
        if t > t_end + 1e-9 {
            break;
        }
        let pos = nearest_frame(&clip.frames, t);
        if positions.last() != Some(&pos) {
            positions.push(pos);
        }
    }
    if positions.len() < 2 {
        return Err(Error::ClipRejected {
            video_id: clip.video_id.clone(),
            reason: "fewer than 2 distinct frames at the sampling interval".to_string(),
        });
    }
    let truncated = positions.len() < target_len;
    if truncated {
        log::warn!(
            "clip {}: {} frames sampled, {} requested",
            clip.video_id,
            positions.len(),
            target_len
        );
    }
    Ok(SampledFrames {
        positions,
        target_len,
        truncated,
    })
}

fn nearest_frame(frames: &[FrameEntry], t: f64) -> usize {
    let after = frames.partition_point(|f| f.t < t);
    if after == 0 {
        return 0;
    }
    if after == frames.len() {
        return frames.len() - 1;
    }
    if t - frames[after - 1].t <= frames[after].t - t {
        after - 1
    } else {
        after
    }
}

/// A run of identical primitive actions between sampled frames
/// `start_frame` and `end_frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub action: TurnLabel,
    pub start_frame: usize,
    pub end_frame: usize,
    pub length: usize,
}

/// Merges runs of identical actions. FORWARD runs are split greedily into
/// chunks of at most [`MAX_FORWARD_RUN`]; LEFT and RIGHT runs become one
/// segment each.
pub fn merge_actions(primitive: &[TurnLabel]) -> Result<Vec<ActionSegment>> {
    if primitive.contains(&TurnLabel::Stop) {
        return Err(Error::invalid("STOP cannot appear among primitive actions"));
    }
    let mut segments = Vec::new();
    let mut i = 0;
    while i < primitive.len() {
        let action = primitive[i];
        let run = primitive[i..].iter().take_while(|&&a| a == action).count();
        let cap = if action == TurnLabel::Forward { MAX_FORWARD_RUN } else { run };
        let mut start = i;
        while start < i + run {
            let length = cap.min(i + run - start);
            segments.push(ActionSegment {
                action,
                start_frame: start,
                end_frame: start + length,
                length,
            });
            start += length;
        }
        i += run;
    }
    Ok(segments)
}

/// Expands segments back into primitive actions.
pub fn expand_segments(segments: &[ActionSegment]) -> Vec<TurnLabel> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.action, s.length))
        .collect()
}

pub fn category_for(action: TurnLabel) -> Category {
    match action {
        TurnLabel::Forward => Category::Forward,
        TurnLabel::Left => Category::TurnLeft,
        TurnLabel::Right => Category::TurnRight,
        TurnLabel::Stop => Category::Stop,
    }
}

/// Where one instruction sentence came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceProvenance {
    /// Index into the segments; the closing STOP sentence uses `segments.len()`.
    pub segment_index: usize,
    pub action: TurnLabel,
    pub template_id: String,
    /// Detector class filled into the slot.
    pub object: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub sentences: Vec<String>,
    pub provenance: Vec<SentenceProvenance>,
}

/// Generates one sentence per segment plus a closing STOP sentence.
///
/// `frames` are the sampled frames; a segment's object is drawn from the
/// detections of its first frame and the STOP sentence's from the last
/// frame. `detections` should already be class-filtered.
pub fn generate_instruction(
    video_id: &str,
    segments: &[ActionSegment],
    frames: &[FrameEntry],
    bank: &TemplateBank,
    detections: &DetectionStore,
    rng: &mut impl Rng,
) -> Result<Instruction> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to ground the instruction in"));
    }
    let mut sampler = TemplateSampler::new(bank);
    let mut recent: VecDeque<Option<String>> = VecDeque::with_capacity(2);
    let mut sentences = Vec::with_capacity(segments.len() + 1);
    let mut provenance = Vec::with_capacity(segments.len() + 1);

    let stops = std::iter::once((segments.len(), TurnLabel::Stop, frames.len() - 1));
    let steps = segments
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.action, s.start_frame))
        .chain(stops);
    for (segment_index, action, frame_pos) in steps {
        let frame = frames.get(frame_pos).ok_or_else(|| {
            Error::invalid(format!("segment {segment_index} starts past the last frame"))
        })?;
        let fd = detections.get(&FrameRef::new(video_id, frame.index));
        let cooldown: Vec<String> = recent.iter().flatten().cloned().collect();
        let category = category_for(action);

        let mut chosen = None;
        for _ in 0..MAX_RESAMPLE {
            let st = sampler.sample(category, rng)?;
            if !st.template.has_slot() {
                chosen = Some((&st.template, None));
                break;
            }
            if let Some(class) = select_object(&fd, &cooldown, rng) {
                chosen = Some((&st.template, Some(class)));
                break;
            }
        }
        let (template, object) = match chosen {
            Some(c) => c,
            None => match sampler.sample_slotless(category, rng) {
                Some(st) => (&st.template, None),
                None => {
                    return Err(Error::GenerationFailed(format!(
                        "{video_id}: no object on frame {} and no slotless {category} template",
                        frame.index
                    )))
                }
            },
        };
        let surface = object.as_deref().map(display_name);
        sentences.push(fill_template(template, surface.as_deref())?);
        if recent.len() == 2 {
            recent.pop_front();
        }
        recent.push_back(object.clone());
        provenance.push(SentenceProvenance {
            segment_index,
            action,
            template_id: template.id.clone(),
            object,
        });
    }
    Ok(Instruction {
        text: sentences.join(" "),
        sentences,
        provenance,
    })
}

/// One synthetic VLN training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlnSample {
    pub sample_id: String,
    pub video_id: String,
    pub frames: Vec<FrameEntry>,
    /// One label per consecutive frame pair (no closing STOP).
    pub actions: Vec<TurnLabel>,
    pub segments: Vec<ActionSegment>,
    pub instruction: String,
    pub provenance: Vec<SentenceProvenance>,
}

impl VlnSample {
    /// Checks the structural invariants tying frames, actions, segments and
    /// sentences together.
    pub fn check_consistency(&self) -> Result<()> {
        if self.actions.len() + 1 != self.frames.len() {
            return Err(Error::invalid(format!(
                "{}: {} actions for {} frames",
                self.sample_id,
                self.actions.len(),
                self.frames.len()
            )));
        }
        if expand_segments(&self.segments) != self.actions {
            return Err(Error::invalid(format!("{}: segments do not partition the actions", self.sample_id)));
        }
        if self.provenance.len() != self.segments.len() + 1 {
            return Err(Error::invalid(format!(
                "{}: {} sentences for {} segments",
                self.sample_id,
                self.provenance.len(),
                self.segments.len()
            )));
        }
        Ok(())
    }
}

/// Decodes frame files; swapped out in tests.
pub trait FrameLoader: Sync {
    fn load(&self, path: &Path) -> Result<FrameImage>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ImageFileLoader;

impl FrameLoader for ImageFileLoader {
    fn load(&self, path: &Path) -> Result<FrameImage> {
        FrameImage::load(path)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sampling: SamplingConfig,
    pub rotation: RotationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipFailure {
    pub video_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub clips_in: usize,
    pub samples_out: usize,
    pub rejected: usize,
    /// Samples built from fewer frames than their drawn target length.
    pub truncated: usize,
    pub primitive_actions: BTreeMap<TurnLabel, usize>,
    pub segment_actions: BTreeMap<TurnLabel, usize>,
    pub failures: Vec<ClipFailure>,
}

impl Default for RunReport {
    fn default() -> Self {
        let zeros: BTreeMap<TurnLabel, usize> = TurnLabel::MOVES.iter().map(|&l| (l, 0)).collect();
        Self {
            clips_in: 0,
            samples_out: 0,
            rejected: 0,
            truncated: 0,
            primitive_actions: zeros.clone(),
            segment_actions: zeros,
            failures: Vec::new(),
        }
    }
}

fn fail(video_id: &str, stage: &str, err: Error) -> ClipFailure {
    ClipFailure {
        video_id: video_id.to_string(),
        stage: stage.to_string(),
        reason: err.to_string(),
    }
}

/// Runs one clip end to end with its own random stream.
pub fn process_clip(
    clip: &VideoClip,
    bank: &TemplateBank,
    detections: &DetectionStore,
    cfg: &PipelineConfig,
    seed: u64,
    loader: &dyn FrameLoader,
) -> std::result::Result<(VlnSample, bool), ClipFailure> {
    let id = clip.video_id.as_str();
    let mut rng: UnitRng = unit_rng(seed, id);
    let sampled = sample_frames(clip, &cfg.sampling, &mut rng).map_err(|e| fail(id, "sample_frames", e))?;
    let frames: Vec<FrameEntry> = sampled
        .positions
        .iter()
        .map(|&p| clip.frames[p].clone())
        .collect();
    let images = frames
        .iter()
        .map(|f| loader.load(&clip.resolve(f)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| fail(id, "load_frames", e))?;
    let actions = predict_sequence(&images, &cfg.rotation).map_err(|e| fail(id, "predict_actions", e))?;
    let segments = merge_actions(&actions).map_err(|e| fail(id, "merge_actions", e))?;
    let instruction = generate_instruction(id, &segments, &frames, bank, detections, &mut rng)
        .map_err(|e| fail(id, "generate_instruction", e))?;
    let sample = VlnSample {
        sample_id: format!("{id}#0"),
        video_id: id.to_string(),
        frames,
        actions,
        segments,
        instruction: instruction.text,
        provenance: instruction.provenance,
    };
    Ok((sample, sampled.truncated))
}

/// Processes every clip (in parallel on the current rayon pool) and returns
/// samples ordered by video id plus the run report. Clip failures are
/// recorded, never fatal.
pub fn run_pipeline(
    clips: &[VideoClip],
    bank: &TemplateBank,
    detections: &DetectionStore,
    cfg: &PipelineConfig,
    seed: u64,
    loader: &dyn FrameLoader,
) -> (Vec<VlnSample>, RunReport) {
    let mut results: Vec<_> = clips
        .par_iter()
        .map(|clip| (clip.video_id.clone(), process_clip(clip, bank, detections, cfg, seed, loader)))
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut report = RunReport {
        clips_in: clips.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for (_, result) in results {
        match result {
            Ok((sample, truncated)) => {
                for a in &sample.actions {
                    *report.primitive_actions.entry(*a).or_default() += 1;
                }
                for s in &sample.segments {
                    *report.segment_actions.entry(s.action).or_default() += 1;
                }
                report.truncated += usize::from(truncated);
                samples.push(sample);
            }
            Err(failure) => {
                log::warn!("clip {} failed at {}: {}", failure.video_id, failure.stage, failure.reason);
                report.failures.push(failure);
            }
        }
    }
    report.samples_out = samples.len();
    report.rejected = report.failures.len();
    (samples, report)
}
