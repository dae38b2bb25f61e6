//! Navigation-action prediction from two consecutive frames by image rotation
//! similarity.
//!
//! The later frame is shifted horizontally to mimic the camera turning left
//! or right and each candidate (rotated left, unchanged, rotated right) is
//! compared with the earlier frame using mean squared error inside a window
//! of `D` pixels. The band of `R` pixels uncovered by the shift is never
//! compared. The rotated-left candidate is read at its rightmost window, the
//! unchanged candidate at its middle window and the rotated-right candidate at
//! its leftmost window; the lowest error wins.
//!
//! Sign convention: when the camera yaws left, scene content moves to the
//! right in the next frame. Rotating that frame *left* (content moves left)
//! undoes the turn, so a rotated-left candidate that best matches the
//! previous frame means the vehicle turned LEFT. [`crate::synthetic`] builds
//! panning sequences with known turns that pin this down.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Navigation action label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TurnLabel {
    Forward,
    Left,
    Right,
    /// Only produced by downstream stages; never predicted from frames.
    Stop,
}

impl TurnLabel {
    pub const MOVES: [TurnLabel; 3] = [TurnLabel::Forward, TurnLabel::Left, TurnLabel::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            TurnLabel::Forward => "FORWARD",
            TurnLabel::Left => "LEFT",
            TurnLabel::Right => "RIGHT",
            TurnLabel::Stop => "STOP",
        }
    }

    /// LEFT and RIGHT swapped, everything else fixed.
    pub fn mirrored(self) -> Self {
        match self {
            TurnLabel::Left => TurnLabel::Right,
            TurnLabel::Right => TurnLabel::Left,
            other => other,
        }
    }
}

impl std::fmt::Display for TurnLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major `H x W x C` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "frame must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "frame must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "expected {} intensities for a {width}x{height}x{channels} frame, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a frame from `f(x, y, c)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn same_shape(&self, other: &FrameImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Self {
        let w = self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..w {
                let base = (y * w + (w - 1 - x)) * self.channels;
                data.extend_from_slice(&self.data[base..base + self.channels]);
            }
        }
        Self { data, ..*self }
    }

    /// Applies `f` to every intensity; the result must stay in `[0, 1]`.
    pub fn map_intensities(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Resizes to `target_width` columns, keeping the aspect ratio. Frames
    /// already at or below the target width are returned unchanged.
    pub fn downscaled(&self, target_width: usize) -> Result<Self> {
        if target_width == 0 {
            return Err(Error::invalid("downscale width must be positive"));
        }
        if target_width >= self.width {
            return Ok(self.clone());
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let nw = target_width as u32;
        let nh = ((self.height * target_width) as f64 / self.width as f64).round().max(1.0) as u32;
        let pixels: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        let resized: Vec<f32> = if self.channels == 3 {
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, pixels)
                .ok_or_else(|| Error::invalid("frame buffer size mismatch"))?;
            image::imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        } else {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, pixels)
                .ok_or_else(|| Error::invalid("frame buffer size mismatch"))?;
            image::imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        };
        Self::new(
            nw as usize,
            nh as usize,
            self.channels,
            resized.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
        )
    }

    /// Decodes a PNG or JPEG. Colour images keep three channels, grayscale
    /// images one.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let raw = img.to_rgb32f().into_raw();
            Self::new(w, h, 3, raw.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
        } else {
            let raw = img.to_luma32f().into_raw();
            Self::new(w, h, 1, raw.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
        }
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = if self.channels == 3 {
            DynamicImage::ImageRgb8(
                ImageBuffer::from_raw(w, h, bytes).ok_or_else(|| Error::invalid("bad buffer"))?,
            )
        } else {
            DynamicImage::ImageLuma8(
                ImageBuffer::from_raw(w, h, bytes).ok_or_else(|| Error::invalid("bad buffer"))?,
            )
        };
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Tunables for rotation-similarity prediction, in degrees of the frame's
/// horizontal field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationConfig {
    pub window_deg: f64,
    pub shift_deg: f64,
    /// Horizontal angular span of one frame (360 for panoramas).
    pub frame_fov_deg: f64,
    pub tie_epsilon: f64,
    /// Frames wider than this are resized before comparison.
    pub downscale_width: Option<usize>,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            window_deg: 80.0,
            shift_deg: 60.0,
            frame_fov_deg: 360.0,
            tie_epsilon: 1e-9,
            downscale_width: None,
        }
    }
}

/// Rotation parameters converted to pixels for a given frame width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGeometry {
    /// `R`: columns uncovered by the rotation.
    pub shift_px: usize,
    /// `D`: window width.
    pub window_px: usize,
    /// `floor((W - R) / D)`.
    pub windows: usize,
}

impl RotationConfig {
    pub fn validate(&self) -> Result<()> {
        let fov = self.frame_fov_deg;
        if !(fov.is_finite() && fov > 0.0 && fov <= 360.0) {
            return Err(Error::invalid(format!("frame_fov_deg must be in (0, 360], got {fov}")));
        }
        if !(self.shift_deg > 0.0 && self.shift_deg < fov) {
            return Err(Error::invalid(format!(
                "shift_deg must be in (0, {fov}), got {}",
                self.shift_deg
            )));
        }
        if !(self.window_deg > 0.0 && self.window_deg < fov) {
            return Err(Error::invalid(format!(
                "window_deg must be in (0, {fov}), got {}",
                self.window_deg
            )));
        }
        if !(self.tie_epsilon.is_finite() && self.tie_epsilon >= 0.0) {
            return Err(Error::invalid("tie_epsilon must be finite and non-negative"));
        }
        if self.downscale_width == Some(0) {
            return Err(Error::invalid("downscale_width must be positive"));
        }
        Ok(())
    }

    pub fn geometry(&self, width: usize) -> Result<PixelGeometry> {
        self.validate()?;
        let shift_px = (self.shift_deg / self.frame_fov_deg * width as f64).round() as usize;
        let window_px = (self.window_deg / self.frame_fov_deg * width as f64).round() as usize;
        if window_px < 1 || shift_px > width || window_px > width - shift_px {
            return Err(Error::DegenerateGeometry(format!(
                "width {width}: shift {shift_px}px and window {window_px}px leave no full window"
            )));
        }
        Ok(PixelGeometry {
            shift_px,
            window_px,
            windows: (width - shift_px) / window_px,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RotateDirection {
    /// Content moves toward column 0; the rightmost `shift` columns become invalid.
    Left,
    /// Content moves toward the last column; the leftmost `shift` columns become invalid.
    Right,
}

/// Half-open column range `[start, end)` that may be compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidRegion {
    pub start: usize,
    pub end: usize,
}

impl ValidRegion {
    pub fn full(width: usize) -> Self {
        Self { start: 0, end: width }
    }

    pub fn width(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

/// Translates columns by `shift_px` without wraparound. Uncovered columns are
/// zero-filled and excluded from the returned valid region.
pub fn rotate_frame(
    frame: &FrameImage,
    direction: RotateDirection,
    shift_px: usize,
) -> Result<(FrameImage, ValidRegion)> {
    let (w, c) = (frame.width, frame.channels);
    if shift_px >= w {
        return Err(Error::invalid(format!(
            "shift of {shift_px}px must be smaller than the frame width {w}"
        )));
    }
    let mut data = vec![0.0; frame.data.len()];
    let keep = (w - shift_px) * c;
    for y in 0..frame.height {
        let row = y * w * c;
        match direction {
            RotateDirection::Left => data[row..row + keep]
                .copy_from_slice(&frame.data[row + shift_px * c..row + w * c]),
            RotateDirection::Right => data[row + shift_px * c..row + w * c]
                .copy_from_slice(&frame.data[row..row + keep]),
        }
    }
    let region = match direction {
        RotateDirection::Left => ValidRegion {
            start: 0,
            end: w - shift_px,
        },
        RotateDirection::Right => ValidRegion {
            start: shift_px,
            end: w,
        },
    };
    Ok((FrameImage { data, ..*frame }, region))
}

/// Per-window MSE scores for a region, with the default window width taken
/// from `cfg` and the frame width.
pub fn windowed_mse(
    reference: &FrameImage,
    candidate: &FrameImage,
    region: ValidRegion,
    cfg: &RotationConfig,
) -> Result<Vec<f64>> {
    let geometry = cfg.geometry(reference.width)?;
    window_scores(reference, candidate, region, geometry.window_px)
}

/// Slides a `window_px`-wide window from `region.start` with stride
/// `window_px` and returns the mean squared per-pixel, per-channel
/// difference inside each full window.
pub fn window_scores(
    reference: &FrameImage,
    candidate: &FrameImage,
    region: ValidRegion,
    window_px: usize,
) -> Result<Vec<f64>> {
    if !reference.same_shape(candidate) {
        return Err(Error::invalid(format!(
            "frame shapes differ: {}x{}x{} vs {}x{}x{}",
            reference.width,
            reference.height,
            reference.channels,
            candidate.width,
            candidate.height,
            candidate.channels
        )));
    }
    if region.start > region.end || region.end > reference.width {
        return Err(Error::invalid(format!(
            "region [{}, {}) outside a frame of width {}",
            region.start, region.end, reference.width
        )));
    }
    if window_px == 0 || region.width() < window_px {
        return Err(Error::DegenerateGeometry(format!(
            "no {window_px}px window fits in a {}px region",
            region.width()
        )));
    }
    let (w, c) = (reference.width, reference.channels);
    let n = region.width() / window_px;
    let norm = (reference.height * window_px * c) as f64;
    let scores = (0..n)
        .map(|k| {
            let lo = (region.start + k * window_px) * c;
            let hi = lo + window_px * c;
            let mut sum = 0.0;
            for y in 0..reference.height {
                let row = y * w * c;
                let a = &reference.data[row + lo..row + hi];
                let b = &candidate.data[row + lo..row + hi];
                sum += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
            sum / norm
        })
        .collect();
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Candidate {
    LeftRotated,
    Unchanged,
    RightRotated,
}

impl Candidate {
    pub fn label(self) -> TurnLabel {
        match self {
            Candidate::LeftRotated => TurnLabel::Left,
            Candidate::Unchanged => TurnLabel::Forward,
            Candidate::RightRotated => TurnLabel::Right,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScores {
    pub candidate: Candidate,
    pub scores: Vec<f64>,
    /// Index of the window that votes for this candidate.
    pub selected: usize,
}

impl WindowScores {
    pub fn selected_score(&self) -> f64 {
        self.scores[self.selected]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: TurnLabel,
    /// Ordered LEFT_ROTATED, UNCHANGED, RIGHT_ROTATED.
    pub candidates: [WindowScores; 3],
}

/// One exported diagnostic line per candidate and frame pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    pub frame_index: usize,
    pub candidate: Candidate,
    pub window_scores: Vec<f64>,
    pub label: TurnLabel,
}

impl Prediction {
    pub fn diagnostics(&self, video_id: Option<&str>, frame_index: usize) -> Vec<DiagnosticRecord> {
        self.candidates
            .iter()
            .map(|ws| DiagnosticRecord {
                video_id: video_id.map(str::to_string),
                frame_index,
                candidate: ws.candidate,
                window_scores: ws.scores.clone(),
                label: self.label,
            })
            .collect()
    }
}

/// Lowest selected score wins; within `eps` of the minimum, FORWARD beats
/// LEFT beats RIGHT.
fn choose_label(left: f64, unchanged: f64, right: f64, eps: f64) -> TurnLabel {
    let best = left.min(unchanged).min(right);
    if unchanged - best <= eps {
        TurnLabel::Forward
    } else if left - best <= eps {
        TurnLabel::Left
    } else {
        TurnLabel::Right
    }
}

pub fn predict_action(
    frame_t: &FrameImage,
    frame_t1: &FrameImage,
    cfg: &RotationConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    if !frame_t.same_shape(frame_t1) {
        return Err(Error::invalid("consecutive frames must share dimensions"));
    }
    match cfg.downscale_width {
        Some(target) if target < frame_t.width => {
            let a = frame_t.downscaled(target)?;
            let b = frame_t1.downscaled(target)?;
            compare_candidates(&a, &b, cfg)
        }
        _ => compare_candidates(frame_t, frame_t1, cfg),
    }
}

fn compare_candidates(
    reference: &FrameImage,
    next: &FrameImage,
    cfg: &RotationConfig,
) -> Result<Prediction> {
    let width = reference.width;
    let g = cfg.geometry(width)?;
    if g.windows < 3 {
        log::warn!(
            "only {} comparison window(s) at width {width}; leftmost/middle/rightmost overlap",
            g.windows
        );
    }
    // Every candidate is scored on an n*D band so the three read-outs are
    // mirror images of each other: rotated-left flush against its invalid
    // band on the right, rotated-right flush against its invalid band on the
    // left, unchanged centred.
    let band = g.windows * g.window_px;

    let (left_frame, left_valid) = rotate_frame(next, RotateDirection::Left, g.shift_px)?;
    let left_band = ValidRegion {
        start: left_valid.end - band,
        end: left_valid.end,
    };
    let left = WindowScores {
        candidate: Candidate::LeftRotated,
        scores: window_scores(reference, &left_frame, left_band, g.window_px)?,
        selected: g.windows - 1,
    };

    let start = (width - band) / 2;
    let unchanged = WindowScores {
        candidate: Candidate::Unchanged,
        scores: window_scores(
            reference,
            next,
            ValidRegion {
                start,
                end: start + band,
            },
            g.window_px,
        )?,
        selected: g.windows / 2,
    };

    let (right_frame, right_valid) = rotate_frame(next, RotateDirection::Right, g.shift_px)?;
    let right_band = ValidRegion {
        start: right_valid.start,
        end: right_valid.start + band,
    };
    let right = WindowScores {
        candidate: Candidate::RightRotated,
        scores: window_scores(reference, &right_frame, right_band, g.window_px)?,
        selected: 0,
    };

    let label = choose_label(
        left.selected_score(),
        unchanged.selected_score(),
        right.selected_score(),
        cfg.tie_epsilon,
    );
    Ok(Prediction {
        label,
        candidates: [left, unchanged, right],
    })
}

/// Labels every consecutive pair; element `i` compares frames `i` and `i + 1`.
pub fn predict_sequence(frames: &[FrameImage], cfg: &RotationConfig) -> Result<Vec<TurnLabel>> {
    Ok(predict_sequence_detailed(frames, cfg)?
        .into_iter()
        .map(|p| p.label)
        .collect())
}

pub fn predict_sequence_detailed(
    frames: &[FrameImage],
    cfg: &RotationConfig,
) -> Result<Vec<Prediction>> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 frames to predict actions, got {}",
            frames.len()
        )));
    }
    if frames.windows(2).any(|p| !p[0].same_shape(&p[1])) {
        return Err(Error::invalid("all frames in a sequence must share dimensions"));
    }
    frames
        .windows(2)
        .map(|pair| predict_action(&pair[0], &pair[1], cfg))
        .collect()
}
