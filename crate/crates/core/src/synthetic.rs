//! Synthetic panning sequences with known camera turns.
//!
//! A [`Panorama`] is a horizontally wrapping 360° texture. [`PanSequence`]
//! renders views of it while the camera heading changes by known amounts, so
//! the true label of every frame pair is fixed by construction. A left turn
//! decreases the heading: the view window moves left over the panorama and
//! scene content appears shifted to the right in the next frame.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::action_predictor::{FrameImage, TurnLabel};
use crate::detection_store::DetectionRecord;
use crate::error::{Error, Result};
use crate::trajectory_builder::{FrameEntry, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    /// Vertical stripes of random width and colour with a per-stripe vertical gradient.
    Stripes,
    /// Two-octave value noise, smooth in both directions.
    Noise,
}

/// A 360° texture; column `x` covers heading `x * 360 / width` degrees.
#[derive(Clone, Debug)]
pub struct Panorama {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Panorama {
    pub fn generate(
        kind: TextureKind,
        width: usize,
        height: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let data = match kind {
            TextureKind::Stripes => stripes(width, height, channels, rng),
            TextureKind::Noise => {
                let coarse = value_noise(width, height, channels, (width / 24).max(2), rng);
                let fine = value_noise(width, height, channels, (width / 72).max(1), rng);
                coarse
                    .iter()
                    .zip(&fine)
                    .map(|(a, b)| (0.7 * a + 0.3 * b).clamp(0.0, 1.0))
                    .collect()
            }
        };
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Renders the `fov_deg` wide view centred on `heading_deg` at
    /// `frame_width` columns (nearest-column sampling).
    pub fn view(&self, heading_deg: f64, fov_deg: f64, frame_width: usize) -> Result<FrameImage> {
        let left_edge = heading_deg - fov_deg / 2.0;
        let cols: Vec<usize> = (0..frame_width)
            .map(|x| {
                let angle = left_edge + (x as f64 + 0.5) * fov_deg / frame_width as f64;
                let col = (angle / 360.0 * self.width as f64).floor() as i64;
                col.rem_euclid(self.width as i64) as usize
            })
            .collect();
        FrameImage::from_fn(frame_width, self.height, self.channels, |x, y, c| {
            self.get(cols[x], y, c)
        })
    }
}

fn stripes(width: usize, height: usize, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
    let min_w = (width / 72).max(1);
    let max_w = (width / 12).max(min_w + 1);
    // column -> (base colour, vertical slope)
    let mut column_style = Vec::with_capacity(width);
    while column_style.len() < width {
        let stripe_w = rng.gen_range(min_w..=max_w);
        let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.1..0.9)).collect();
        let slope = rng.gen_range(-0.2..0.2);
        for _ in 0..stripe_w {
            column_style.push((base.clone(), slope));
        }
    }
    column_style.truncate(width);
    let mut data = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        let v = if height > 1 {
            y as f64 / (height - 1) as f64 - 0.5
        } else {
            0.0
        };
        for (base, slope) in &column_style {
            for b in base {
                data.push((b + slope * v).clamp(0.0, 1.0));
            }
        }
    }
    data
}

fn value_noise(
    width: usize,
    height: usize,
    channels: usize,
    cell: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let gx = width.div_ceil(cell);
    let cell_y = (height / 4).max(1);
    let gy = height / cell_y + 2;
    let lattice: Vec<f64> = (0..gx * gy * channels).map(|_| rng.gen::<f64>()).collect();
    let at = |i: usize, j: usize, c: usize| lattice[((j * gx) + (i % gx)) * channels + c];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut data = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        let fy = y as f64 / cell_y as f64;
        let j = fy.floor() as usize;
        let ty = smooth(fy - j as f64);
        for x in 0..width {
            // wraps: the last cell interpolates back to lattice column 0
            let fx = x as f64 * gx as f64 / width as f64;
            let i = fx.floor() as usize;
            let tx = smooth(fx - i as f64);
            for c in 0..channels {
                let top = at(i, j, c) * (1.0 - tx) + at(i + 1, j, c) * tx;
                let bottom = at(i, j + 1, c) * (1.0 - tx) + at(i + 1, j + 1, c) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    data
}

/// Frames rendered along a heading schedule together with the true label of
/// each consecutive pair.
#[derive(Clone, Debug)]
pub struct PanSequence {
    pub frames: Vec<FrameImage>,
    pub labels: Vec<TurnLabel>,
    pub headings: Vec<f64>,
}

impl PanSequence {
    /// `steps[i] = (label, magnitude_deg)` moves the camera between frame `i`
    /// and `i + 1`. FORWARD keeps the heading. Independent Gaussian sensor
    /// noise with standard deviation `noise_sigma` is added to every frame.
    pub fn render(
        pano: &Panorama,
        fov_deg: f64,
        frame_width: usize,
        initial_heading_deg: f64,
        steps: &[(TurnLabel, f64)],
        noise_sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut headings = vec![initial_heading_deg];
        let mut heading = initial_heading_deg;
        for &(label, magnitude) in steps {
            heading += match label {
                TurnLabel::Left => -magnitude,
                TurnLabel::Right => magnitude,
                TurnLabel::Forward => 0.0,
                TurnLabel::Stop => return Err(Error::invalid("STOP is not a camera motion")),
            };
            headings.push(heading);
        }
        let frames = headings
            .iter()
            .map(|&h| {
                let frame = pano.view(h, fov_deg, frame_width)?;
                add_noise(frame, noise_sigma, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            labels: steps.iter().map(|s| s.0).collect(),
            headings,
        })
    }
}

fn add_noise(frame: FrameImage, sigma: f64, rng: &mut impl Rng) -> Result<FrameImage> {
    if sigma <= 0.0 {
        return Ok(frame);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let data = frame
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    FrameImage::new(frame.width(), frame.height(), frame.channels(), data)
}

/// Description of a fixture clip: a camera turning by `pan_deg` at each
/// listed time, rendered at `fps` for `duration_s` seconds.
#[derive(Clone, Debug)]
pub struct ClipFixture {
    pub video_id: String,
    pub fps: f64,
    pub duration_s: f64,
    pub turns: Vec<(f64, TurnLabel)>,
    pub pan_deg: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    pub kind: TextureKind,
}

impl ClipFixture {
    pub fn new(video_id: &str, duration_s: f64) -> Self {
        Self {
            video_id: video_id.to_string(),
            fps: 2.0,
            duration_s,
            turns: Vec::new(),
            pan_deg: 60.0,
            frame_width: 180,
            frame_height: 12,
            kind: TextureKind::Noise,
        }
    }

    pub fn with_turns(mut self, turns: &[(f64, TurnLabel)]) -> Self {
        self.turns = turns.to_vec();
        self
    }

    pub fn heading_at(&self, t: f64) -> f64 {
        self.turns
            .iter()
            .filter(|(at, _)| *at <= t)
            .map(|(_, label)| match label {
                TurnLabel::Left => -self.pan_deg,
                TurnLabel::Right => self.pan_deg,
                _ => 0.0,
            })
            .sum()
    }

    /// Renders PNG frames into `dir/<video_id>/` and returns the clip with
    /// paths relative to `dir`.
    pub fn write(&self, dir: &Path, rng: &mut impl Rng) -> Result<VideoClip> {
        let pano = Panorama::generate(self.kind, self.frame_width, self.frame_height, 3, rng);
        let clip_dir = dir.join(&self.video_id);
        std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
        let count = (self.duration_s * self.fps).floor() as usize + 1;
        let mut frames = Vec::with_capacity(count);
        for index in 0..count {
            let t = index as f64 / self.fps;
            let frame = pano.view(self.heading_at(t), 360.0, self.frame_width)?;
            let rel = format!("{}/{:05}.png", self.video_id, index);
            frame.save_png(&dir.join(&rel))?;
            frames.push(FrameEntry {
                index,
                path: rel.into(),
                t,
            });
        }
        Ok(VideoClip::new(self.video_id.clone(), frames)?.with_base_dir(dir))
    }
}

/// A few plausible detections per frame, including some blocked classes.
pub fn fixture_detections(clip: &VideoClip, rng: &mut impl Rng) -> Vec<DetectionRecord> {
    const CLASSES: [&str; 8] = [
        "traffic_light",
        "signboard",
        "awning",
        "telephone_pole",
        "car_(automobile)",
        "bench",
        "wheel",
        "fire_hydrant",
    ];
    let mut out = Vec::new();
    for frame in clip.frames() {
        let n = rng.gen_range(0..=3);
        for _ in 0..n {
            let class = CLASSES[rng.gen_range(0..CLASSES.len())];
            out.push(DetectionRecord {
                video_id: clip.video_id.clone(),
                frame_index: frame.index,
                class_name: class.to_string(),
                confidence: (rng.gen_range(30..100) as f64) / 100.0,
                bbox: [
                    rng.gen_range(0..100) as f64,
                    rng.gen_range(0..8) as f64,
                    rng.gen_range(1..40) as f64,
                    rng.gen_range(1..4) as f64,
                ],
            });
        }
    }
    out
}
