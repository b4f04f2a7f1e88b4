//! Synthetic RGB + event sequences from a scene of textured rectangles.
//!
//! Luminance is rendered at `substeps` instants per RGB frame. An event fires
//! at a pixel whenever the log-luminance of two consecutive renders differs
//! by more than the contrast threshold, with polarity equal to the sign of
//! the change and a timestamp midway between the two renders.

use std::f64::consts::TAU;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EventError, EventPoint, EventStream, Image, Polarity, RgbFrame};
use crate::geom::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    /// Peak deviation of the static sinusoidal texture, in intensity units.
    pub texture_amplitude: f64,
    /// Texture wavelength in pixels.
    pub texture_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    /// Alternating squares of `cell` pixels; odd squares are darkened by `contrast`.
    Checker { cell: f64, contrast: f64 },
    /// Vertical bands of `period` pixels; odd bands are darkened by `contrast`.
    Stripes { period: f64, contrast: f64 },
}

/// Top-left position over time, in frame units, reflected at canvas borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Vertical sinusoidal wobble amplitude (pixels) and period (frames).
    pub wobble: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub w: f64,
    pub h: f64,
    pub color: [f64; 3],
    pub pattern: Pattern,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Number of RGB frames.
    pub frames: usize,
    pub frame_interval_us: u64,
    /// Luminance renders per frame interval used for event generation.
    pub substeps: usize,
    pub contrast_threshold: f64,
    /// Relative global brightness change per frame.
    pub illumination_drift: f64,
    pub background: Background,
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
    /// Index of the tracked object in `objects`.
    pub target: usize,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), EventError> {
        let fail = |m: String| Err(EventError::Config(m));
        if self.frames == 0 || self.frame_interval_us == 0 {
            return fail("sequence has zero duration".into());
        }
        if self.width == 0 || self.height == 0 {
            return fail("canvas has zero size".into());
        }
        if self.substeps == 0 || self.frame_interval_us < 2 * self.substeps as u64 {
            return fail(format!(
                "{} substeps do not fit a {} us frame interval",
                self.substeps, self.frame_interval_us
            ));
        }
        if !(self.contrast_threshold > 0.0) {
            return fail(format!("contrast threshold {} must be positive", self.contrast_threshold));
        }
        if self.target >= self.objects.len() {
            return fail(format!("target index {} but {} objects", self.target, self.objects.len()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.w > 0.0 && o.h > 0.0) {
                return fail(format!("object {i} has non-positive size"));
            }
            if o.w > self.width as f64 || o.h > self.height as f64 {
                return fail(format!(
                    "object {i} ({}x{}) larger than {}x{} canvas",
                    o.w, o.h, self.width, self.height
                ));
            }
        }
        Ok(())
    }

    /// A random scene: one patterned target plus up to two distractors, all
    /// moving on bouncing trajectories.
    pub fn random(seed: u64, width: usize, height: usize, frames: usize) -> SceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4e);
        let object = |rng: &mut ChaCha8Rng, big: bool| {
            let (lo, hi) = if big { (14.0, 24.0) } else { (8.0, 18.0) };
            let w: f64 = rng.random_range(lo..hi);
            let h: f64 = rng.random_range(lo..hi);
            let color = [
                rng.random_range(40.0..255.0),
                rng.random_range(40.0..255.0),
                rng.random_range(40.0..255.0),
            ];
            let pattern = match rng.random_range(0..3) {
                0 => Pattern::Solid,
                1 => Pattern::Checker {
                    cell: rng.random_range(3.0..6.0),
                    contrast: rng.random_range(0.3..0.7),
                },
                _ => Pattern::Stripes {
                    period: rng.random_range(3.0..7.0),
                    contrast: rng.random_range(0.3..0.7),
                },
            };
            let speed: f64 = rng.random_range(0.6..2.2);
            let heading: f64 = rng.random_range(0.0..TAU);
            ObjectSpec {
                w,
                h,
                color,
                pattern,
                trajectory: Trajectory {
                    start: (
                        rng.random_range(0.0..width as f64 - w),
                        rng.random_range(0.0..height as f64 - h),
                    ),
                    velocity: (speed * heading.cos(), speed * heading.sin()),
                    wobble: (rng.random_range(0.0..3.0), rng.random_range(8.0..20.0)),
                },
            }
        };
        let distractors = rng.random_range(1..=2);
        let mut objects: Vec<ObjectSpec> = (0..distractors).map(|_| object(&mut rng, false)).collect();
        objects.push(object(&mut rng, true));
        let gray = rng.random_range(30.0..90.0);
        SceneConfig {
            width,
            height,
            frames,
            frame_interval_us: 40_000,
            substeps: 8,
            contrast_threshold: 0.15,
            illumination_drift: 0.0,
            background: Background {
                base: [gray, gray * rng.random_range(0.8..1.2), gray * rng.random_range(0.8..1.2)],
                texture_amplitude: rng.random_range(5.0..25.0),
                texture_scale: rng.random_range(12.0..40.0),
            },
            target: objects.len() - 1,
            objects,
        }
    }

    /// Object box at time `tau`, measured in frames.
    pub fn object_box(&self, index: usize, tau: f64) -> BBox {
        let o = &self.objects[index];
        let tr = &o.trajectory;
        let raw_x = tr.start.0 + tr.velocity.0 * tau;
        let raw_y = tr.start.1 + tr.velocity.1 * tau + tr.wobble.0 * (TAU * tau / tr.wobble.1.max(1e-9)).sin();
        BBox::new(
            reflect(raw_x, self.width as f64 - o.w),
            reflect(raw_y, self.height as f64 - o.h),
            o.w,
            o.h,
        )
    }

    fn subframe_time(&self, s: usize) -> u64 {
        s as u64 * self.frame_interval_us / self.substeps as u64
    }
}

/// Folds `v` into `[0, span]` as a bouncing coordinate.
fn reflect(v: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = v.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

struct Texture {
    phases: [f64; 4],
    angles: [f64; 2],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            phases: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
            angles: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
        }
    }

    fn render(&self, scene: &SceneConfig) -> Vec<f64> {
        let bg = &scene.background;
        let k = TAU / bg.texture_scale.max(1.0);
        let mut out = Vec::with_capacity(scene.width * scene.height * 3);
        for y in 0..scene.height {
            for x in 0..scene.width {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let u = xf * self.angles[0].cos() + yf * self.angles[0].sin();
                let v = xf * self.angles[1].cos() + yf * self.angles[1].sin();
                let t = 0.5 * ((k * u + self.phases[0]).sin() + (0.7 * k * v + self.phases[1]).sin());
                let c = 0.5 * (1.3 * k * xf + self.phases[2]).cos() * (0.9 * k * yf + self.phases[3]).sin();
                for ch in 0..3 {
                    let tint = if ch == 1 { c } else { t };
                    out.push((bg.base[ch] + bg.texture_amplitude * tint).clamp(0.0, 255.0));
                }
            }
        }
        out
    }
}

fn pattern_gain(pattern: &Pattern, u: f64, v: f64) -> f64 {
    match *pattern {
        Pattern::Solid => 1.0,
        Pattern::Checker { cell, contrast } => {
            let parity = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
            if parity == 1 {
                1.0 - contrast
            } else {
                1.0
            }
        }
        Pattern::Stripes { period, contrast } => {
            if ((u / period).floor() as i64).rem_euclid(2) == 1 {
                1.0 - contrast
            } else {
                1.0
            }
        }
    }
}

fn render_with(scene: &SceneConfig, background: &[f64], tau: f64) -> RgbFrame {
    let mut data = background.to_vec();
    let w = scene.width;
    for (i, o) in scene.objects.iter().enumerate() {
        let b = scene.object_box(i, tau);
        let x_lo = b.x.floor().max(0.0) as usize;
        let y_lo = b.y.floor().max(0.0) as usize;
        let x_hi = (b.right().ceil() as usize).min(scene.width);
        let y_hi = (b.bottom().ceil() as usize).min(scene.height);
        for y in y_lo..y_hi {
            let cy = (b.bottom().min(y as f64 + 1.0) - b.y.max(y as f64)).max(0.0);
            for x in x_lo..x_hi {
                let cx = (b.right().min(x as f64 + 1.0) - b.x.max(x as f64)).max(0.0);
                let alpha = cx * cy;
                if alpha <= 0.0 {
                    continue;
                }
                let gain = pattern_gain(&o.pattern, x as f64 + 0.5 - b.x, y as f64 + 0.5 - b.y);
                let px = &mut data[(y * w + x) * 3..(y * w + x) * 3 + 3];
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = (1.0 - alpha) * *v + alpha * o.color[ch] * gain;
                }
            }
        }
    }
    let illum = (1.0 + scene.illumination_drift * tau).max(0.0);
    if illum != 1.0 {
        data.iter_mut().for_each(|v| *v = (*v * illum).clamp(0.0, 255.0));
    }
    Image::new(scene.width, scene.height, 3, data)
}

/// Unquantized render at sub-frame index `s` (time `s / substeps` frames).
pub fn render_subframe(scene: &SceneConfig, seed: u64, s: usize) -> RgbFrame {
    let bg = Texture::new(seed).render(scene);
    render_with(scene, &bg, s as f64 / scene.substeps as f64)
}

/// Per-pixel `ln(1 + Y)` with Rec. 601 luma `Y`.
pub fn render_luminance(frame: &RgbFrame) -> Vec<f64> {
    frame
        .data()
        .chunks_exact(3)
        .map(|p| (1.0 + 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).ln())
        .collect()
}

/// Renders `scene`: byte-quantized RGB frames, the triggered event stream,
/// and the target's box at every frame.
pub fn synthesize_sequence(
    scene: &SceneConfig,
    seed: u64,
) -> Result<(Vec<RgbFrame>, EventStream, Vec<BBox>), EventError> {
    scene.validate()?;
    let bg = Texture::new(seed).render(scene);
    let last = (scene.frames - 1) * scene.substeps;
    let mut frames = Vec::with_capacity(scene.frames);
    let mut events = Vec::new();
    let mut prev_lum: Option<Vec<f64>> = None;
    for s in 0..=last {
        let tau = s as f64 / scene.substeps as f64;
        let img = render_with(scene, &bg, tau);
        let lum = render_luminance(&img);
        if let Some(prev) = &prev_lum {
            let t = (scene.subframe_time(s - 1) + scene.subframe_time(s)) / 2;
            for (i, (a, b)) in prev.iter().zip(&lum).enumerate() {
                let d = b - a;
                if d.abs() > scene.contrast_threshold {
                    let p = if d > 0.0 { Polarity::Positive } else { Polarity::Negative };
                    events.push(EventPoint::new(
                        t,
                        (i % scene.width) as u32,
                        (i / scene.width) as u32,
                        p,
                    ));
                }
            }
        }
        prev_lum = Some(lum);
        if s % scene.substeps == 0 {
            let q = img.to_u8().into_iter().map(f64::from).collect();
            frames.push(Image::new(scene.width, scene.height, 3, q));
        }
    }
    let boxes = (0..scene.frames)
        .map(|k| scene.object_box(scene.target, k as f64))
        .collect();
    let stream = EventStream::new(
        scene.width as u32,
        scene.height as u32,
        0,
        scene.subframe_time(last),
        events,
    )?;
    Ok((frames, stream, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn square_scene(velocity: f64) -> SceneConfig {
        SceneConfig {
            width: 48,
            height: 32,
            frames: 4,
            frame_interval_us: 40_000,
            substeps: 4,
            contrast_threshold: 0.2,
            illumination_drift: 0.0,
            background: Background {
                base: [0.0; 3],
                texture_amplitude: 0.0,
                texture_scale: 10.0,
            },
            objects: vec![ObjectSpec {
                w: 10.0,
                h: 10.0,
                color: [255.0; 3],
                pattern: Pattern::Solid,
                trajectory: Trajectory {
                    start: (5.0, 11.0),
                    velocity: (velocity, 0.0),
                    wobble: (0.0, 10.0),
                },
            }],
            target: 0,
        }
    }

    #[test]
    fn static_scene_has_no_events() {
        let (frames, events, boxes) = synthesize_sequence(&square_scene(0.0), 1).unwrap();
        assert!(events.is_empty());
        assert_eq!(frames.len(), 4);
        assert!(boxes.iter().all(|b| *b == boxes[0]));
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = square_scene(1.0);
        s.frames = 0;
        assert!(matches!(synthesize_sequence(&s, 0), Err(EventError::Config(_))));
        let mut s = square_scene(1.0);
        s.objects[0].w = 100.0;
        assert!(matches!(synthesize_sequence(&s, 0), Err(EventError::Config(_))));
    }

    #[test]
    fn reflect_bounces() {
        assert_eq!(reflect(3.0, 10.0), 3.0);
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(-2.0, 10.0), 2.0);
    }

    #[test]
    fn random_scenes_are_valid() {
        for seed in 0..50 {
            SceneConfig::random(seed, 160, 120, 10).validate().unwrap();
        }
    }
}
