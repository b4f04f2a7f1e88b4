//! Event-camera data: streams, voxel sets, accumulated frames, synthetic
//! sequences, and their on-disk formats.

mod frame;
mod io;
mod synth;
mod voxel;

pub use frame::{accumulate_event_frame, EventFrame, Image, RgbFrame, DISPLAY_MIDPOINT};
pub use io::{
    load_events, load_sequence, read_ppm, save_events, save_sequence, save_voxels, write_ppm,
    Sequence,
};
pub use synth::{
    render_luminance, render_subframe, synthesize_sequence, Background, ObjectSpec, Pattern,
    SceneConfig, Trajectory,
};
pub use voxel::{count_invalid_voxels, voxelize, GridSpec, Voxel, VoxelSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid event stream: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventPoint {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl EventPoint {
    pub fn new(t: u64, x: u32, y: u32, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Half-open time interval `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Self {
        assert!(start <= end, "time window reversed: {start} > {end}");
        Self { start, end }
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.start && t < self.end
    }

    pub fn duration(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Time-ordered events from a `width x height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u32,
    height: u32,
    t_start: u64,
    t_end: u64,
    events: Vec<EventPoint>,
}

impl EventStream {
    pub fn new(
        width: u32,
        height: u32,
        t_start: u64,
        t_end: u64,
        events: Vec<EventPoint>,
    ) -> Result<Self, EventError> {
        if t_start > t_end {
            return Err(EventError::Invalid(format!(
                "t_start {t_start} after t_end {t_end}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventError::Invalid(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.t < t_start || e.t > t_end {
                return Err(EventError::Invalid(format!(
                    "event {i} at t={} outside [{t_start}, {t_end}]",
                    e.t
                )));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(EventError::Invalid(format!("event {i} out of time order")));
            }
        }
        Ok(Self {
            width,
            height,
            t_start,
            t_end,
            events,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with timestamps inside `window`, found by binary search.
    pub fn in_window(&self, window: TimeWindow) -> &[EventPoint] {
        let lo = self.events.partition_point(|e| e.t < window.start);
        let hi = self.events.partition_point(|e| e.t < window.end);
        &self.events[lo..hi.max(lo)]
    }

    /// Events of `window` falling inside `region` (frame pixels), mapped into
    /// an `out_w x out_h` patch whose extent is `region`.
    pub fn crop(
        &self,
        window: TimeWindow,
        region: &crate::geom::BBox,
        out_w: u32,
        out_h: u32,
    ) -> EventStream {
        let sx = out_w as f64 / region.w;
        let sy = out_h as f64 / region.h;
        let events = self
            .in_window(window)
            .iter()
            .filter_map(|e| {
                let px = ((e.x as f64 + 0.5 - region.x) * sx).floor();
                let py = ((e.y as f64 + 0.5 - region.y) * sy).floor();
                (px >= 0.0 && py >= 0.0 && px < out_w as f64 && py < out_h as f64)
                    .then(|| EventPoint::new(e.t, px as u32, py as u32, e.p))
            })
            .collect();
        EventStream {
            width: out_w,
            height: out_h,
            t_start: window.start,
            t_end: window.end.max(window.start),
            events,
        }
    }
}
