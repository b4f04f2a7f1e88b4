use super::{EventStream, TimeWindow};
use crate::diffmath::Tensor;

/// Display value that a zero polarity sum maps to.
pub const DISPLAY_MIDPOINT: f64 = 127.5;

/// Interleaved (row-major, channel-last) raster with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Three-channel image.
pub type RgbFrame = Image;

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size mismatch");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let data = (0..width * height).flat_map(|_| color.iter().copied()).collect();
        Self::new(width, height, color.len(), data)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.width * self.height).max(1) as f64;
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n)
            .collect()
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=255.0).contains(v))
    }

    pub fn clamp_range(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }

    /// Largest absolute per-element difference.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Channel-first `[C, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; w * h * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                out[ch * w * h + i] = *v;
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub fn from_chw(t: &Tensor) -> Image {
        let s = t.shape();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; w * h * c];
        for ch in 0..c {
            for i in 0..w * h {
                data[i * c + ch] = t.data()[ch * w * h + i];
            }
        }
        Image::new(w, h, c, data)
    }

    /// Values rounded to bytes.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Signed per-pixel polarity sums over a time window.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl EventFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Single-channel display image: `127.5 + 127.5 * clamp(sum / saturation, -1, 1)`.
    pub fn display(&self, saturation: f64) -> Image {
        let data = self
            .values
            .iter()
            .map(|v| DISPLAY_MIDPOINT + DISPLAY_MIDPOINT * (v / saturation).clamp(-1.0, 1.0))
            .collect();
        Image::new(self.width, self.height, 1, data)
    }
}

impl std::ops::Add for &EventFrame {
    type Output = EventFrame;

    fn add(self, rhs: &EventFrame) -> EventFrame {
        assert_eq!((self.width, self.height), (rhs.width, rhs.height));
        EventFrame {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        }
    }
}

pub fn accumulate_event_frame(stream: &EventStream, window: TimeWindow) -> EventFrame {
    let mut frame = EventFrame::zeros(stream.width() as usize, stream.height() as usize);
    for e in stream.in_window(window) {
        frame.values[e.y as usize * frame.width + e.x as usize] += e.p.sign() as f64;
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventcam::{EventPoint, Polarity};

    #[test]
    fn empty_window_gives_zero_frame() {
        let s = EventStream::new(8, 8, 0, 100, vec![EventPoint::new(5, 1, 1, Polarity::Positive)])
            .unwrap();
        let f = accumulate_event_frame(&s, TimeWindow::new(50, 100));
        assert!(f.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_event_gives_single_cell() {
        let s = EventStream::new(8, 8, 0, 100, vec![EventPoint::new(5, 3, 5, Polarity::Positive)])
            .unwrap();
        let f = accumulate_event_frame(&s, TimeWindow::new(0, 100));
        assert_eq!(f.at(3, 5), 1.0);
        assert_eq!(f.values().iter().filter(|v| **v != 0.0).count(), 1);
        let d = f.display(4.0);
        assert_eq!(d.at(3, 5, 0), DISPLAY_MIDPOINT + DISPLAY_MIDPOINT / 4.0);
        assert_eq!(d.at(0, 0, 0), DISPLAY_MIDPOINT);
    }

    #[test]
    fn chw_round_trip() {
        let img = Image::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = img.to_chw();
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(Image::from_chw(&t), img);
    }
}
