use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EventError, EventPoint, EventStream, Image, Polarity, RgbFrame, TimeWindow, VoxelSet};
use crate::geom::BBox;

const EVT_MAGIC: &str = "# evt v1";

/// Writes the text event format: a `# evt v1 W H t_start t_end` header, then
/// one `t x y p` line per event.
pub fn save_events(stream: &EventStream, path: &Path) -> Result<(), EventError> {
    let mut out = String::with_capacity(16 * stream.len() + 64);
    writeln!(
        out,
        "{EVT_MAGIC} {} {} {} {}",
        stream.width(),
        stream.height(),
        stream.t_start(),
        stream.t_end()
    )
    .unwrap();
    for e in stream.events() {
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.sign()).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_events(path: &Path) -> Result<EventStream, EventError> {
    parse_events(&fs::read_to_string(path)?)
}

fn parse_err(line: usize, msg: impl Into<String>) -> EventError {
    EventError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T, EventError> {
    s.parse()
        .map_err(|_| parse_err(line, format!("invalid {name} {s:?}")))
}

pub(crate) fn parse_events(text: &str) -> Result<EventStream, EventError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let rest = header
        .strip_prefix(EVT_MAGIC)
        .ok_or_else(|| parse_err(1, format!("expected {EVT_MAGIC:?} header")))?;
    let h: Vec<&str> = rest.split_whitespace().collect();
    if h.len() != 4 {
        return Err(parse_err(1, "header needs W H t_start t_end"));
    }
    let width: u32 = parse_field(1, "width", h[0])?;
    let height: u32 = parse_field(1, "height", h[1])?;
    let t_start: u64 = parse_field(1, "t_start", h[2])?;
    let t_end: u64 = parse_field(1, "t_end", h[3])?;
    let mut events = Vec::new();
    let mut last_t = t_start;
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 4 {
            return Err(parse_err(n, format!("expected 4 fields, found {}", f.len())));
        }
        let t: u64 = parse_field(n, "timestamp", f[0])?;
        let x: u32 = parse_field(n, "x", f[1])?;
        let y: u32 = parse_field(n, "y", f[2])?;
        let p: i64 = parse_field(n, "polarity", f[3])?;
        let p = Polarity::from_sign(p)
            .ok_or_else(|| parse_err(n, format!("polarity must be 1 or -1, found {p}")))?;
        if x >= width || y >= height {
            return Err(parse_err(n, format!("({x}, {y}) outside {width}x{height}")));
        }
        if t < t_start || t > t_end {
            return Err(parse_err(n, format!("timestamp {t} outside [{t_start}, {t_end}]")));
        }
        if t < last_t {
            return Err(parse_err(n, "timestamps must not decrease"));
        }
        last_t = t;
        events.push(EventPoint::new(t, x, y, p));
    }
    EventStream::new(width, height, t_start, t_end, events)
}

/// Writes the occupied voxels of `v` as text: a `# vox v1 GX GY GZ CELL KMAX`
/// header, then one `vx vy vz vf` line per voxel with coordinates rounded
/// half away from zero.
pub fn save_voxels(v: &VoxelSet, path: &Path) -> Result<(), EventError> {
    let [gx, gy, gz] = v.dims();
    let mut out = format!("# vox v1 {gx} {gy} {gz} {} {}\n", v.cell_px(), v.k_max());
    for p in v.rounded().voxels() {
        writeln!(out, "{} {} {} {}", p.vx, p.vy, p.vz, p.vf).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary (P6) portable pixmap of a 3-channel image.
pub fn write_ppm(path: &Path, img: &RgbFrame) -> Result<(), EventError> {
    assert_eq!(img.channels(), 3, "PPM frames are RGB");
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.to_u8());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbFrame, EventError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| EventError::Parse {
        line: 1,
        msg: format!("{}: {m}", path.display()),
    };
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(bad("only 8-bit P6 pixmaps are supported"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(bad("pixel data length mismatch"));
    }
    Ok(Image::new(w, h, 3, body.iter().map(|&b| f64::from(b)).collect()))
}

/// RGB frames, events, and ground-truth boxes of one recording. Frames are
/// evenly spaced over `[events.t_start, events.t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbFrame>,
    pub events: EventStream,
    pub boxes: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_time(&self, k: usize) -> u64 {
        let n = self.frames.len();
        if n <= 1 {
            return self.events.t_start();
        }
        let span = self.events.t_end() - self.events.t_start();
        self.events.t_start() + k as u64 * span / (n as u64 - 1)
    }

    /// Events between frame `k - 1` and frame `k`; empty for the first frame.
    pub fn window(&self, k: usize) -> TimeWindow {
        if k == 0 {
            let t = self.frame_time(0);
            TimeWindow::new(t, t)
        } else {
            TimeWindow::new(self.frame_time(k - 1), self.frame_time(k))
        }
    }
}

/// Writes `frames/%06d.ppm`, `events.evt`, and `groundtruth.txt` under `dir`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<(), EventError> {
    fs::create_dir_all(dir.join("frames"))?;
    for (k, f) in seq.frames.iter().enumerate() {
        write_ppm(&dir.join("frames").join(format!("{k:06}.ppm")), f)?;
    }
    save_events(&seq.events, &dir.join("events.evt"))?;
    let mut gt = String::new();
    for b in &seq.boxes {
        writeln!(gt, "{},{},{},{}", b.x, b.y, b.w, b.h).unwrap();
    }
    fs::write(dir.join("groundtruth.txt"), gt)?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence, EventError> {
    let events = load_events(&dir.join("events.evt"))?;
    let mut boxes = Vec::new();
    for (i, line) in fs::read_to_string(dir.join("groundtruth.txt"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| parse_field(i + 1, "box coordinate", s.trim()))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(parse_err(i + 1, "expected x,y,w,h"));
        }
        boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
    }
    let mut frames = Vec::with_capacity(boxes.len());
    for k in 0..boxes.len() {
        frames.push(read_ppm(&dir.join("frames").join(format!("{k:06}.ppm")))?);
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        frames,
        events,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_line_format() {
        let s = parse_events("# evt v1 20 10 0 5000\n1000 12 7 1\n").unwrap();
        assert_eq!(s.events(), &[EventPoint::new(1000, 12, 7, Polarity::Positive)]);
    }

    #[test]
    fn zero_polarity_is_rejected_with_line_number() {
        let err = parse_events("# evt v1 20 10 0 5000\n1000 12 7 0\n").unwrap_err();
        assert!(matches!(err, EventError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_range_coordinate_is_rejected() {
        let err = parse_events("# evt v1 20 10 0 5000\n10 1 1 1\n20 25 7 -1\n").unwrap_err();
        assert!(matches!(err, EventError::Parse { line: 3, .. }), "{err}");
        assert!(parse_events("10 1 1 1\n").is_err());
        assert!(parse_events("# evt v1 20 10 0 5000\n10 1 1\n").is_err());
    }
}
