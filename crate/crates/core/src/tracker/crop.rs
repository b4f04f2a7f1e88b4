use super::net::{EventPatch, PatchPair};
use super::{
    Modality, TrackerError, EVENT_FRAME_SATURATION, SEARCH_PX, SEARCH_SCALE, TEMPLATE_PX,
    TEMPLATE_SCALE,
};
use crate::eventcam::{
    accumulate_event_frame, voxelize, EventStream, GridSpec, Image, Sequence, TimeWindow, VoxelSet,
};
use crate::geom::BBox;

/// Frame-space extent of a crop: `scale` times the box size on each axis,
/// centered on the box.
pub fn crop_region(bbox: &BBox, scale: f64) -> BBox {
    let (cx, cy) = bbox.center();
    BBox::from_center(cx, cy, bbox.w * scale, bbox.h * scale)
}

fn check_box(bbox: &BBox, width: usize, height: usize) -> Result<(), TrackerError> {
    if !bbox.is_valid() {
        return Err(TrackerError::Crop(format!("invalid box {bbox:?}")));
    }
    if !bbox.intersects(&BBox::new(0.0, 0.0, width as f64, height as f64)) {
        return Err(TrackerError::Crop(format!(
            "box {bbox:?} lies outside the {width}x{height} frame"
        )));
    }
    Ok(())
}

/// Bilinearly resamples the `scale`-times-`bbox` region of `img` to an
/// `out_px x out_px` patch. Samples outside the frame take the channel mean.
pub fn crop_patch(img: &Image, bbox: &BBox, scale: f64, out_px: usize) -> Result<Image, TrackerError> {
    check_box(bbox, img.width(), img.height())?;
    let region = crop_region(bbox, scale);
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let means = img.channel_means();
    let (sx, sy) = (region.w / out_px as f64, region.h / out_px as f64);
    let mut data = Vec::with_capacity(out_px * out_px * ch);
    for v in 0..out_px {
        let y = region.y + (v as f64 + 0.5) * sy - 0.5;
        for u in 0..out_px {
            let x = region.x + (u as f64 + 0.5) * sx - 0.5;
            if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
                data.extend_from_slice(&means);
                continue;
            }
            let xc = x.clamp(0.0, (w - 1) as f64);
            let yc = y.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
            for c in 0..ch {
                let top = img.at(x0, y0, c) * (1.0 - fx) + img.at(x1, y0, c) * fx;
                let bot = img.at(x0, y1, c) * (1.0 - fx) + img.at(x1, y1, c) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Image::new(out_px, out_px, ch, data))
}

/// Display-mapped event frame of `window`, cropped like an RGB patch.
pub fn crop_event_frame(
    stream: &EventStream,
    window: TimeWindow,
    bbox: &BBox,
    scale: f64,
    out_px: usize,
) -> Result<Image, TrackerError> {
    let frame = accumulate_event_frame(stream, window).display(EVENT_FRAME_SATURATION);
    crop_patch(&frame, bbox, scale, out_px)
}

/// Re-expresses a frame-level voxel set in patch coordinates. Voxels outside
/// the crop are dropped and the result keeps the input's capacity.
pub fn crop_voxels(v: &VoxelSet, bbox: &BBox, scale: f64, out_px: usize) -> Result<VoxelSet, TrackerError> {
    let cell = v.cell_px() as usize;
    check_box(bbox, v.dims()[0] * cell, v.dims()[1] * cell)?;
    Ok(v.crop(&crop_region(bbox, scale), out_px as u32))
}

/// Voxelizes the events of `window` after mapping them into an
/// `out_px x out_px` patch, so the grid has patch resolution.
pub fn voxel_patch(
    stream: &EventStream,
    window: TimeWindow,
    bbox: &BBox,
    scale: f64,
    out_px: usize,
    spec: &GridSpec,
) -> Result<VoxelSet, TrackerError> {
    check_box(bbox, stream.width() as usize, stream.height() as usize)?;
    let region = crop_region(bbox, scale);
    let patch = stream.crop(window, &region, out_px as u32, out_px as u32);
    Ok(voxelize(&patch, window, spec))
}

/// Maps a frame-space box into the search patch cropped around `search_box`.
pub fn frame_to_patch(b: &BBox, search_box: &BBox) -> BBox {
    let r = crop_region(search_box, SEARCH_SCALE);
    let (sx, sy) = (SEARCH_PX as f64 / r.w, SEARCH_PX as f64 / r.h);
    BBox::new((b.x - r.x) * sx, (b.y - r.y) * sy, b.w * sx, b.h * sy)
}

/// Inverse of [`frame_to_patch`].
pub fn patch_to_frame(b: &BBox, search_box: &BBox) -> BBox {
    let r = crop_region(search_box, SEARCH_SCALE);
    let (sx, sy) = (r.w / SEARCH_PX as f64, r.h / SEARCH_PX as f64);
    BBox::new(r.x + b.x * sx, r.y + b.y * sy, b.w * sx, b.h * sy)
}

/// Event window used for the template: the interval after `frame`, or the
/// one before it for the last frame.
fn template_window(seq: &Sequence, frame: usize) -> TimeWindow {
    if frame + 1 < seq.len() {
        seq.window(frame + 1)
    } else {
        seq.window(frame)
    }
}

fn event_patch(
    seq: &Sequence,
    modality: Modality,
    grid: &GridSpec,
    window: TimeWindow,
    bbox: &BBox,
    scale: f64,
    px: usize,
) -> Result<Option<EventPatch>, TrackerError> {
    Ok(if modality.has_voxel() {
        Some(EventPatch::Voxels(voxel_patch(&seq.events, window, bbox, scale, px, grid)?))
    } else if modality.has_frame() {
        Some(EventPatch::Frame(crop_event_frame(&seq.events, window, bbox, scale, px)?))
    } else {
        None
    })
}

/// Template patches cut around `template_box` in frame `template_frame`,
/// search patches around `search_box` in frame `k`.
pub fn build_pair(
    seq: &Sequence,
    modality: Modality,
    grid: &GridSpec,
    (template_frame, template_box): (usize, &BBox),
    k: usize,
    search_box: &BBox,
) -> Result<PatchPair, TrackerError> {
    if template_frame >= seq.len() || k >= seq.len() {
        return Err(TrackerError::Config(format!(
            "frame index out of range for a {}-frame sequence",
            seq.len()
        )));
    }
    let rgb = |f: usize, b: &BBox, scale, px| crop_patch(&seq.frames[f], b, scale, px);
    let (z_rgb, x_rgb) = if modality.has_rgb() {
        (
            Some(rgb(template_frame, template_box, TEMPLATE_SCALE, TEMPLATE_PX)?),
            Some(rgb(k, search_box, SEARCH_SCALE, SEARCH_PX)?),
        )
    } else {
        (None, None)
    };
    let zw = template_window(seq, template_frame);
    Ok(PatchPair {
        modality,
        z_rgb,
        x_rgb,
        z_event: event_patch(seq, modality, grid, zw, template_box, TEMPLATE_SCALE, TEMPLATE_PX)?,
        x_event: event_patch(seq, modality, grid, seq.window(k), search_box, SEARCH_SCALE, SEARCH_PX)?,
    })
}
