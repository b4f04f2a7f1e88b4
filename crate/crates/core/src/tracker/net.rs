use super::params::{BoundLayer, BoundParams, TrackerParams, LEAKY_SLOPE, VOXEL_CHANNELS};
use super::{
    Modality, TrackerError, NOMINAL_TARGET_PX, SCORE_SIZE, SCORE_STRIDE, SEARCH_PX, SIZE_RANGE,
    TEMPLATE_PX,
};
use crate::diffmath::{ConvGeom, Graph, Tensor, Var};
use crate::eventcam::{Image, VoxelSet, DISPLAY_MIDPOINT};
use crate::geom::BBox;

/// Event half of a patch pair.
#[derive(Debug, Clone, PartialEq)]
pub enum EventPatch {
    Voxels(VoxelSet),
    /// Single-channel display-mapped event frame.
    Frame(Image),
}

/// Template and search patches of every modality the tag names.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub modality: Modality,
    pub z_rgb: Option<Image>,
    pub x_rgb: Option<Image>,
    pub z_event: Option<EventPatch>,
    pub x_event: Option<EventPatch>,
}

fn check_image(img: &Image, px: usize, ch: usize, what: &str) -> Result<(), TrackerError> {
    if img.width() != px || img.height() != px || img.channels() != ch {
        return Err(TrackerError::Config(format!(
            "{what} must be {px}x{px}x{ch}, got {}x{}x{}",
            img.width(),
            img.height(),
            img.channels()
        )));
    }
    Ok(())
}

fn check_event(e: &EventPatch, modality: Modality, px: usize, what: &str) -> Result<(), TrackerError> {
    match e {
        EventPatch::Voxels(v) if modality.has_voxel() => {
            let g = px / v.cell_px() as usize;
            if v.dims()[0] != g || v.dims()[1] != g {
                return Err(TrackerError::Config(format!(
                    "{what} voxel grid must be {g}x{g}, got {:?}",
                    v.dims()
                )));
            }
            Ok(())
        }
        EventPatch::Frame(f) if modality.has_frame() => check_image(f, px, 1, what),
        _ => Err(TrackerError::Config(format!(
            "{what} representation does not match modality {modality}"
        ))),
    }
}

impl PatchPair {
    /// Checks that exactly the tagged modalities are present at declared sizes.
    pub fn validate(&self) -> Result<(), TrackerError> {
        let m = self.modality;
        match (m.has_rgb(), &self.z_rgb, &self.x_rgb) {
            (true, Some(z), Some(x)) => {
                check_image(z, TEMPLATE_PX, 3, "RGB template")?;
                check_image(x, SEARCH_PX, 3, "RGB search patch")?;
            }
            (false, None, None) => {}
            _ => return Err(TrackerError::Config(format!("RGB patches do not match modality {m}"))),
        }
        match (m.has_event(), &self.z_event, &self.x_event) {
            (true, Some(z), Some(x)) => {
                check_event(z, m, TEMPLATE_PX, "event template")?;
                check_event(x, m, SEARCH_PX, "event search patch")?;
            }
            (false, None, None) => {}
            _ => return Err(TrackerError::Config(format!("event patches do not match modality {m}"))),
        }
        Ok(())
    }

    pub fn x_voxels(&self) -> Option<&VoxelSet> {
        match &self.x_event {
            Some(EventPatch::Voxels(v)) => Some(v),
            _ => None,
        }
    }

    pub fn x_frame(&self) -> Option<&Image> {
        match &self.x_event {
            Some(EventPatch::Frame(f)) => Some(f),
            _ => None,
        }
    }
}

/// Recorded event input of the search branch.
#[derive(Debug, Clone)]
pub enum EventInput {
    /// `[N, 4]` voxel rows with their occupancy mask and `[Gz, Gy, Gx]` grid.
    Voxels {
        var: Var,
        active: Vec<bool>,
        dims: [usize; 3],
    },
    /// `[1, H, W]` display values.
    Frame(Var),
}

/// Recorded search-branch inputs.
#[derive(Debug, Clone, Default)]
pub struct InputVars {
    /// `[3, H, W]` pixel values in `[0, 255]`.
    pub rgb: Option<Var>,
    pub event: Option<EventInput>,
}

impl InputVars {
    pub fn voxels(&self) -> Option<Var> {
        match &self.event {
            Some(EventInput::Voxels { var, .. }) => Some(*var),
            _ => None,
        }
    }

    pub fn frame(&self) -> Option<Var> {
        match &self.event {
            Some(EventInput::Frame(v)) => Some(*v),
            _ => None,
        }
    }
}

fn record(g: &Graph, t: Tensor, leaf: bool) -> Var {
    if leaf {
        g.leaf(t)
    } else {
        g.constant(t)
    }
}

pub(crate) fn event_input(g: &Graph, e: &EventPatch, leaf: bool) -> EventInput {
    match e {
        EventPatch::Voxels(v) => {
            let [gx, gy, gz] = v.dims();
            EventInput::Voxels {
                var: record(g, v.to_tensor(), leaf),
                active: v.active_mask(),
                dims: [gz, gy, gx],
            }
        }
        EventPatch::Frame(f) => EventInput::Frame(record(g, f.to_chw(), leaf)),
    }
}

/// Records the search patches of `pair`, as leaves when `leaf`.
pub fn search_inputs(g: &Graph, pair: &PatchPair, leaf: bool) -> InputVars {
    InputVars {
        rgb: pair.x_rgb.as_ref().map(|x| record(g, x.to_chw(), leaf)),
        event: pair.x_event.as_ref().map(|e| event_input(g, e, leaf)),
    }
}

fn template_inputs(g: &Graph, pair: &PatchPair) -> InputVars {
    InputVars {
        rgb: pair.z_rgb.as_ref().map(|x| g.constant(x.to_chw())),
        event: pair.z_event.as_ref().map(|e| event_input(g, e, false)),
    }
}

fn encode(g: &Graph, layers: &[BoundLayer], mut x: Var) -> Var {
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        x = g.conv2d(x, l.weight, Some(l.bias), l.geom);
        if i != last {
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

fn missing(what: &str) -> TrackerError {
    TrackerError::Config(format!("tracker has no {what} encoder"))
}

/// Features of a `[C, H, W]` image in `[0, 255]` (RGB or event display).
fn embed_image(g: &Graph, layers: &[BoundLayer], x: Var) -> Var {
    let x = g.affine(x, 1.0 / DISPLAY_MIDPOINT, -1.0);
    encode(g, layers, x)
}

/// Feature grid of an RGB patch given as `[3, H, W]`.
pub fn embed_rgb(g: &Graph, p: &BoundParams, x: Var) -> Result<Var, TrackerError> {
    let layers = p.rgb.as_ref().ok_or_else(|| missing("RGB"))?;
    Ok(embed_image(g, layers, x))
}

/// Feature grid of a voxel list. Each voxel's feature is splatted
/// trilinearly into a `[Gz, Gy, Gx]` grid, the temporal axis is collapsed to
/// a polarity-sum channel and a time-weighted channel, and the result is
/// encoded like an image.
pub fn embed_voxels(
    g: &Graph,
    p: &BoundParams,
    voxels: Var,
    active: Vec<bool>,
    dims: [usize; 3],
) -> Result<Var, TrackerError> {
    let layers = p.voxel.as_ref().ok_or_else(|| missing("voxel"))?;
    let [gz, gy, gx] = dims;
    let grid = g.splat(voxels, active, dims);
    let flat = g.reshape(grid, &[gz, gy * gx]);
    let mut collapse = vec![1.0; gz];
    let denom = gz.saturating_sub(1).max(1) as f64;
    collapse.extend((0..gz).map(|z| 2.0 * z as f64 / denom - 1.0));
    let collapse = g.constant(Tensor::new(vec![VOXEL_CHANNELS, gz], collapse));
    let planes = g.matmul(collapse, flat);
    let planes = g.reshape(planes, &[VOXEL_CHANNELS, gy, gx]);
    // Typical cell sums are a few events; bring them to unit scale.
    let planes = g.scale(planes, 0.25);
    Ok(encode(g, layers, planes))
}

fn embed_frame(g: &Graph, p: &BoundParams, x: Var) -> Result<Var, TrackerError> {
    let layers = p.frame.as_ref().ok_or_else(|| missing("event-frame"))?;
    Ok(embed_image(g, layers, x))
}

/// Element `i` of a vector var as a scalar var.
pub(crate) fn pick(g: &Graph, x: Var, i: usize) -> Var {
    let n = g.value_ref(x).numel();
    let mut onehot = vec![0.0; n];
    onehot[i] = 1.0;
    let mask = g.constant(Tensor::new(g.shape(x), onehot));
    let m = g.mul(x, mask);
    g.sum(m)
}

/// Weighted sum of the per-modality features of `inputs`.
pub(crate) fn fused_features(
    g: &Graph,
    p: &BoundParams,
    inputs: &InputVars,
) -> Result<Var, TrackerError> {
    let mut parts = Vec::new();
    if let Some(x) = inputs.rgb {
        parts.push((0, embed_rgb(g, p, x)?));
    }
    match &inputs.event {
        Some(EventInput::Voxels { var, active, dims }) => {
            parts.push((1, embed_voxels(g, p, *var, active.clone(), *dims)?));
        }
        Some(EventInput::Frame(x)) => parts.push((2, embed_frame(g, p, *x)?)),
        None => {}
    }
    let present = [p.rgb.is_some(), p.voxel.is_some(), p.frame.is_some()];
    if parts.len() != present.iter().filter(|b| **b).count()
        || parts.iter().any(|(slot, _)| !present[*slot])
    {
        return Err(TrackerError::Config("inputs do not match the tracker's modalities".into()));
    }
    let mut fused: Option<Var> = None;
    for (k, (_, f)) in parts.into_iter().enumerate() {
        let w = pick(g, p.fusion, k);
        let term = g.mul(f, w);
        fused = Some(match fused {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    fused.ok_or_else(|| TrackerError::Config("no inputs".into()))
}

/// Fused template features of `pair`, treated as constants by attacks.
pub fn template_features(params: &TrackerParams, pair: &PatchPair) -> Result<Tensor, TrackerError> {
    check_pair(params, pair)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let f = fused_features(&g, &p, &template_inputs(&g, pair))?;
    Ok(g.value(f))
}

pub(crate) fn template_var(g: &Graph, p: &BoundParams, pair: &PatchPair) -> Result<Var, TrackerError> {
    fused_features(g, p, &template_inputs(g, pair))
}

fn check_pair(params: &TrackerParams, pair: &PatchPair) -> Result<(), TrackerError> {
    if pair.modality != params.modality {
        return Err(TrackerError::Config(format!(
            "tracker expects {} inputs, got {}",
            params.modality, pair.modality
        )));
    }
    pair.validate()
}

/// Differentiable outputs of one forward pass, in search-patch pixels.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    /// `[S * S]` correlation logits.
    pub logits: Var,
    /// `[S, S]` sigmoid scores.
    pub scores: Var,
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

/// Decoded prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerOutput {
    /// `[S, S]` scores in `(0, 1)`.
    pub score_map: Tensor,
    /// Box in search-patch pixels, clamped to the patch.
    pub bbox: BBox,
    /// Box before clamping.
    pub raw_bbox: BBox,
}

impl OutputVars {
    pub fn output(&self, g: &Graph) -> TrackerOutput {
        let raw = BBox::from_center(g.item(self.cx), g.item(self.cy), g.item(self.w), g.item(self.h));
        let lim = SEARCH_PX as f64;
        let x0 = raw.x.clamp(0.0, lim - 1.0);
        let y0 = raw.y.clamp(0.0, lim - 1.0);
        let x1 = raw.right().clamp(x0 + 1.0, lim);
        let y1 = raw.bottom().clamp(y0 + 1.0, lim);
        TrackerOutput {
            score_map: g.value(self.scores),
            bbox: BBox::new(x0, y0, x1 - x0, y1 - y0),
            raw_bbox: raw,
        }
    }
}

/// Pixel position of each score cell along one axis.
pub fn cell_center(i: usize) -> f64 {
    i as f64 * SCORE_STRIDE
}

/// Score cell nearest to a search-patch pixel position.
pub fn nearest_cell(px: f64) -> usize {
    (px / SCORE_STRIDE).round().clamp(0.0, (SCORE_SIZE - 1) as f64) as usize
}

/// Correlates `template` (fused features `[C, h, w]`) with the fused
/// features of `search` and decodes scores and box.
pub fn forward(
    g: &Graph,
    p: &BoundParams,
    template: Var,
    search: &InputVars,
) -> Result<OutputVars, TrackerError> {
    let s = fused_features(g, p, search)?;
    let ts = g.shape(template);
    let ss = g.shape(s);
    let (c, kh) = (ts[0], ts[1]);
    if ts[1] != ts[2] || ss[0] != c || ss[1] != SCORE_SIZE || ss[2] != SCORE_SIZE {
        return Err(TrackerError::Config(format!(
            "feature shapes {ts:?} and {ss:?} cannot be correlated"
        )));
    }
    let kernel = g.reshape(template, &[1, c, kh, kh]);
    let geom = ConvGeom::new(1, kh / 2, kh - 1 - kh / 2);
    let corr = g.conv2d(s, kernel, None, geom);
    let corr = g.scale(corr, 1.0 / (c * kh * kh) as f64);
    let n = SCORE_SIZE * SCORE_SIZE;
    let corr = g.reshape(corr, &[n]);
    let a = pick(g, p.score, 0);
    let b = pick(g, p.score, 1);
    let scaled = g.mul(corr, a);
    let logits = g.add(scaled, b);
    let sig = g.sigmoid(logits);
    let scores = g.reshape(sig, &[SCORE_SIZE, SCORE_SIZE]);

    let prob = g.softmax(logits);
    let xs = g.constant(Tensor::new(vec![n], (0..n).map(|i| cell_center(i % SCORE_SIZE)).collect()));
    let ys = g.constant(Tensor::new(vec![n], (0..n).map(|i| cell_center(i / SCORE_SIZE)).collect()));
    let px = g.mul(prob, xs);
    let cx = g.sum(px);
    let py = g.mul(prob, ys);
    let cy = g.sum(py);

    let feats = g.reshape(s, &[c, n]);
    let weights = g.reshape(prob, &[n, 1]);
    let pooled = g.matmul(feats, weights);
    let pooled = g.reshape(pooled, &[1, c]);
    let z = g.matmul(pooled, p.size_w);
    let z = g.reshape(z, &[2]);
    let z = g.add(z, p.size_b);
    let e = g.exp(z);
    let sizes = g.scale(e, NOMINAL_TARGET_PX);
    let sizes = g.clamp(sizes, SIZE_RANGE.0, SIZE_RANGE.1);
    let w = pick(g, sizes, 0);
    let h = pick(g, sizes, 1);
    Ok(OutputVars {
        logits,
        scores,
        cx,
        cy,
        w,
        h,
    })
}

/// Runs the tracker on `pair` without recording gradients for the caller.
pub fn predict(params: &TrackerParams, pair: &PatchPair) -> Result<TrackerOutput, TrackerError> {
    check_pair(params, pair)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let t = template_var(&g, &p, pair)?;
    let out = forward(&g, &p, t, &search_inputs(&g, pair, false))?;
    Ok(out.output(&g))
}
