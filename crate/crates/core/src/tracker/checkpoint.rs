//! Checkpoint layout: the magic bytes, a little-endian `u32` length and that
//! many bytes of JSON metadata describing the tensor shapes, the weights as
//! little-endian `f64`, and a CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ConvLayer, Encoder, TrainMeta};
use super::{Modality, TrackerError, TrackerParams};
use crate::diffmath::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SGTK1";
const FAMILY: &[u8; 4] = b"SGTK";

#[derive(Serialize, Deserialize)]
struct Header {
    modality: Modality,
    strides: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    meta: TrainMeta,
}

fn encoders(p: &TrackerParams) -> impl Iterator<Item = &Encoder> {
    [&p.rgb, &p.voxel, &p.frame].into_iter().flatten()
}

pub fn encode_params(p: &TrackerParams) -> Vec<u8> {
    let header = Header {
        modality: p.modality,
        strides: encoders(p)
            .map(|e| e.layers.iter().map(|l| l.stride).collect())
            .collect(),
        shapes: p.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        meta: p.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * p.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<TrackerParams, TrackerError> {
    if bytes.len() >= FAMILY.len() && &bytes[..FAMILY.len()] == FAMILY && !bytes.starts_with(CHECKPOINT_MAGIC) {
        let end = bytes.len().min(CHECKPOINT_MAGIC.len());
        return Err(TrackerError::Version(String::from_utf8_lossy(&bytes[..end]).into_owned()));
    }
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(TrackerError::Malformed("not a tracker checkpoint".into()));
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(TrackerError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(TrackerError::Checksum);
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let len = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("four bytes")) as usize;
    pos += 4;
    let json = body
        .get(pos..pos + len)
        .ok_or_else(|| TrackerError::Malformed("metadata runs past the end".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| TrackerError::Malformed(format!("metadata: {e}")))?;
    pos += len;
    let blob = &body[pos..];
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != 8 * total {
        return Err(TrackerError::Malformed(format!(
            "expected {total} weights, found {} bytes",
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    let mut tensors = header.shapes.iter().map(|shape| {
        let n = shape.iter().product();
        Tensor::new(shape.clone(), values.by_ref().take(n).collect())
    });
    let mut next = || {
        tensors
            .next()
            .ok_or_else(|| TrackerError::Malformed("too few tensors".into()))
    };
    let m = header.modality;
    let mut strides = header.strides.iter();
    let mut encoder = |present: bool| -> Result<Option<Encoder>, TrackerError> {
        if !present {
            return Ok(None);
        }
        let s = strides
            .next()
            .ok_or_else(|| TrackerError::Malformed("missing encoder strides".into()))?;
        let layers = s
            .iter()
            .map(|&stride| {
                Ok(ConvLayer {
                    weight: next()?,
                    bias: next()?,
                    stride,
                })
            })
            .collect::<Result<_, TrackerError>>()?;
        Ok(Some(Encoder { layers }))
    };
    let rgb = encoder(m.has_rgb())?;
    let voxel = encoder(m.has_voxel())?;
    let frame = encoder(m.has_frame())?;
    let p = TrackerParams {
        modality: m,
        rgb,
        voxel,
        frame,
        fusion: next()?,
        score: next()?,
        size_w: next()?,
        size_b: next()?,
        meta: header.meta,
    };
    if next().is_ok() {
        return Err(TrackerError::Malformed("unexpected trailing tensors".into()));
    }
    Ok(p)
}

/// Writes `p` to `path`, creating parent directories.
pub fn save_params(p: &TrackerParams, path: &Path) -> Result<(), TrackerError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_params(p))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<TrackerParams, TrackerError> {
    decode_params(&fs::read(path)?)
}
