use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Modality;
use crate::diffmath::{ConvGeom, Graph, Tensor, Var};

/// Negative-side slope of the encoder activations.
pub(crate) const LEAKY_SLOPE: f64 = 0.1;
/// Channel widths of the three encoder layers.
pub(crate) const WIDTHS: [usize; 3] = [8, 16, 16];
/// Channels the voxel grid is collapsed to before encoding.
pub(crate) const VOXEL_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[O, C, 3, 3]`.
    pub weight: Tensor,
    /// `[O]`.
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, 1, 1)
    }
}

/// Three 3x3 convolutions with leaky activations between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    fn init(rng: &mut ChaCha8Rng, in_channels: usize, strides: [usize; 3]) -> Self {
        let mut c = in_channels;
        let layers = WIDTHS
            .iter()
            .zip(strides)
            .map(|(&o, stride)| {
                let std = (2.0 / (9 * c) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weight = Tensor::new(
                    vec![o, c, 3, 3],
                    (0..o * c * 9).map(|_| normal.sample(rng)).collect(),
                );
                c = o;
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(&[o]),
                    stride,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }
}

/// Training provenance stored with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub final_loss: Option<f64>,
}

/// All learned values of the surrogate tracker.
///
/// Encoders are present exactly for the modalities of `modality`. `fusion`
/// holds one weight per present encoder in the order rgb, voxel, frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams {
    pub modality: Modality,
    pub rgb: Option<Encoder>,
    pub voxel: Option<Encoder>,
    pub frame: Option<Encoder>,
    pub fusion: Tensor,
    /// Scale and bias applied to the correlation map, `[2]`.
    pub score: Tensor,
    /// `[C, 2]` projection of the pooled search feature to log size factors.
    pub size_w: Tensor,
    pub size_b: Tensor,
    pub meta: TrainMeta,
}

impl TrackerParams {
    pub fn new(modality: Modality, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = modality.has_rgb().then(|| Encoder::init(&mut rng, 3, [2, 2, 2]));
        let voxel = modality
            .has_voxel()
            .then(|| Encoder::init(&mut rng, VOXEL_CHANNELS, [2, 1, 1]));
        let frame = modality.has_frame().then(|| Encoder::init(&mut rng, 1, [2, 2, 2]));
        let n = [&rgb, &voxel, &frame].iter().filter(|e| e.is_some()).count();
        let c = WIDTHS[2];
        Self {
            modality,
            rgb,
            voxel,
            frame,
            fusion: Tensor::filled(&[n], 1.0 / n as f64),
            score: Tensor::new(vec![2], vec![8.0, -3.0]),
            size_w: Tensor::zeros(&[c, 2]),
            size_b: Tensor::zeros(&[2]),
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        }
    }

    pub fn feature_channels(&self) -> usize {
        WIDTHS[2]
    }

    /// Every learned tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for enc in [&self.rgb, &self.voxel, &self.frame].into_iter().flatten() {
            for l in &enc.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.extend([&self.fusion, &self.score, &self.size_w, &self.size_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in [&mut self.rgb, &mut self.voxel, &mut self.frame]
            .into_iter()
            .flatten()
        {
            for l in &mut enc.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.extend([
            &mut self.fusion,
            &mut self.score,
            &mut self.size_w,
            &mut self.size_b,
        ]);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Records the parameters in `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundParams {
        let put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let enc = |e: &Option<Encoder>| {
            e.as_ref().map(|e| {
                e.layers
                    .iter()
                    .map(|l| BoundLayer {
                        weight: put(&l.weight),
                        bias: put(&l.bias),
                        geom: l.geom(),
                    })
                    .collect()
            })
        };
        BoundParams {
            rgb: enc(&self.rgb),
            voxel: enc(&self.voxel),
            frame: enc(&self.frame),
            fusion: put(&self.fusion),
            score: put(&self.score),
            size_w: put(&self.size_w),
            size_b: put(&self.size_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub geom: ConvGeom,
}

/// Parameters recorded in one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub(crate) rgb: Option<Vec<BoundLayer>>,
    pub(crate) voxel: Option<Vec<BoundLayer>>,
    pub(crate) frame: Option<Vec<BoundLayer>>,
    pub(crate) fusion: Var,
    pub(crate) score: Var,
    pub(crate) size_w: Var,
    pub(crate) size_b: Var,
}

impl BoundParams {
    /// Vars in the order of [`TrackerParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for enc in [&self.rgb, &self.voxel, &self.frame].into_iter().flatten() {
            for l in enc {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out.extend([self.fusion, self.score, self.size_w, self.size_b]);
        out
    }
}
