//! Small strided convolutional pyramid producing a coarse (1/8, 64 channels)
//! and a fine (1/2, 32 channels) feature grid.
//!
//! ```text
//! image ─ stem 3×3/2 ─┬─ layer1 3×3/2 ─ layer2 3×3/2 ─ layer3 3×3/1 ─ coarse (1/8)
//!          (1/2, 32)  │                                                 │
//!                     └─ lateral_fine 1×1 ──(+)── upsample ×4 ─ lateral_coarse 1×1
//!                                            │
//!                                          fine (1/2)
//! ```
//!
//! All 3×3 stages are bias-free, zero-padded and followed by ReLU.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrid::{FeatureGrid, GridShape};
use crate::weightfile::{Tensor, WeightFile};

pub const COARSE_DIM: usize = 64;
pub const FINE_DIM: usize = 32;
pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

/// One convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub relu: bool,
    pub weights: Vec<f64>,
}

impl ConvStage {
    fn seeded(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, ksize: usize, stride: usize, relu: bool) -> Self {
        let bound = (3.0 / (in_ch * ksize * ksize) as f64).sqrt();
        let weights = (0..out_ch * in_ch * ksize * ksize)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        ConvStage {
            in_ch,
            out_ch,
            ksize,
            stride,
            relu,
            weights,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.ksize * self.ksize
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_ch + i) * self.ksize + ky) * self.ksize + kx]
    }

    /// Zero-padded strided convolution; output size `ceil(n / stride)`.
    pub fn apply(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        if input.dim() != self.in_ch {
            return Err(Error::Config(format!(
                "stage expects {} input channels, got {}",
                self.in_ch,
                input.dim()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let half = (self.ksize / 2) as isize;
        let mut out = FeatureGrid::zeros(GridShape::new(oh, ow)?, self.out_ch);
        // Weights regrouped per tap as [ky][kx][out][in] so the inner loop is
        // contiguous.
        let k = self.ksize;
        let mut taps = vec![0.0; k * k * self.out_ch * self.in_ch];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        taps[((ky * k + kx) * self.out_ch + o) * self.in_ch + i] = self.w(o, i, ky, kx);
                    }
                }
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = out.tokens.row_mut(oy * ow + ox);
                for ky in 0..k {
                    let sy = (oy * self.stride) as isize + ky as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * self.stride) as isize + kx as isize - half;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = input.tokens.row(sy as usize * w + sx as usize);
                        let block = &taps[(ky * k + kx) * self.out_ch * self.in_ch..][..self.out_ch * self.in_ch];
                        for (o, a) in acc.iter_mut().enumerate() {
                            let wrow = &block[o * self.in_ch..(o + 1) * self.in_ch];
                            *a += wrow.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.relu {
                    for a in acc.iter_mut() {
                        *a = a.max(0.0);
                    }
                }
            }
        }
        Ok(out)
    }
}

const STAGE_NAMES: [&str; 6] = [
    "backbone.stem",
    "backbone.layer1",
    "backbone.layer2",
    "backbone.layer3",
    "backbone.lateral_coarse",
    "backbone.lateral_fine",
];

/// Layout of the six stages: (in, out, kernel, stride, relu), with `in` of
/// the stem left to the image channel count.
const STAGE_LAYOUT: [(usize, usize, usize, usize, bool); 6] = [
    (0, 32, 3, 2, true),
    (32, 48, 3, 2, true),
    (48, 64, 3, 2, true),
    (64, COARSE_DIM, 3, 1, true),
    (COARSE_DIM, FINE_DIM, 1, 1, false),
    (32, FINE_DIM, 1, 1, false),
];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub stem: ConvStage,
    pub layer1: ConvStage,
    pub layer2: ConvStage,
    pub layer3: ConvStage,
    pub lateral_coarse: ConvStage,
    pub lateral_fine: ConvStage,
}

impl BackboneWeights {
    pub fn input_channels(&self) -> usize {
        self.stem.in_ch
    }

    fn stages(&self) -> [&ConvStage; 6] {
        [
            &self.stem,
            &self.layer1,
            &self.layer2,
            &self.layer3,
            &self.lateral_coarse,
            &self.lateral_fine,
        ]
    }

    pub fn to_weight_file(&self, out: &mut WeightFile) {
        for (name, s) in STAGE_NAMES.iter().zip(self.stages()) {
            out.push(Tensor::new(
                *name,
                vec![s.out_ch, s.in_ch, s.ksize, s.ksize],
                s.weights.clone(),
            ));
        }
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let mut stages = Vec::with_capacity(6);
        let mut in_ch = 0;
        for (idx, (name, &(lin, lout, k, stride, relu))) in STAGE_NAMES.iter().zip(&STAGE_LAYOUT).enumerate() {
            let t = wf.get(name)?;
            let &[o, i, ky, kx] = t.dims.as_slice() else {
                return Err(Error::Shape(format!("{name} has rank {}, expected 4", t.dims.len())));
            };
            if idx == 0 {
                in_ch = i;
            }
            let want_in = if idx == 0 { in_ch } else { lin };
            if o != lout || i != want_in || ky != k || kx != k || (idx == 0 && i != 1 && i != 3) {
                return Err(Error::Shape(format!(
                    "{name} has dims {:?}, expected [{lout}, {want_in}, {k}, {k}]",
                    t.dims
                )));
            }
            stages.push(ConvStage {
                in_ch: i,
                out_ch: o,
                ksize: k,
                stride,
                relu,
                weights: t.data.clone(),
            });
        }
        let mut it = stages.into_iter();
        let mut next = || it.next().expect("six stages");
        Ok(BackboneWeights {
            stem: next(),
            layer1: next(),
            layer2: next(),
            layer3: next(),
            lateral_coarse: next(),
            lateral_fine: next(),
        })
    }
}

/// Seeded weights for grey input, uniform in `±√(3/fan_in)` (unit-variance
/// scale `1/√fan_in`).
pub fn init_seeded(seed: u64) -> BackboneWeights {
    init_seeded_for(seed, 1)
}

pub fn init_seeded_for(seed: u64, channels: usize) -> BackboneWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stage = |idx: usize| {
        let (i, o, k, s, relu) = STAGE_LAYOUT[idx];
        let i = if idx == 0 { channels } else { i };
        ConvStage::seeded(&mut rng, i, o, k, s, relu)
    };
    BackboneWeights {
        stem: stage(0),
        layer1: stage(1),
        layer2: stage(2),
        layer3: stage(3),
        lateral_coarse: stage(4),
        lateral_fine: stage(5),
    }
}

pub fn save_weights(path: &Path, w: &BackboneWeights) -> Result<()> {
    let mut wf = WeightFile::default();
    w.to_weight_file(&mut wf);
    wf.save(path)
}

pub fn load_weights(path: &Path) -> Result<BackboneWeights> {
    BackboneWeights::from_weight_file(&WeightFile::load(path)?)
}

/// Coarse `(H/8, W/8, 64)` and fine `(H/2, W/2, 32)` grids for one image.
pub fn extract_pyramid(img: &Image, w: &BackboneWeights) -> Result<(FeatureGrid, FeatureGrid)> {
    if img.channels() != w.input_channels() {
        return Err(Error::Config(format!(
            "backbone expects {} channels, image has {}",
            w.input_channels(),
            img.channels()
        )));
    }
    let shape = GridShape::new(img.height(), img.width())?;
    let input = FeatureGrid::new(
        shape,
        crate::numgrid::Mat::from_vec(shape.len(), img.channels(), img.pixels().to_vec())?,
    )?;
    let half = w.stem.apply(&input)?;
    let quarter = w.layer1.apply(&half)?;
    let eighth = w.layer2.apply(&quarter)?;
    let coarse = w.layer3.apply(&eighth)?;

    let top = w.lateral_coarse.apply(&coarse)?;
    let mut fine = w.lateral_fine.apply(&half)?;
    let scale = COARSE_STRIDE / FINE_STRIDE;
    for y in 0..fine.height() {
        for x in 0..fine.width() {
            let src = top.token(x / scale, y / scale).to_vec();
            let idx = fine.shape.index(x, y);
            for (f, t) in fine.tokens.row_mut(idx).iter_mut().zip(src) {
                *f += t;
            }
        }
    }
    Ok((coarse, fine))
}
