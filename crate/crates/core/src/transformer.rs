//! Interleaved self/cross attention stacks for the coarse grids and the
//! fine windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attend, AttentionInputs, AttentionVariant, FocusParams, LinearKernel};
use crate::error::{Error, Result};
use crate::numgrid::{matmul, DwKernel, FeatureGrid, GridShape, Mat};
use crate::weightfile::{Tensor, WeightFile};

/// A set of tokens laid out on a grid. Identical in shape to a
/// [`FeatureGrid`]; the alias marks transformer inputs and outputs.
pub type TokenSet = FeatureGrid;

/// Epsilon added to the LayerNorm variance.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Which attention kernel the stacks use. Resolved to a concrete
/// [`AttentionVariant`] per feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionKind {
    /// `literal` drops the `1/√d` logit scale.
    Softmax { literal: bool },
    Linear {
        kernel: LinearKernel,
        normalized: bool,
        eps: f64,
    },
    Focused {
        p: f64,
        eps: f64,
        normalized: bool,
        dwconv: bool,
    },
}

impl Default for AttentionKind {
    fn default() -> Self {
        AttentionKind::Focused {
            p: 3.0,
            eps: 1e-6,
            normalized: true,
            dwconv: true,
        }
    }
}

impl AttentionKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "softmax" => Ok(AttentionKind::Softmax { literal: false }),
            "linear" => Ok(AttentionKind::Linear {
                kernel: LinearKernel::EluPlusOne,
                normalized: true,
                eps: 1e-6,
            }),
            "focused" => Ok(AttentionKind::default()),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?} (expected softmax, linear or focused)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Softmax { .. } => "softmax",
            AttentionKind::Linear { .. } => "linear",
            AttentionKind::Focused { .. } => "focused",
        }
    }

    /// The variant for feature dimension `d`, without any depth-wise branch.
    pub fn variant(&self, d: usize) -> AttentionVariant {
        match *self {
            AttentionKind::Softmax { literal } => AttentionVariant::Softmax {
                scale: if literal { 1.0 } else { 1.0 / (d as f64).sqrt() },
            },
            AttentionKind::Linear {
                kernel,
                normalized,
                eps,
            } => AttentionVariant::Linear {
                kernel,
                normalized,
                eps,
            },
            AttentionKind::Focused {
                p, eps, normalized, ..
            } => AttentionVariant::FocusedLinear(FocusParams {
                p,
                eps,
                normalized,
                dwconv: None,
            }),
        }
    }

    fn uses_dwconv(&self) -> bool {
        matches!(self, AttentionKind::Focused { dwconv: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub num_coarse_blocks: usize,
    pub num_fine_blocks: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub attention: AttentionKind,
    /// Add the 2-D sinusoidal encoding before the first block.
    pub positional: bool,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_coarse_blocks: 4,
            num_fine_blocks: 1,
            coarse_dim: 64,
            fine_dim: 32,
            attention: AttentionKind::default(),
            positional: true,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.coarse_dim.is_multiple_of(4) || !self.fine_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "transformer dims must be divisible by 4, got {} and {}",
                self.coarse_dim, self.fine_dim
            )));
        }
        if let AttentionKind::Focused { p, eps, .. } = self.attention {
            FocusParams::new(p, eps)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            scale: vec![1.0; d],
            offset: vec![0.0; d],
        }
    }
}

/// Normalises every row to zero mean and unit variance, then applies the
/// per-channel affine map.
pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * ln.scale[c] + ln.offset[c];
        }
    }
    out
}

/// Weights of one attention + MLP encoder layer. Tokens are rows, so every
/// projection right-multiplies: `q = x · wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    /// `d × 2d`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `2d × d`
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    /// 3×3 depth-wise kernel for focused attention.
    pub dw_kernel: DwKernel,
}

impl EncoderLayerParams {
    /// Uniform in `[-1/√d, 1/√d]` for the dense weights, `[-1/3, 1/3]` for
    /// the 3×3 depth-wise taps; zero biases and identity norms.
    pub fn init_seeded(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut dense = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.gen_range(-bound..=bound));
        let wq = dense(d, d);
        let wk = dense(d, d);
        let wv = dense(d, d);
        let wo = dense(d, d);
        let w1 = dense(d, 2 * d);
        let w2 = dense(2 * d, d);
        let taps = (0..9 * d).map(|_| rng.gen_range(-1.0 / 3.0..=1.0 / 3.0)).collect();
        EncoderLayerParams {
            wq,
            wk,
            wv,
            wo,
            w1,
            b1: vec![0.0; 2 * d],
            w2,
            b2: vec![0.0; d],
            norm1: LayerNorm::identity(d),
            norm2: LayerNorm::identity(d),
            dw_kernel: DwKernel::new(3, d, taps).expect("3x3 kernel"),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = [&self.wq, &self.wk, &self.wv, &self.wo];
        let ok = square.iter().all(|m| m.shape() == (d, d))
            && self.w1.shape() == (d, 2 * d)
            && self.b1.len() == 2 * d
            && self.w2.shape() == (2 * d, d)
            && self.b2.len() == d
            && [&self.norm1, &self.norm2]
                .iter()
                .all(|n| n.scale.len() == d && n.offset.len() == d)
            && self.dw_kernel.channels() == d
            && self.dw_kernel.size() == 3;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("encoder layer weights inconsistent with dim {d}")))
        }
    }

    fn to_tensors(&self, prefix: &str, out: &mut WeightFile) {
        let d = self.dim();
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ] {
            out.push(Tensor::from_mat(format!("{prefix}.{name}"), m));
        }
        out.push(Tensor::vector(format!("{prefix}.b1"), self.b1.clone()));
        out.push(Tensor::vector(format!("{prefix}.b2"), self.b2.clone()));
        for (name, n) in [("norm1", &self.norm1), ("norm2", &self.norm2)] {
            out.push(Tensor::vector(format!("{prefix}.{name}.scale"), n.scale.clone()));
            out.push(Tensor::vector(format!("{prefix}.{name}.offset"), n.offset.clone()));
        }
        out.push(Tensor::new(
            format!("{prefix}.dw"),
            vec![d, 3, 3],
            self.dw_kernel.weights().to_vec(),
        ));
    }

    fn from_tensors(prefix: &str, wf: &WeightFile) -> Result<Self> {
        let mat = |n: &str| wf.get(&format!("{prefix}.{n}"))?.to_mat();
        let vec = |n: &str| wf.get(&format!("{prefix}.{n}"))?.to_vector();
        let dw = wf.get(&format!("{prefix}.dw"))?;
        let dw_kernel = match dw.dims.as_slice() {
            &[c, 3, 3] => DwKernel::new(3, c, dw.data.clone())?,
            other => {
                return Err(Error::Shape(format!("{prefix}.dw has dims {other:?}, want [d,3,3]")))
            }
        };
        let p = EncoderLayerParams {
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
            wo: mat("wo")?,
            w1: mat("w1")?,
            b1: vec("b1")?,
            w2: mat("w2")?,
            b2: vec("b2")?,
            norm1: LayerNorm {
                scale: vec("norm1.scale")?,
                offset: vec("norm1.offset")?,
            },
            norm2: LayerNorm {
                scale: vec("norm2.scale")?,
                offset: vec("norm2.offset")?,
            },
            dw_kernel,
        };
        p.validate()?;
        Ok(p)
    }
}

/// One self layer and one cross layer; both images share the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub self_layer: EncoderLayerParams,
    pub cross_layer: EncoderLayerParams,
}

impl BlockParams {
    pub fn init_seeded(d: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            self_layer: EncoderLayerParams::init_seeded(d, rng),
            cross_layer: EncoderLayerParams::init_seeded(d, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub coarse: Vec<BlockParams>,
    pub fine: Vec<BlockParams>,
}

impl TransformerWeights {
    pub fn init_seeded(cfg: &TransformerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7f4a_7c15_9e37_79b9);
        let coarse = (0..cfg.num_coarse_blocks)
            .map(|_| BlockParams::init_seeded(cfg.coarse_dim, &mut rng))
            .collect();
        let fine = (0..cfg.num_fine_blocks)
            .map(|_| BlockParams::init_seeded(cfg.fine_dim, &mut rng))
            .collect();
        TransformerWeights { coarse, fine }
    }

    /// Appends `coarse_xf.*` and `fine_xf.*` sections.
    pub fn to_weight_file(&self, out: &mut WeightFile) {
        for (stack, blocks) in [("coarse_xf", &self.coarse), ("fine_xf", &self.fine)] {
            for (b, block) in blocks.iter().enumerate() {
                block.self_layer.to_tensors(&format!("{stack}.{b}.self"), out);
                block.cross_layer.to_tensors(&format!("{stack}.{b}.cross"), out);
            }
        }
    }

    pub fn from_weight_file(wf: &WeightFile, cfg: &TransformerConfig) -> Result<Self> {
        let load = |stack: &str, n: usize, d: usize| -> Result<Vec<BlockParams>> {
            (0..n)
                .map(|b| {
                    let block = BlockParams {
                        self_layer: EncoderLayerParams::from_tensors(&format!("{stack}.{b}.self"), wf)?,
                        cross_layer: EncoderLayerParams::from_tensors(&format!("{stack}.{b}.cross"), wf)?,
                    };
                    if block.self_layer.dim() != d || block.cross_layer.dim() != d {
                        return Err(Error::Shape(format!(
                            "{stack}.{b} has dim {}, config expects {d}",
                            block.self_layer.dim()
                        )));
                    }
                    Ok(block)
                })
                .collect()
        };
        Ok(TransformerWeights {
            coarse: load("coarse_xf", cfg.num_coarse_blocks, cfg.coarse_dim)?,
            fine: load("fine_xf", cfg.num_fine_blocks, cfg.fine_dim)?,
        })
    }
}

/// 2-D sinusoidal encoding: `dim/4` frequency bands per axis, channels
/// `4k..4k+4` holding `sin(xω_k), cos(xω_k), sin(yω_k), cos(yω_k)` with
/// `ω_k = 10000^(-4k/dim)` and 0-based cell coordinates.
pub fn positional_encoding(grid: GridShape, dim: usize) -> Result<Mat> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding dim must be a positive multiple of 4, got {dim}"
        )));
    }
    let bands = dim / 4;
    let freqs: Vec<f64> = (0..bands)
        .map(|k| (-(10000f64.ln()) * (4 * k) as f64 / dim as f64).exp())
        .collect();
    let mut pe = Mat::zeros(grid.len(), dim);
    for t in 0..grid.len() {
        let (x, y) = grid.coords(t);
        let row = pe.row_mut(t);
        for (k, w) in freqs.iter().enumerate() {
            row[4 * k] = (x as f64 * w).sin();
            row[4 * k + 1] = (x as f64 * w).cos();
            row[4 * k + 2] = (y as f64 * w).sin();
            row[4 * k + 3] = (y as f64 * w).cos();
        }
    }
    Ok(pe)
}

/// Counters collected while running a stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StackStats {
    /// Cross layers whose depth-wise branch was skipped because the two
    /// token counts differed.
    pub dwconv_skipped: usize,
}

/// `y = LN₁(x + Att(x·wq, src·wk, src·wv)·wo)`, `out = LN₂(y + MLP(y))`.
///
/// Self-attention when `source` is `x`, cross-attention otherwise.
pub fn encoder_layer(
    x: &TokenSet,
    source: &TokenSet,
    params: &EncoderLayerParams,
    kind: &AttentionKind,
) -> Result<TokenSet> {
    let mut stats = StackStats::default();
    encoder_layer_counted(x, source, params, kind, &mut stats)
}

fn encoder_layer_counted(
    x: &TokenSet,
    source: &TokenSet,
    params: &EncoderLayerParams,
    kind: &AttentionKind,
    stats: &mut StackStats,
) -> Result<TokenSet> {
    let d = params.dim();
    if x.dim() != d || source.dim() != d {
        return Err(Error::Shape(format!(
            "layer dim {d}, tokens {} and {}",
            x.dim(),
            source.dim()
        )));
    }
    let inputs = AttentionInputs::new(
        matmul(&x.tokens, &params.wq)?,
        matmul(&source.tokens, &params.wk)?,
        matmul(&source.tokens, &params.wv)?,
    )?;
    let mut variant = kind.variant(d);
    if kind.uses_dwconv() {
        if let AttentionVariant::FocusedLinear(fp) = &mut variant {
            if x.shape.len() == source.shape.len() {
                *fp = fp.clone().with_dwconv(params.dw_kernel.clone(), source.shape);
            } else {
                stats.dwconv_skipped += 1;
            }
        }
    }
    let message = matmul(&attend(&variant, &inputs)?, &params.wo)?;
    let y = layer_norm(&x.tokens.add(&message)?, &params.norm1);

    let mut hidden = matmul(&y, &params.w1)?;
    for row in hidden.data_mut().chunks_exact_mut(2 * d) {
        for (h, b) in row.iter_mut().zip(&params.b1) {
            *h = (*h + b).max(0.0);
        }
    }
    let mut mlp = matmul(&hidden, &params.w2)?;
    for row in mlp.data_mut().chunks_exact_mut(d) {
        for (m, b) in row.iter_mut().zip(&params.b2) {
            *m += b;
        }
    }
    let out = layer_norm(&y.add(&mlp)?, &params.norm2);
    TokenSet::new(x.shape, out)
}

/// Runs `blocks` over a token-set pair: positional encoding once (when
/// enabled and at least one block exists), then per block self on A, self on
/// B, and the two cross updates computed from the same pre-cross state.
pub fn run_stack(
    a: &TokenSet,
    b: &TokenSet,
    kind: &AttentionKind,
    blocks: &[BlockParams],
    positional: bool,
) -> Result<(TokenSet, TokenSet, StackStats)> {
    let mut stats = StackStats::default();
    if blocks.is_empty() {
        return Ok((a.clone(), b.clone(), stats));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("token dims {} vs {}", a.dim(), b.dim())));
    }
    let (mut a, mut b) = (a.clone(), b.clone());
    if positional {
        a.tokens.add_assign(&positional_encoding(a.shape, a.dim())?)?;
        b.tokens.add_assign(&positional_encoding(b.shape, b.dim())?)?;
    }
    for block in blocks {
        let a1 = encoder_layer_counted(&a, &a, &block.self_layer, kind, &mut stats)?;
        let b1 = encoder_layer_counted(&b, &b, &block.self_layer, kind, &mut stats)?;
        a = encoder_layer_counted(&a1, &b1, &block.cross_layer, kind, &mut stats)?;
        b = encoder_layer_counted(&b1, &a1, &block.cross_layer, kind, &mut stats)?;
    }
    Ok((a, b, stats))
}

/// Coarse-level transformer: `cfg.num_coarse_blocks` of `weights.coarse`.
pub fn feature_transformer(
    fa: &TokenSet,
    fb: &TokenSet,
    cfg: &TransformerConfig,
    weights: &TransformerWeights,
) -> Result<(TokenSet, TokenSet, StackStats)> {
    if fa.dim() != cfg.coarse_dim || fb.dim() != cfg.coarse_dim {
        return Err(Error::Shape(format!(
            "coarse tokens have dims {} and {}, config expects {}",
            fa.dim(),
            fb.dim(),
            cfg.coarse_dim
        )));
    }
    let blocks = weights.coarse.get(..cfg.num_coarse_blocks).ok_or_else(|| {
        Error::Config(format!(
            "config asks for {} coarse blocks, weights have {}",
            cfg.num_coarse_blocks,
            weights.coarse.len()
        ))
    })?;
    run_stack(fa, fb, &cfg.attention, blocks, cfg.positional)
}

/// Fine-level transformer over independent window pairs. Output order
/// follows input order regardless of scheduling.
pub fn fine_transformer(
    windows: &[(TokenSet, TokenSet)],
    cfg: &TransformerConfig,
    weights: &TransformerWeights,
) -> Result<Vec<(TokenSet, TokenSet)>> {
    let blocks = weights.fine.get(..cfg.num_fine_blocks).ok_or_else(|| {
        Error::Config(format!(
            "config asks for {} fine blocks, weights have {}",
            cfg.num_fine_blocks,
            weights.fine.len()
        ))
    })?;
    windows
        .par_iter()
        .map(|(wa, wb)| {
            if wa.shape != wb.shape {
                return Err(Error::Shape(format!(
                    "window shapes {:?} vs {:?}",
                    wa.shape, wb.shape
                )));
            }
            let (a, b, _) = run_stack(wa, wb, &cfg.attention, blocks, cfg.positional)?;
            Ok((a, b))
        })
        .collect()
}
