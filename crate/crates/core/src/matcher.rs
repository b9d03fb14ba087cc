//! Coarse-to-fine matching: temperature-scaled similarity, dual-softmax,
//! mutual nearest neighbours, fine windows and sub-pixel refinement by
//! heatmap expectation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, extract_pyramid, BackboneWeights, COARSE_STRIDE, FINE_STRIDE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrid::{dot, matmul_bt, row_softmax, softmax_in_place, FeatureGrid, GridShape, Mat};
use crate::transformer::{
    feature_transformer, fine_transformer, TokenSet, TransformerConfig, TransformerWeights,
};
use crate::weightfile::WeightFile;

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    /// Similarity temperature.
    pub tau: f64,
    pub conf_threshold: f64,
    /// Fine window side, odd.
    pub window: usize,
    /// Temperature of the fine heatmap softmax.
    pub tau_fine: f64,
    /// Coarse cells within this distance of the grid edge never match.
    pub border_margin: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            tau: 0.1,
            conf_threshold: 0.2,
            window: 5,
            tau_fine: 0.1,
            border_margin: 1,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_fine > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be > 0, got tau={} tau_fine={}",
                self.tau, self.tau_fine
            )));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::Config(format!(
                "conf_threshold must lie in (0, 1), got {}",
                self.conf_threshold
            )));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    /// Token index in image A's coarse grid.
    pub i: usize,
    /// Token index in image B's coarse grid.
    pub j: usize,
    pub conf: f64,
}

/// A refined correspondence in original-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedMatch {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub conf: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    /// Mutual nearest neighbours before thresholding.
    pub candidates: usize,
    /// Candidates removed by the confidence threshold.
    pub filtered: usize,
    /// Coarse matches whose fine window left the fine grid.
    pub window_dropped: usize,
    pub refined: usize,
    /// Transformer layers that ran without their depth-wise branch.
    pub dwconv_skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub refined: Vec<RefinedMatch>,
    pub diagnostics: MatchDiagnostics,
}

/// `S(i, j) = ⟨a_i, b_j⟩ / τ`.
pub fn similarity_matrix(fa: &TokenSet, fb: &TokenSet, tau: f64) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    if fa.dim() != fb.dim() {
        return Err(Error::Shape(format!("descriptor dims {} vs {}", fa.dim(), fb.dim())));
    }
    let mut s = matmul_bt(&fa.tokens, &fb.tokens)?;
    for v in s.data_mut() {
        *v /= tau;
    }
    Ok(s)
}

/// Row-softmax and column-softmax of `s`.
pub fn dual_softmax_factors(s: &Mat) -> (Mat, Mat) {
    let rows = row_softmax(s, 1.0);
    let cols = row_softmax(&s.transpose(), 1.0).transpose();
    (rows, cols)
}

/// `P(i, j) = softmax(S(i, ·))_j · softmax(S(·, j))_i`.
pub fn dual_softmax(s: &Mat) -> Mat {
    let (mut p, cols) = dual_softmax_factors(s);
    for (a, b) in p.data_mut().iter_mut().zip(cols.data()) {
        *a *= b;
    }
    p
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual nearest neighbours of `p` with `P(i, j) >= conf_threshold`,
/// ordered by `i`.
pub fn mnn_filter(p: &Mat, conf_threshold: f64) -> Vec<CoarseMatch> {
    mnn_candidates(p)
        .into_iter()
        .filter(|m| m.conf >= conf_threshold)
        .collect()
}

/// All mutual nearest neighbours regardless of confidence.
pub fn mnn_candidates(p: &Mat) -> Vec<CoarseMatch> {
    let (n, m) = p.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let col_best: Vec<usize> = (0..m)
        .map(|j| argmax((0..n).map(|i| p.get(i, j))).expect("non-empty column"))
        .collect();
    (0..n)
        .filter_map(|i| {
            let j = argmax(p.row(i).iter().copied()).expect("non-empty row");
            (col_best[j] == i).then(|| CoarseMatch {
                i,
                j,
                conf: p.get(i, j),
            })
        })
        .collect()
}

/// Zeroes rows and columns of cells within `margin` of either grid's edge.
pub fn mask_border(p: &mut Mat, grid_a: GridShape, grid_b: GridShape, margin: usize) {
    if margin == 0 {
        return;
    }
    let near = |g: GridShape, idx: usize| {
        let (x, y) = g.coords(idx);
        x < margin || y < margin || x + margin >= g.width || y + margin >= g.height
    };
    let bad_b: Vec<bool> = (0..grid_b.len()).map(|j| near(grid_b, j)).collect();
    for i in 0..grid_a.len() {
        let row_bad = near(grid_a, i);
        for (j, v) in p.row_mut(i).iter_mut().enumerate() {
            if row_bad || bad_b[j] {
                *v = 0.0;
            }
        }
    }
}

/// Similarity → dual-softmax → border mask → MNN on a pair of coarse token
/// sets. Returns the matches and the candidate/filter counters.
pub fn coarse_matches(
    fa: &TokenSet,
    fb: &TokenSet,
    mcfg: &MatcherConfig,
) -> Result<(Vec<CoarseMatch>, MatchDiagnostics)> {
    let s = similarity_matrix(fa, fb, mcfg.tau)?;
    let mut p = dual_softmax(&s);
    mask_border(&mut p, fa.shape, fb.shape, mcfg.border_margin);
    let candidates: Vec<CoarseMatch> = mnn_candidates(&p)
        .into_iter()
        .filter(|m| m.conf > 0.0)
        .collect();
    let kept: Vec<CoarseMatch> = candidates
        .iter()
        .copied()
        .filter(|m| m.conf >= mcfg.conf_threshold)
        .collect();
    let diag = MatchDiagnostics {
        candidates: candidates.len(),
        filtered: candidates.len() - kept.len(),
        ..Default::default()
    };
    Ok((kept, diag))
}

/// Fine-grid cell under the centre of coarse cell `(cx, cy)`.
pub fn coarse_to_fine(cx: usize, cy: usize) -> (usize, usize) {
    let scale = COARSE_STRIDE / FINE_STRIDE;
    (cx * scale + scale / 2, cy * scale + scale / 2)
}

/// Cuts a `w × w` window around each fine-grid centre. Windows that would
/// leave the grid are `None`; the second value counts them.
pub fn crop_windows(
    fine: &FeatureGrid,
    centers: &[(usize, usize)],
    w: usize,
) -> (Vec<Option<TokenSet>>, usize) {
    let half = w / 2;
    let mut dropped = 0;
    let shape = GridShape { height: w, width: w };
    let windows = centers
        .iter()
        .map(|&(cx, cy)| {
            if cx < half || cy < half || cx + half >= fine.width() || cy + half >= fine.height() {
                dropped += 1;
                return None;
            }
            let idx: Vec<usize> = (0..w)
                .flat_map(|dy| (0..w).map(move |dx| (dx, dy)))
                .map(|(dx, dy)| fine.shape.index(cx + dx - half, cy + dy - half))
                .collect();
            Some(TokenSet {
                shape,
                tokens: fine.tokens.select_rows(&idx),
            })
        })
        .collect();
    (windows, dropped)
}

/// Expected `(dx, dy)` offset from the centre of a row-major `w × w`
/// probability map.
pub fn heatmap_expectation(heat: &[f64], w: usize) -> (f64, f64) {
    let half = (w / 2) as f64;
    let (mut ex, mut ey) = (0.0, 0.0);
    for (q, &h) in heat.iter().enumerate() {
        ex += h * ((q % w) as f64 - half);
        ey += h * ((q / w) as f64 - half);
    }
    (ex, ey)
}

/// Correlates the centre token of `wa` with every token of `wb`, turns the
/// result into a heatmap with a softmax at temperature `tau_fine`, and
/// returns the expected offset from the window centre in fine cells.
pub fn refine_match(wa: &TokenSet, wb: &TokenSet, tau_fine: f64) -> Result<(f64, f64)> {
    if wa.shape != wb.shape || wa.dim() != wb.dim() {
        return Err(Error::Shape(format!(
            "window shapes {:?}/{} vs {:?}/{}",
            wa.shape,
            wa.dim(),
            wb.shape,
            wb.dim()
        )));
    }
    let w = wa.width();
    if wa.height() != w || w.is_multiple_of(2) {
        return Err(Error::Shape(format!("windows must be odd squares, got {:?}", wa.shape)));
    }
    let center = wa.token(w / 2, w / 2);
    let mut heat: Vec<f64> = wb.tokens.row_iter().map(|t| dot(center, t)).collect();
    softmax_in_place(&mut heat, 1.0 / tau_fine);
    Ok(heatmap_expectation(&heat, w))
}

/// Backbone and transformer weights stored together in one weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub backbone: BackboneWeights,
    pub transformer: TransformerWeights,
}

impl ModelWeights {
    pub fn init_seeded(seed: u64, cfg: &TransformerConfig) -> Self {
        let cfg = TransformerConfig {
            seed,
            ..cfg.clone()
        };
        ModelWeights {
            backbone: backbone::init_seeded(seed),
            transformer: TransformerWeights::init_seeded(&cfg),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wf = WeightFile::default();
        self.backbone.to_weight_file(&mut wf);
        self.transformer.to_weight_file(&mut wf);
        wf.save(path)
    }

    /// Loads backbone sections, and transformer sections when present;
    /// missing transformer sections fall back to seeded weights.
    pub fn load(path: &Path, cfg: &TransformerConfig) -> Result<Self> {
        let wf = WeightFile::load(path)?;
        let backbone = BackboneWeights::from_weight_file(&wf)?;
        let transformer = if wf.has_prefix("coarse_xf.") || wf.has_prefix("fine_xf.") {
            TransformerWeights::from_weight_file(&wf, cfg)?
        } else {
            TransformerWeights::init_seeded(cfg)
        };
        Ok(ModelWeights {
            backbone,
            transformer,
        })
    }
}

/// Full two-image pipeline: pyramid, coarse transformer, coarse matching,
/// fine windows, fine transformer and refinement. Refined matches are
/// ordered by `(i, j)` of their coarse match.
pub fn match_pipeline(
    img_a: &Image,
    img_b: &Image,
    weights: &ModelWeights,
    cfg: &TransformerConfig,
    mcfg: &MatcherConfig,
) -> Result<MatchSet> {
    mcfg.validate()?;
    cfg.validate()?;
    let prepare = |img: &Image| {
        if img.channels() != weights.backbone.input_channels() && weights.backbone.input_channels() == 1 {
            img.to_gray()
        } else {
            img.clone()
        }
    };
    let (coarse_a, fine_a) = extract_pyramid(&prepare(img_a), &weights.backbone)?;
    let (coarse_b, fine_b) = extract_pyramid(&prepare(img_b), &weights.backbone)?;
    let (ta, tb, stats) = feature_transformer(&coarse_a, &coarse_b, cfg, &weights.transformer)?;
    let (mut coarse, mut diagnostics) = coarse_matches(&ta, &tb, mcfg)?;
    diagnostics.dwconv_skipped = stats.dwconv_skipped;
    coarse.sort_by_key(|m| (m.i, m.j));

    let centers_a: Vec<(usize, usize)> = coarse
        .iter()
        .map(|m| {
            let (x, y) = coarse_a.shape.coords(m.i);
            coarse_to_fine(x, y)
        })
        .collect();
    let centers_b: Vec<(usize, usize)> = coarse
        .iter()
        .map(|m| {
            let (x, y) = coarse_b.shape.coords(m.j);
            coarse_to_fine(x, y)
        })
        .collect();
    let (wins_a, _) = crop_windows(&fine_a, &centers_a, mcfg.window);
    let (wins_b, _) = crop_windows(&fine_b, &centers_b, mcfg.window);

    let mut kept = Vec::new();
    let mut pairs = Vec::new();
    for (k, (wa, wb)) in wins_a.into_iter().zip(wins_b).enumerate() {
        match (wa, wb) {
            (Some(wa), Some(wb)) => {
                kept.push(k);
                pairs.push((wa, wb));
            }
            _ => diagnostics.window_dropped += 1,
        }
    }
    let transformed = fine_transformer(&pairs, cfg, &weights.transformer)?;
    let offsets: Vec<(f64, f64)> = transformed
        .par_iter()
        .map(|(wa, wb)| refine_match(wa, wb, mcfg.tau_fine))
        .collect::<Result<_>>()?;

    let refined: Vec<RefinedMatch> = kept
        .iter()
        .zip(offsets)
        .map(|(&k, (dx, dy))| {
            let m = coarse[k];
            let (ax, ay) = coarse_a.shape.coords(m.i);
            let (fbx, fby) = centers_b[k];
            let half_cell = (COARSE_STRIDE / 2) as f64;
            RefinedMatch {
                xa: (ax * COARSE_STRIDE) as f64 + half_cell,
                ya: (ay * COARSE_STRIDE) as f64 + half_cell,
                xb: (fbx as f64 + dx) * FINE_STRIDE as f64,
                yb: (fby as f64 + dy) * FINE_STRIDE as f64,
                conf: m.conf,
            }
        })
        .collect();
    diagnostics.refined = refined.len();
    Ok(MatchSet {
        coarse,
        refined,
        diagnostics,
    })
}

/// Tab-separated records with a `#` header line.
pub fn format_tsv(matches: &[RefinedMatch]) -> String {
    let mut out = String::from("# xa\tya\txb\tyb\tconf\n");
    for m in matches {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", m.xa, m.ya, m.xb, m.yb, m.conf));
    }
    out
}

/// One JSON object per line with keys `xa ya xb yb conf`.
pub fn format_jsonl(matches: &[RefinedMatch]) -> String {
    let mut out = String::new();
    for m in matches {
        out.push_str(&serde_json::to_string(m).expect("plain struct serialises"));
        out.push('\n');
    }
    out
}
