//! Two-view geometry evaluation: synthetic scenes with a known relative
//! pose, essential-matrix estimation (normalised 8-point inside RANSAC),
//! pose error as the larger of the rotation and translation angles, and AUC
//! at 5°/10°/20°.
//!
//! Camera A sits at the origin; a point `X` in A's frame maps to
//! `R·X + t` in B's frame, so `x_Bᵀ·[t]ₓR·x_A = 0` for normalised image
//! coordinates.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::matcher::{coarse_matches, match_pipeline, MatcherConfig, ModelWeights};
use crate::numgrid::{sym_eigen, FeatureGrid, GridShape, Mat};
use crate::transformer::TransformerConfig;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn inverse3(a: &Mat3) -> Result<Mat3> {
    let det = det3(a);
    if det.abs() < 1e-300 || !det.is_finite() {
        return Err(Error::Degenerate("singular 3x3 matrix".into()));
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            out[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    Ok(out)
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn normalize3(a: &Vec3) -> Option<Vec3> {
    let n = norm3(a);
    (n > 0.0 && n.is_finite()).then(|| a.map(|v| v / n))
}

/// `[t]ₓ` with `[t]ₓ·v = t × v`.
pub fn skew(t: &Vec3) -> Mat3 {
    [[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]]
}

/// Rodrigues rotation about a unit `axis`.
pub fn rotation_about(axis: &Vec3, angle_rad: f64) -> Mat3 {
    let k = skew(axis);
    let k2 = mat3_mul(&k, &k);
    let (s, c) = angle_rad.sin_cos();
    let mut r = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!("focal lengths must be > 0, got {fx}, {fy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Pixel → normalised image coordinates.
    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.cx) / self.fx, (p[1] - self.cy) / self.fy]
    }

    /// Camera-frame point → pixel.
    pub fn project(&self, x: &Vec3) -> [f64; 2] {
        [
            self.fx * x[0] / x[2] + self.cx,
            self.fy * x[1] / x[2] + self.cy,
        ]
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Rotation and unit translation direction of camera B relative to A.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RelPose {
    pub r: Mat3,
    pub t: Vec3,
}

impl RelPose {
    /// Checks the rotation and normalises `t`.
    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        let rtr = mat3_mul(&mat3_transpose(&r), &r);
        let ortho = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .all(|(i, j)| (rtr[i][j] - IDENTITY3[i][j]).abs() <= 1e-10);
        if !ortho || (det3(&r) - 1.0).abs() > 1e-10 {
            return Err(Error::Config("R is not a proper rotation".into()));
        }
        let t = normalize3(&t)
            .ok_or_else(|| Error::Config("translation direction has zero length".into()))?;
        Ok(RelPose { r, t })
    }

    /// `[t]ₓR`.
    pub fn essential(&self) -> Mat3 {
        mat3_mul(&skew(&self.t), &self.r)
    }

    /// The pose of A relative to B.
    pub fn inverse(&self) -> RelPose {
        let rt = mat3_transpose(&self.r);
        let t = mat3_vec(&rt, &self.t).map(|v| -v);
        RelPose { r: rt, t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoseErrorRecord {
    pub rot_err_deg: f64,
    pub trans_err_deg: f64,
    pub pose_err_deg: f64,
    pub inliers: usize,
}

/// Angle between rotations from `cos θ = 1 − ‖R₁ − R₂‖²_F / 4`, which equals
/// `(tr(R₁ᵀR₂) − 1)/2` and is exactly 1 for identical inputs.
fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let d2: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (a[i][j] - b[i][j]).powi(2))
        .sum();
    (1.0 - d2 / 4.0).clamp(-1.0, 1.0).acos()
}

/// Angle between unit vectors from `cos θ = 1 − ‖u − v‖² / 2`.
fn direction_angle(u: &Vec3, v: &Vec3) -> f64 {
    let d2: f64 = (0..3).map(|i| (u[i] - v[i]).powi(2)).sum();
    (1.0 - d2 / 2.0).clamp(-1.0, 1.0).acos()
}

/// Rotation angle of `R_est·R_gtᵀ`, translation angle folded over the sign
/// of `t`, and their maximum, all in degrees.
pub fn pose_error(est: &RelPose, gt: &RelPose) -> PoseErrorRecord {
    let rot = rotation_angle(&est.r, &gt.r).to_degrees();
    let neg = gt.t.map(|v| -v);
    let trans = direction_angle(&est.t, &gt.t)
        .min(direction_angle(&est.t, &neg))
        .to_degrees();
    PoseErrorRecord {
        rot_err_deg: rot,
        trans_err_deg: trans,
        pose_err_deg: rot.max(trans),
        inliers: 0,
    }
}

/// Normalised area under the recall curve `r(x) = #{eᵢ ≤ x}/n` on `[0, t]`
/// for each threshold. The curve is a step function, so the integral is
/// exact: `AUC_t = mean(max(0, 1 − eᵢ/t))`. Failed pairs enter as `+∞`.
pub fn auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::UndefinedInput("AUC of an empty error list".into()));
    }
    if let Some(e) = errors.iter().find(|e| e.is_nan() || **e < 0.0) {
        return Err(Error::UndefinedInput(format!("pose error {e} is not >= 0")));
    }
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::UndefinedInput(format!("AUC threshold {t} is not > 0")));
            }
            let sum: f64 = errors.iter().map(|&e| (1.0 - e / t).max(0.0)).sum();
            Ok(sum / errors.len() as f64)
        })
        .collect()
}

/// Similarity `T` with `T·p` centred at the origin and mean distance √2.
fn hartley_transform(points: impl Iterator<Item = [f64; 2]> + Clone) -> Result<Mat3> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points
        .map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok([[s, 0.0, -s * mx], [0.0, s, -s * my], [0.0, 0.0, 1.0]])
}

fn apply_affine(t: &Mat3, p: [f64; 2]) -> [f64; 2] {
    [
        t[0][0] * p[0] + t[0][1] * p[1] + t[0][2],
        t[1][0] * p[0] + t[1][1] * p[1] + t[1][2],
    ]
}

/// Singular value decomposition of a 3×3 matrix from the eigensystem of
/// `MᵀM`. Singular values are descending; `U` and `V` are rotations, so the
/// sign of the smallest singular value absorbs any reflection.
pub fn svd3(m: &Mat3) -> Result<(Mat3, Vec3, Mat3)> {
    let mt = mat3_transpose(m);
    let mtm = mat3_mul(&mt, m);
    let (vals, vecs) = sym_eigen(&Mat::from_fn(3, 3, |i, j| mtm[i][j]))?;
    let col = |k: usize| [vecs.get(0, k), vecs.get(1, k), vecs.get(2, k)];
    let mut v = [col(2), col(1), col(0)];
    let mut s = [vals[2], vals[1], vals[0]].map(|l| l.max(0.0).sqrt());
    if s[0] == 0.0 {
        return Ok((IDENTITY3, [0.0; 3], IDENTITY3));
    }
    v[2] = cross(&v[0], &v[1]);
    let u0 = normalize3(&mat3_vec(m, &v[0])).expect("largest singular value is positive");
    let u1 = if s[1] > s[0] * 1e-13 {
        let w = mat3_vec(m, &v[1]);
        let w = [0, 1, 2].map(|i| w[i] - dot3(&w, &u0) * u0[i]);
        normalize3(&w)
    } else {
        None
    };
    let u1 = u1.unwrap_or_else(|| {
        let pick = if u0[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        normalize3(&cross(&u0, &pick)).expect("non-parallel helper axis")
    });
    let u2 = cross(&u0, &u1);
    s[2] = dot3(&u2, &mat3_vec(m, &v[2]));
    let u = mat3_transpose(&[u0, u1, u2]);
    Ok((u, s, mat3_transpose(&v)))
}

fn column(m: &Mat3, k: usize) -> Vec3 {
    [m[0][k], m[1][k], m[2][k]]
}

/// Nearest matrix with singular values `(σ, σ, 0)`, scaled to unit
/// Frobenius norm.
pub fn project_essential(e: &Mat3) -> Result<Mat3> {
    let (u, s, v) = svd3(e)?;
    if !(s[1] > 0.0) {
        return Err(Error::Degenerate("essential estimate has rank < 2".into()));
    }
    let (u0, u1, v0, v1) = (column(&u, 0), column(&u, 1), column(&v, 0), column(&v, 1));
    let k = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = k * (u0[i] * v0[j] + u1[i] * v1[j]);
        }
    }
    Ok(out)
}

/// Relative eigenvalue below which the 8-point system counts as
/// rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// Normalised 8-point estimate from correspondences in normalised image
/// coordinates, projected onto the essential manifold.
pub fn essential_8point(pairs: &[Correspondence]) -> Result<Mat3> {
    if pairs.len() < 8 {
        return Err(Error::InsufficientData {
            required: 8,
            got: pairs.len(),
        });
    }
    let ta = hartley_transform(pairs.iter().map(|c| c.a))?;
    let tb = hartley_transform(pairs.iter().map(|c| c.b))?;
    let mut ata = Mat::zeros(9, 9);
    for c in pairs {
        let [x1, y1] = apply_affine(&ta, c.a);
        let [x2, y2] = apply_affine(&tb, c.b);
        let row = [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0];
        for i in 0..9 {
            for j in 0..9 {
                let v = ata.get(i, j) + row[i] * row[j];
                ata.set(i, j, v);
            }
        }
    }
    let (vals, vecs) = sym_eigen(&ata)?;
    if vals[1] <= RANK_TOL * vals[8] {
        return Err(Error::Degenerate(
            "correspondences do not determine a unique essential matrix".into(),
        ));
    }
    let mut en = [[0.0; 3]; 3];
    for (k, v) in en.iter_mut().flatten().enumerate() {
        *v = vecs.get(k, 0);
    }
    let e = mat3_mul(&mat3_mul(&mat3_transpose(&tb), &en), &ta);
    project_essential(&e)
}

/// First-order geometric distance of a pixel correspondence to the
/// epipolar geometry of fundamental matrix `f`, in pixels.
pub fn sampson_distance(f: &Mat3, c: &Correspondence) -> f64 {
    let x = [c.a[0], c.a[1], 1.0];
    let xp = [c.b[0], c.b[1], 1.0];
    let fx = mat3_vec(f, &x);
    let ftxp = mat3_vec(&mat3_transpose(f), &xp);
    let num = dot3(&xp, &fx);
    let den = fx[0].powi(2) + fx[1].powi(2) + ftxp[0].powi(2) + ftxp[1].powi(2);
    if den > 0.0 {
        num.abs() / den.sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `K⁻ᵀ·E·K⁻¹`.
pub fn fundamental_from_essential(e: &Mat3, k: &CameraIntrinsics) -> Mat3 {
    let kinv = k.inverse_matrix();
    mat3_mul(&mat3_mul(&mat3_transpose(&kinv), e), &kinv)
}

fn inlier_mask(e: &Mat3, matches: &[Correspondence], k: &CameraIntrinsics, px_thresh: f64) -> Vec<bool> {
    let f = fundamental_from_essential(e, k);
    matches.iter().map(|c| sampson_distance(&f, c) < px_thresh).collect()
}

/// Truncated quadratic cost `Σ min(d², thresh²)` of Sampson distances.
fn msac_cost(e: &Mat3, matches: &[Correspondence], k: &CameraIntrinsics, px_thresh: f64) -> f64 {
    let f = fundamental_from_essential(e, k);
    let cap = px_thresh * px_thresh;
    matches
        .iter()
        .map(|c| sampson_distance(&f, c).powi(2).min(cap))
        .sum()
}

/// RANSAC over 8-point samples of pixel correspondences. Models are ranked
/// by truncated quadratic Sampson cost, so among models with similar inlier
/// counts the one that fits its inliers tightest wins. The best model is
/// refit on its inliers; the mask is recomputed from the returned matrix.
pub fn ransac_essential(
    matches: &[Correspondence],
    k: &CameraIntrinsics,
    iters: usize,
    px_thresh: f64,
    seed: u64,
) -> Result<(Mat3, Vec<bool>)> {
    if matches.len() < 8 {
        return Err(Error::InsufficientData {
            required: 8,
            got: matches.len(),
        });
    }
    if iters == 0 || !(px_thresh > 0.0) {
        return Err(Error::Config(format!(
            "RANSAC needs iters >= 1 and px_thresh > 0, got {iters} and {px_thresh}"
        )));
    }
    let normalized: Vec<Correspondence> = matches
        .iter()
        .map(|c| Correspondence {
            a: k.normalize(c.a),
            b: k.normalize(c.b),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Mat3)> = None;
    for _ in 0..iters {
        let idx = sample(&mut rng, normalized.len(), 8);
        let subset: Vec<Correspondence> = idx.iter().map(|i| normalized[i]).collect();
        let e = match essential_8point(&subset) {
            Ok(e) => e,
            Err(Error::Degenerate(_)) => continue,
            Err(other) => return Err(other),
        };
        let cost = msac_cost(&e, matches, k, px_thresh);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, e));
        }
    }
    let (cost, mut e) =
        best.ok_or_else(|| Error::Degenerate("every RANSAC sample was degenerate".into()))?;
    let mask = inlier_mask(&e, matches, k, px_thresh);
    let inliers: Vec<Correspondence> = normalized
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    if let Ok(refit) = essential_8point(&inliers) {
        if msac_cost(&refit, matches, k, px_thresh) <= cost {
            e = refit;
        }
    }
    let mask = inlier_mask(&e, matches, k, px_thresh);
    Ok((e, mask))
}

/// Linear triangulation of normalised correspondence `(xa, xb)` with
/// cameras `[I | 0]` and `[R | t]`; returns homogeneous `(X, w)`.
fn triangulate(xa: [f64; 2], xb: [f64; 2], r: &Mat3, t: &Vec3) -> Result<[f64; 4]> {
    let p2 = |k: usize| [r[k][0], r[k][1], r[k][2], t[k]];
    let (p20, p21, p22) = (p2(0), p2(1), p2(2));
    let rows = [
        [-1.0, 0.0, xa[0], 0.0],
        [0.0, -1.0, xa[1], 0.0],
        [0, 1, 2, 3].map(|c| xb[0] * p22[c] - p20[c]),
        [0, 1, 2, 3].map(|c| xb[1] * p22[c] - p21[c]),
    ];
    let ata = Mat::from_fn(4, 4, |i, j| rows.iter().map(|row| row[i] * row[j]).sum());
    let (_, vecs) = sym_eigen(&ata)?;
    Ok([vecs.get(0, 0), vecs.get(1, 0), vecs.get(2, 0), vecs.get(3, 0)])
}

fn in_front_of_both(x: &[f64; 4], r: &Mat3, t: &Vec3) -> bool {
    let w = x[3];
    let za = x[2] * w;
    let zb = (r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + t[2] * w) * w;
    za > 0.0 && zb > 0.0
}

/// Picks the `(R, t)` factorisation of `e` that puts the most triangulated
/// pixel correspondences in front of both cameras.
pub fn decompose_essential(e: &Mat3, matches: &[Correspondence], k: &CameraIntrinsics) -> Result<RelPose> {
    let (u, _, v) = svd3(e)?;
    let w: Mat3 = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    let vt = mat3_transpose(&v);
    let r1 = mat3_mul(&mat3_mul(&u, &w), &vt);
    let r2 = mat3_mul(&mat3_mul(&u, &mat3_transpose(&w)), &vt);
    let t = column(&u, 2);
    let neg = t.map(|x| -x);
    let candidates = [(r1, t), (r1, neg), (r2, t), (r2, neg)];
    let normalized: Vec<([f64; 2], [f64; 2])> = matches
        .iter()
        .map(|c| (k.normalize(c.a), k.normalize(c.b)))
        .collect();
    let mut counts = [0usize; 4];
    for (slot, (r, t)) in counts.iter_mut().zip(&candidates) {
        for &(xa, xb) in &normalized {
            if in_front_of_both(&triangulate(xa, xb, r, t)?, r, t) {
                *slot += 1;
            }
        }
    }
    let best = *counts.iter().max().expect("four candidates");
    let winners: Vec<usize> = (0..4).filter(|&i| counts[i] == best).collect();
    if winners.len() != 1 {
        return Err(Error::AmbiguousDecomposition(format!(
            "cheirality counts {counts:?} have no unique maximum"
        )));
    }
    let (r, t) = candidates[winners[0]];
    RelPose::new(r, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SceneMode {
    /// A textured plane rendered under both poses; matched by the full
    /// pipeline.
    Texture,
    /// Shared descriptors placed on coarse grids at projected 3-D points;
    /// matched on the grids directly.
    Injection,
}

impl SceneMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "texture" => Ok(SceneMode::Texture),
            "injection" => Ok(SceneMode::Injection),
            other => Err(Error::Config(format!(
                "unknown scene mode {other:?} (expected texture or injection)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Number of 3-D points in injection mode.
    pub points: usize,
    pub max_rotation_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Camera centre distance; 0 gives a pure rotation.
    pub baseline: f64,
    /// Gaussian noise added to B's injected descriptors.
    pub noise: f64,
    pub descriptor_dim: usize,
    /// Coarse cells along each edge that receive no injected points.
    pub border_cells: usize,
    /// Render a constant image instead of a texture.
    pub blank: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 256,
            width: 256,
            focal: 256.0,
            points: 100,
            max_rotation_deg: 10.0,
            min_depth: 4.0,
            max_depth: 10.0,
            baseline: 1.0,
            noise: 0.0,
            descriptor_dim: 64,
            border_cells: 1,
            blank: false,
        }
    }
}

impl SceneParams {
    pub fn validate(&self, mode: SceneMode) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "scene size {}x{} is not a positive multiple of 8",
                self.height, self.width
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal must be > 0, got {}", self.focal)));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] is invalid",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.baseline >= 0.0) || !(self.noise >= 0.0) || !(self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("baseline, noise and rotation must be >= 0".into()));
        }
        if mode == SceneMode::Injection {
            if self.points < 16 {
                return Err(Error::Config(format!(
                    "injection needs at least 16 points, got {}",
                    self.points
                )));
            }
            if self.baseline == 0.0 {
                return Err(Error::Config(
                    "zero baseline leaves the essential matrix undefined".into(),
                ));
            }
            if self.descriptor_dim == 0 {
                return Err(Error::Config("descriptor_dim must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairViews {
    Texture {
        img_a: Image,
        img_b: Image,
    },
    Injection {
        desc_a: FeatureGrid,
        desc_b: FeatureGrid,
        /// Exact pixel position of the point injected into each cell.
        keypoints_a: Vec<Option<[f64; 2]>>,
        keypoints_b: Vec<Option<[f64; 2]>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub views: PairViews,
    pub gt_pose: RelPose,
    pub gt_correspondences: Vec<Correspondence>,
    /// 3-D points behind `gt_correspondences`, in camera A's frame.
    pub points: Vec<Vec3>,
    /// Coarse cell pairs `(i, j)` of the injected points.
    pub gt_cells: Vec<(usize, usize)>,
    pub intrinsics: CameraIntrinsics,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit3(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let g = gaussian_vec(rng, 3);
        if let Some(u) = normalize3(&[g[0], g[1], g[2]]) {
            return u;
        }
    }
}

/// Generates one pair. The seed fixes every random draw.
pub fn gen_synthetic_pair(seed: u64, mode: SceneMode, params: &SceneParams) -> Result<SyntheticPair> {
    params.validate(mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(
        params.focal,
        params.focal,
        params.width as f64 / 2.0,
        params.height as f64 / 2.0,
    )?;
    let axis = random_unit3(&mut rng);
    let angle = rng.gen_range(0.0..=params.max_rotation_deg).to_radians();
    let gt_pose = RelPose::new(rotation_about(&axis, angle), random_unit3(&mut rng))?;
    match mode {
        SceneMode::Injection => gen_injection(&mut rng, k, gt_pose, params),
        SceneMode::Texture => gen_texture(&mut rng, k, gt_pose, params),
    }
}

fn gen_injection(
    rng: &mut ChaCha8Rng,
    k: CameraIntrinsics,
    pose: RelPose,
    params: &SceneParams,
) -> Result<SyntheticPair> {
    let grid = GridShape::new(params.height / 8, params.width / 8)?;
    let m = params.border_cells;
    if grid.width <= 2 * m || grid.height <= 2 * m {
        return Err(Error::Config("border leaves no interior cells".into()));
    }
    let ts = pose.t.map(|v| v * params.baseline);
    let mut used_a = vec![false; grid.len()];
    let mut used_b = vec![false; grid.len()];
    let (mut points, mut gt_correspondences, mut gt_cells) = (Vec::new(), Vec::new(), Vec::new());
    let mut attempts = 0;
    while points.len() < params.points && attempts < params.points * 500 {
        attempts += 1;
        let cx = rng.gen_range(m..grid.width - m);
        let cy = rng.gen_range(m..grid.height - m);
        let ia = grid.index(cx, cy);
        if used_a[ia] {
            continue;
        }
        let pa = [
            (cx * 8) as f64 + rng.gen_range(0.0..8.0),
            (cy * 8) as f64 + rng.gen_range(0.0..8.0),
        ];
        let depth = rng.gen_range(params.min_depth..params.max_depth);
        let na = k.normalize(pa);
        let x = [na[0] * depth, na[1] * depth, depth];
        let xb = mat3_vec(&pose.r, &x);
        let xb = [xb[0] + ts[0], xb[1] + ts[1], xb[2] + ts[2]];
        if xb[2] < 0.1 * params.min_depth {
            continue;
        }
        let pb = k.project(&xb);
        let (bx, by) = ((pb[0] / 8.0).floor(), (pb[1] / 8.0).floor());
        if bx < m as f64 || by < m as f64 || bx >= (grid.width - m) as f64 || by >= (grid.height - m) as f64 {
            continue;
        }
        let ib = grid.index(bx as usize, by as usize);
        if used_b[ib] {
            continue;
        }
        used_a[ia] = true;
        used_b[ib] = true;
        points.push(x);
        gt_correspondences.push(Correspondence { a: k.project(&x), b: pb });
        gt_cells.push((ia, ib));
    }
    if points.len() < params.points {
        return Err(Error::Degenerate(format!(
            "placed only {} of {} points in both views",
            points.len(),
            params.points
        )));
    }
    let d = params.descriptor_dim;
    let mut desc_a = FeatureGrid::zeros(grid, d);
    let mut desc_b = FeatureGrid::zeros(grid, d);
    let mut keypoints_a = vec![None; grid.len()];
    let mut keypoints_b = vec![None; grid.len()];
    for (&(ia, ib), c) in gt_cells.iter().zip(&gt_correspondences) {
        let g = gaussian_vec(rng, d);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let noise = gaussian_vec(rng, d);
        for ch in 0..d {
            let u = g[ch] / n;
            desc_a.tokens.set(ia, ch, u);
            desc_b.tokens.set(ib, ch, u + params.noise * noise[ch]);
        }
        keypoints_a[ia] = Some(c.a);
        keypoints_b[ib] = Some(c.b);
    }
    Ok(SyntheticPair {
        views: PairViews::Injection {
            desc_a,
            desc_b,
            keypoints_a,
            keypoints_b,
        },
        gt_pose: pose,
        gt_correspondences,
        points,
        gt_cells,
        intrinsics: k,
    })
}

/// Two octaves of bilinear value noise on lattices of 8 and 4 pixels.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    for (cell, amp) in [(8usize, 1.0), (4usize, 0.5)] {
        let (lh, lw) = (h / cell + 2, w / cell + 2);
        let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let at = |xx: usize, yy: usize| lattice[yy * lw + xx];
                let top = at(x0, y0) + ax * (at(x0 + 1, y0) - at(x0, y0));
                let bot = at(x0, y0 + 1) + ax * (at(x0 + 1, y0 + 1) - at(x0, y0 + 1));
                img[y * w + x] += amp * (top + ay * (bot - top));
            }
        }
    }
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    img.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn bilinear(px: &[f64], h: usize, w: usize, x: f64, y: f64, outside: f64) -> f64 {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return outside;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| px[yy * w + xx];
    let top = at(x0, y0) + ax * (at(x1, y0) - at(x0, y0));
    let bot = at(x0, y1) + ax * (at(x1, y1) - at(x0, y1));
    top + ay * (bot - top)
}

fn gen_texture(
    rng: &mut ChaCha8Rng,
    k: CameraIntrinsics,
    pose: RelPose,
    params: &SceneParams,
) -> Result<SyntheticPair> {
    let (h, w) = (params.height, params.width);
    let normal = normalize3(&[rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0])
        .expect("non-zero normal");
    let dist = rng.gen_range(params.min_depth..params.max_depth);
    let ts = pose.t.map(|v| v * params.baseline);
    let px_a = if params.blank {
        vec![0.5; h * w]
    } else {
        value_noise(rng, h, w)
    };

    let identity = pose.r == IDENTITY3 && params.baseline == 0.0;
    let px_b = if identity {
        px_a.clone()
    } else {
        // Plane-induced homography from A pixels to B pixels.
        let mut m = pose.r;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += ts[i] * normal[j] / dist;
            }
        }
        let hmat = mat3_mul(&mat3_mul(&k.matrix(), &m), &k.inverse_matrix());
        let hinv = inverse3(&hmat)?;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = mat3_vec(&hinv, &[x as f64, y as f64, 1.0]);
                let v = if p[2] > 0.0 {
                    bilinear(&px_a, h, w, p[0] / p[2], p[1] / p[2], 0.5)
                } else {
                    0.5
                };
                out.push(v);
            }
        }
        out
    };

    let (mut points, mut gt_correspondences) = (Vec::new(), Vec::new());
    for cy in 0..h / 8 {
        for cx in 0..w / 8 {
            let pa = [(cx * 8 + 4) as f64, (cy * 8 + 4) as f64];
            let n = k.normalize(pa);
            let ray = [n[0], n[1], 1.0];
            let denom = dot3(&normal, &ray);
            if denom <= 0.0 {
                continue;
            }
            let x = ray.map(|v| v * dist / denom);
            let xb = mat3_vec(&pose.r, &x);
            let xb = [xb[0] + ts[0], xb[1] + ts[1], xb[2] + ts[2]];
            if xb[2] <= 0.0 {
                continue;
            }
            let pb = k.project(&xb);
            if pb[0] >= 0.0 && pb[1] >= 0.0 && pb[0] <= (w - 1) as f64 && pb[1] <= (h - 1) as f64 {
                points.push(x);
                gt_correspondences.push(Correspondence { a: k.project(&x), b: pb });
            }
        }
    }
    Ok(SyntheticPair {
        views: PairViews::Texture {
            img_a: Image::new(h, w, 1, px_a)?,
            img_b: Image::new(h, w, 1, px_b)?,
        },
        gt_pose: pose,
        gt_correspondences,
        points,
        gt_cells: Vec::new(),
        intrinsics: k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub mode: SceneMode,
    pub pairs: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub ransac_iters: usize,
    /// Sampson inlier threshold in pixels.
    pub px_thresh: f64,
    #[serde(skip)]
    pub matcher: MatcherConfig,
    #[serde(skip)]
    pub transformer: TransformerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: SceneMode::Injection,
            pairs: 20,
            seed: 0,
            scene: SceneParams::default(),
            ransac_iters: 1000,
            px_thresh: 1.0,
            matcher: MatcherConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRecord {
    pub pair: usize,
    pub seed: u64,
    pub failed: bool,
    /// Why no pose was produced.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// `null` in JSON when the pair failed (the error counts as +∞).
    pub pose_err_deg: Option<f64>,
    pub rot_err_deg: Option<f64>,
    pub trans_err_deg: Option<f64>,
    pub inliers: usize,
    pub n_coarse: usize,
    pub n_refined: usize,
    /// Injection mode: fraction of coarse matches on a ground-truth cell pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_precision: Option<f64>,
}

impl PairRecord {
    /// The pose error, `+∞` for failed pairs.
    pub fn error_deg(&self) -> f64 {
        self.pose_err_deg.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub auc_convention: String,
    pub per_pair: Vec<PairRecord>,
    pub auc: BTreeMap<String, f64>,
    /// Mean coarse-match precision over injection pairs; a diagnostic that
    /// is not part of the pose metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic_coarse_precision: Option<f64>,
}

impl EvalReport {
    pub fn auc_at(&self, threshold: f64) -> f64 {
        self.auc[&format!("{threshold}")]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn config_digest(cfg: &EvalConfig) -> String {
    let text = format!("{:?}|{:?}|{:?}", cfg, cfg.matcher, cfg.transformer);
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Estimate {
    n_coarse: usize,
    n_refined: usize,
    precision: Option<f64>,
    matches: Vec<Correspondence>,
}

fn match_pair(pair: &SyntheticPair, cfg: &EvalConfig, weights: &ModelWeights) -> Result<Estimate> {
    match &pair.views {
        PairViews::Injection {
            desc_a,
            desc_b,
            keypoints_a,
            keypoints_b,
        } => {
            let (coarse, _) = coarse_matches(desc_a, desc_b, &cfg.matcher)?;
            let matches: Vec<Correspondence> = coarse
                .iter()
                .filter_map(|m| Some(Correspondence {
                    a: keypoints_a[m.i]?,
                    b: keypoints_b[m.j]?,
                }))
                .collect();
            let correct = coarse
                .iter()
                .filter(|m| pair.gt_cells.contains(&(m.i, m.j)))
                .count();
            let precision = (!coarse.is_empty()).then(|| correct as f64 / coarse.len() as f64);
            Ok(Estimate {
                n_coarse: coarse.len(),
                n_refined: matches.len(),
                precision,
                matches,
            })
        }
        PairViews::Texture { img_a, img_b } => {
            for img in [img_a, img_b] {
                let first = img.pixels()[0];
                if img.pixels().iter().all(|&v| v == first) {
                    return Err(Error::Degenerate("image has no texture".into()));
                }
            }
            let set = match_pipeline(img_a, img_b, weights, &cfg.transformer, &cfg.matcher)?;
            let matches = set
                .refined
                .iter()
                .map(|m| Correspondence {
                    a: [m.xa, m.ya],
                    b: [m.xb, m.yb],
                })
                .collect();
            Ok(Estimate {
                n_coarse: set.coarse.len(),
                n_refined: set.refined.len(),
                precision: None,
                matches,
            })
        }
    }
}

fn estimate_pose(
    matches: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(RelPose, usize)> {
    let (e, mask) = ransac_essential(matches, k, cfg.ransac_iters, cfg.px_thresh, seed)?;
    let inliers: Vec<Correspondence> = matches
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let pose = decompose_essential(&e, &inliers, k)?;
    Ok((pose, inliers.len()))
}

fn eval_pair(idx: usize, cfg: &EvalConfig, weights: &ModelWeights) -> Result<PairRecord> {
    let seed = cfg.seed.wrapping_add(idx as u64);
    let pair = gen_synthetic_pair(seed, cfg.mode, &cfg.scene)?;
    let mut record = PairRecord {
        pair: idx,
        seed,
        failed: true,
        failure: None,
        pose_err_deg: None,
        rot_err_deg: None,
        trans_err_deg: None,
        inliers: 0,
        n_coarse: 0,
        n_refined: 0,
        coarse_precision: None,
    };
    let est = match match_pair(&pair, cfg, weights) {
        Ok(est) => est,
        Err(e) => {
            record.failure = Some(e.to_string());
            return Ok(record);
        }
    };
    record.n_coarse = est.n_coarse;
    record.n_refined = est.n_refined;
    record.coarse_precision = est.precision;
    match estimate_pose(&est.matches, &pair.intrinsics, cfg, seed) {
        Ok((pose, inliers)) => {
            let err = pose_error(&pose, &pair.gt_pose);
            record.failed = false;
            record.pose_err_deg = Some(err.pose_err_deg);
            record.rot_err_deg = Some(err.rot_err_deg);
            record.trans_err_deg = Some(err.trans_err_deg);
            record.inliers = inliers;
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    Ok(record)
}

/// Generates `cfg.pairs` pairs with seeds `seed + index`, estimates each
/// relative pose and aggregates AUC. Pairs run in parallel; the report
/// does not depend on scheduling.
pub fn evaluate(cfg: &EvalConfig, weights: Option<&ModelWeights>) -> Result<EvalReport> {
    if cfg.pairs == 0 {
        return Err(Error::Config("evaluation needs at least one pair".into()));
    }
    cfg.scene.validate(cfg.mode)?;
    cfg.matcher.validate()?;
    let seeded;
    let weights = match weights {
        Some(w) => w,
        None => {
            seeded = ModelWeights::init_seeded(cfg.seed, &cfg.transformer);
            &seeded
        }
    };
    let per_pair: Vec<PairRecord> = (0..cfg.pairs)
        .into_par_iter()
        .map(|idx| eval_pair(idx, cfg, weights))
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = per_pair.iter().map(PairRecord::error_deg).collect();
    let values = auc(&errors, &AUC_THRESHOLDS)?;
    let auc = AUC_THRESHOLDS
        .iter()
        .zip(values)
        .map(|(t, v)| (format!("{t}"), v))
        .collect();
    let precisions: Vec<f64> = per_pair.iter().filter_map(|r| r.coarse_precision).collect();
    let diagnostic_coarse_precision =
        (!precisions.is_empty()).then(|| precisions.iter().sum::<f64>() / precisions.len() as f64);
    Ok(EvalReport {
        config_digest: config_digest(cfg),
        auc_convention: "exact integral of the step recall curve on [0, t] divided by t; failed pairs count as +inf".into(),
        per_pair,
        auc,
        diagnostic_coarse_precision,
    })
}
