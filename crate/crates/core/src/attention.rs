//! Softmax, linear and focused linear attention.
//!
//! Tokens are rows: `Q` is `N_q × d`, `K` is `N_k × d`, `V` is `N_k × d_v`.
//! The linear variants are evaluated in the `φ(Q)·(φ(K)ᵀ·V)` association
//! order, so their cost is `O(N·d·d_v)` instead of `O(N²·d)`.
//!
//! Every forward kernel has a hand-written vector–Jacobian product in
//! [`attention_grads`], checked against [`finite_diff_grad`].

use crate::error::{Error, Result};
use crate::numgrid::{
    depthwise_conv2d, dot, matmul, matmul_at, matmul_bt, softmax_in_place, DwKernel, FeatureGrid,
    GridShape, Mat,
};

/// Query, key and value matrices of one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

impl AttentionInputs {
    pub fn new(q: Mat, k: Mat, v: Mat) -> Result<Self> {
        if q.cols() != k.cols() {
            return Err(Error::Shape(format!(
                "query dim {} != key dim {}",
                q.cols(),
                k.cols()
            )));
        }
        if k.rows() != v.rows() {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        Ok(AttentionInputs { q, k, v })
    }

    fn check(&self) -> Result<()> {
        if self.q.cols() != self.k.cols() || self.k.rows() != self.v.rows() {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?}, V {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }
}

/// Feature map used by plain linear attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKernel {
    Relu,
    /// `elu(x) + 1`
    EluPlusOne,
}

impl LinearKernel {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            LinearKernel::Relu => x.max(0.0),
            LinearKernel::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            LinearKernel::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LinearKernel::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }
}

/// Depth-wise convolution branch added to the focused attention output.
///
/// `grid` is the layout of the value tokens; its cell count must equal the
/// number of values, and the number of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct DwBranch {
    pub kernel: DwKernel,
    pub grid: GridShape,
}

/// Parameters of focused linear attention.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusParams {
    /// Focusing exponent, `p >= 1`.
    pub p: f64,
    /// Guard for the focusing norm ratio and the normaliser.
    pub eps: f64,
    /// Divide by `φ(Q)·(φ(K)ᵀ·1) + eps`. Off reproduces the bare product.
    pub normalized: bool,
    pub dwconv: Option<DwBranch>,
}

impl Default for FocusParams {
    fn default() -> Self {
        FocusParams {
            p: 3.0,
            eps: 1e-6,
            normalized: true,
            dwconv: None,
        }
    }
}

impl FocusParams {
    pub fn new(p: f64, eps: f64) -> Result<Self> {
        let fp = FocusParams {
            p,
            eps,
            ..Default::default()
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn with_dwconv(mut self, kernel: DwKernel, grid: GridShape) -> Self {
        self.dwconv = Some(DwBranch { kernel, grid });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("focus exponent p must be >= 1, got {}", self.p)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Which attention kernel to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionVariant {
    Softmax {
        scale: f64,
    },
    Linear {
        kernel: LinearKernel,
        normalized: bool,
        eps: f64,
    },
    FocusedLinear(FocusParams),
}

impl AttentionVariant {
    /// Softmax with the conventional `1/√d` logit scale.
    pub fn softmax_for_dim(d: usize) -> Self {
        AttentionVariant::Softmax {
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    pub fn linear_relu() -> Self {
        AttentionVariant::Linear {
            kernel: LinearKernel::Relu,
            normalized: true,
            eps: 1e-6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionVariant::Softmax { .. } => "softmax",
            AttentionVariant::Linear { .. } => "linear",
            AttentionVariant::FocusedLinear(_) => "focused",
        }
    }
}

/// Evaluates `variant` on `inp`.
pub fn attend(variant: &AttentionVariant, inp: &AttentionInputs) -> Result<Mat> {
    match variant {
        AttentionVariant::Softmax { scale } => softmax_attention(inp, *scale),
        AttentionVariant::Linear {
            kernel,
            normalized,
            eps,
        } => linear_attention(inp, *kernel, *normalized, *eps),
        AttentionVariant::FocusedLinear(fp) => focused_linear_attention(inp, fp),
    }
}

/// `row_softmax(scale · Q·Kᵀ) · V`, streamed one query row at a time.
pub fn softmax_attention(inp: &AttentionInputs, scale: f64) -> Result<Mat> {
    inp.check()?;
    let (nq, nk, dv) = (inp.q.rows(), inp.k.rows(), inp.v.cols());
    let mut out = Mat::zeros(nq, dv);
    if nk == 0 {
        return Ok(out);
    }
    let mut w = vec![0.0; nk];
    for i in 0..nq {
        let qi = inp.q.row(i);
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(qi, inp.k.row(j));
        }
        softmax_in_place(&mut w, scale);
        let o = out.row_mut(i);
        for (j, &wj) in w.iter().enumerate() {
            for (oc, &vc) in o.iter_mut().zip(inp.v.row(j)) {
                *oc += wj * vc;
            }
        }
    }
    Ok(out)
}

fn check_eps(normalized: bool, eps: f64) -> Result<()> {
    if normalized && !(eps > 0.0) {
        return Err(Error::Config(format!(
            "normalised linear attention needs eps > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Linear attention with an element-wise kernel feature map.
pub fn linear_attention(
    inp: &AttentionInputs,
    kernel: LinearKernel,
    normalized: bool,
    eps: f64,
) -> Result<Mat> {
    inp.check()?;
    check_eps(normalized, eps)?;
    let a = inp.q.map(|x| kernel.apply(x));
    let b = inp.k.map(|x| kernel.apply(x));
    Ok(linear_core(&a, &b, &inp.v, normalized, eps)?.out)
}

struct LinearForward {
    out: Mat,
    kv: Mat,
    ksum: Vec<f64>,
    denom: Vec<f64>,
}

/// Shared body of the linear kernels once the feature maps are applied.
fn linear_core(a: &Mat, b: &Mat, v: &Mat, normalized: bool, eps: f64) -> Result<LinearForward> {
    let kv = matmul_at(b, v)?;
    let mut out = matmul(a, &kv)?;
    let mut ksum = vec![0.0; b.cols()];
    let mut denom = Vec::new();
    if normalized {
        for row in b.row_iter() {
            for (s, &x) in ksum.iter_mut().zip(row) {
                *s += x;
            }
        }
        denom.reserve(a.rows());
        for i in 0..a.rows() {
            let den = dot(a.row(i), &ksum) + eps;
            for o in out.row_mut(i) {
                *o /= den;
            }
            denom.push(den);
        }
    }
    Ok(LinearForward {
        out,
        kv,
        ksum,
        denom,
    })
}

/// Focused mapping `φ_p(x) = f_p(ReLU(x))` applied to every row, where
/// `f_p(r) = ‖r‖/‖r^p‖ · r^p` with an element-wise power.
///
/// Rows whose powered norm is `<= eps` map to the zero row. Otherwise the
/// output row keeps the norm of `ReLU(row)` and only changes direction.
pub fn focused_map(x: &Mat, p: f64, eps: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut r = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (rj, &xj) in r.iter_mut().zip(x.row(i)) {
            *rj = xj.max(0.0);
        }
        let o = out.row_mut(i);
        for (oj, &rj) in o.iter_mut().zip(&r) {
            *oj = rj.powf(p);
        }
        let ns = norm(o);
        if ns <= eps {
            o.fill(0.0);
            continue;
        }
        let ratio = norm(&r) / ns;
        for oj in o.iter_mut() {
            *oj *= ratio;
        }
    }
    out
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Vector–Jacobian product of [`focused_map`] with respect to `x`.
fn focused_map_vjp(x: &Mat, p: f64, eps: f64, gy: &Mat) -> Mat {
    let mut dx = Mat::zeros(x.rows(), x.cols());
    let d = x.cols();
    let mut r = vec![0.0; d];
    let mut s = vec![0.0; d];
    for i in 0..x.rows() {
        for (rj, &xj) in r.iter_mut().zip(x.row(i)) {
            *rj = xj.max(0.0);
        }
        for (sj, &rj) in s.iter_mut().zip(&r) {
            *sj = rj.powf(p);
        }
        let ns = norm(&s);
        if ns <= eps {
            continue;
        }
        let nr = norm(&r);
        let g = gy.row(i);
        let c = nr / ns;
        let gs = dot(g, &s);
        let out = dx.row_mut(i);
        for j in 0..d {
            if x.get(i, j) <= 0.0 {
                continue;
            }
            // y = c·s with c = ‖r‖/‖s‖ and s = r^p.
            let ds = c * g[j] - gs * nr / (ns * ns * ns) * s[j];
            out[j] = ds * p * r[j].powf(p - 1.0) + gs * r[j] / (nr * ns);
        }
    }
    dx
}

fn check_dwconv(inp: &AttentionInputs, branch: &DwBranch) -> Result<()> {
    let n = branch.grid.len();
    if inp.v.rows() != n || inp.q.rows() != n {
        return Err(Error::Shape(format!(
            "depth-wise branch needs N_q = N_k = {} ({}x{} grid), got N_q = {}, N_k = {}",
            n,
            branch.grid.height,
            branch.grid.width,
            inp.q.rows(),
            inp.v.rows()
        )));
    }
    if branch.kernel.channels() != inp.v.cols() {
        return Err(Error::Shape(format!(
            "depth-wise kernel has {} channels, values have {}",
            branch.kernel.channels(),
            inp.v.cols()
        )));
    }
    Ok(())
}

/// `φ_p(Q)·φ_p(K)ᵀ·V` (normalised by default) plus `DWConv(V)` when a
/// depth-wise branch is configured.
pub fn focused_linear_attention(inp: &AttentionInputs, fp: &FocusParams) -> Result<Mat> {
    inp.check()?;
    fp.validate()?;
    let a = focused_map(&inp.q, fp.p, fp.eps);
    let b = focused_map(&inp.k, fp.p, fp.eps);
    let mut out = linear_core(&a, &b, &inp.v, fp.normalized, fp.eps)?.out;
    if let Some(branch) = &fp.dwconv {
        check_dwconv(inp, branch)?;
        let vg = FeatureGrid::new(branch.grid, inp.v.clone())?;
        out.add_assign(&depthwise_conv2d(&vg, &branch.kernel)?.tokens)?;
    }
    Ok(out)
}

/// Gradients of `⟨upstream, attend(variant, inp)⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
    /// Depth-wise kernel gradient, present only for focused attention with a
    /// convolution branch.
    pub dw: Option<DwKernel>,
}

/// Analytic vector–Jacobian products of the attention kernels.
///
/// ReLU kinks take the subgradient 0.
pub fn attention_grads(
    variant: &AttentionVariant,
    inp: &AttentionInputs,
    upstream: &Mat,
) -> Result<AttentionGrads> {
    inp.check()?;
    let out_shape = (inp.q.rows(), inp.v.cols());
    if upstream.shape() != out_shape {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            out_shape
        )));
    }
    match variant {
        AttentionVariant::Softmax { scale } => Ok(softmax_grads(inp, *scale, upstream)),
        AttentionVariant::Linear {
            kernel,
            normalized,
            eps,
        } => {
            check_eps(*normalized, *eps)?;
            let a = inp.q.map(|x| kernel.apply(x));
            let b = inp.k.map(|x| kernel.apply(x));
            let (da, db, dv) = linear_core_vjp(&a, &b, &inp.v, *normalized, *eps, upstream)?;
            let dq = Mat::from_fn(da.rows(), da.cols(), |i, j| {
                da.get(i, j) * kernel.derivative(inp.q.get(i, j))
            });
            let dk = Mat::from_fn(db.rows(), db.cols(), |i, j| {
                db.get(i, j) * kernel.derivative(inp.k.get(i, j))
            });
            Ok(AttentionGrads { dq, dk, dv, dw: None })
        }
        AttentionVariant::FocusedLinear(fp) => {
            fp.validate()?;
            let a = focused_map(&inp.q, fp.p, fp.eps);
            let b = focused_map(&inp.k, fp.p, fp.eps);
            let (da, db, mut dv) = linear_core_vjp(&a, &b, &inp.v, fp.normalized, fp.eps, upstream)?;
            let dq = focused_map_vjp(&inp.q, fp.p, fp.eps, &da);
            let dk = focused_map_vjp(&inp.k, fp.p, fp.eps, &db);
            let dw = match &fp.dwconv {
                Some(branch) => {
                    check_dwconv(inp, branch)?;
                    let (dv_conv, dw) = dwconv_vjp(&inp.v, branch, upstream);
                    dv.add_assign(&dv_conv)?;
                    Some(dw)
                }
                None => None,
            };
            Ok(AttentionGrads { dq, dk, dv, dw })
        }
    }
}

fn softmax_grads(inp: &AttentionInputs, scale: f64, g: &Mat) -> AttentionGrads {
    let (nq, nk, d) = (inp.q.rows(), inp.k.rows(), inp.q.cols());
    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dv = Mat::zeros(nk, inp.v.cols());
    let mut w = vec![0.0; nk];
    let mut dw = vec![0.0; nk];
    for i in 0..nq {
        let qi = inp.q.row(i);
        let gi = g.row(i);
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(qi, inp.k.row(j));
        }
        softmax_in_place(&mut w, scale);
        for j in 0..nk {
            dw[j] = dot(gi, inp.v.row(j));
            for (dvc, &gc) in dv.row_mut(j).iter_mut().zip(gi) {
                *dvc += w[j] * gc;
            }
        }
        let mean: f64 = dot(&w, &dw);
        for j in 0..nk {
            let ds = w[j] * (dw[j] - mean) * scale;
            if ds == 0.0 {
                continue;
            }
            for (dqc, &kc) in dq.row_mut(i).iter_mut().zip(inp.k.row(j)) {
                *dqc += ds * kc;
            }
            for (dkc, &qc) in dk.row_mut(j).iter_mut().zip(qi) {
                *dkc += ds * qc;
            }
        }
    }
    AttentionGrads {
        dq,
        dk,
        dv,
        dw: None,
    }
}

/// VJP of [`linear_core`] with respect to the mapped features `a`, `b` and
/// the values.
fn linear_core_vjp(
    a: &Mat,
    b: &Mat,
    v: &Mat,
    normalized: bool,
    eps: f64,
    g: &Mat,
) -> Result<(Mat, Mat, Mat)> {
    let fwd = linear_core(a, b, v, normalized, eps)?;
    let (dnum, dden) = if normalized {
        let mut dnum = g.clone();
        let mut dden = vec![0.0; a.rows()];
        for i in 0..a.rows() {
            let den = fwd.denom[i];
            dden[i] = -dot(g.row(i), fwd.out.row(i)) / den;
            for x in dnum.row_mut(i) {
                *x /= den;
            }
        }
        (dnum, Some(dden))
    } else {
        (g.clone(), None)
    };

    let mut da = matmul_bt(&dnum, &fwd.kv)?;
    let dkv = matmul_at(a, &dnum)?;
    let mut db = matmul_bt(v, &dkv)?;
    let dv = matmul(b, &dkv)?;
    if let Some(dden) = dden {
        let mut dz = vec![0.0; a.cols()];
        for i in 0..a.rows() {
            for (c, (dac, &ac)) in da.row_mut(i).iter_mut().zip(a.row(i)).enumerate() {
                *dac += dden[i] * fwd.ksum[c];
                dz[c] += dden[i] * ac;
            }
        }
        for j in 0..b.rows() {
            for (dbc, &z) in db.row_mut(j).iter_mut().zip(&dz) {
                *dbc += z;
            }
        }
    }
    Ok((da, db, dv))
}

/// VJP of the depth-wise branch: gradients for `V` and for the kernel.
fn dwconv_vjp(v: &Mat, branch: &DwBranch, g: &Mat) -> (Mat, DwKernel) {
    let (h, w) = (branch.grid.height, branch.grid.width);
    let k = branch.kernel.size();
    let half = (k / 2) as isize;
    let d = v.cols();
    let mut dv = Mat::zeros(v.rows(), d);
    let mut dw = DwKernel::zeros(k, d).expect("odd kernel size");
    for y in 0..h {
        for x in 0..w {
            let gi = g.row(y * w + x);
            for dy in -half..=half {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = sy as usize * w + sx as usize;
                    let (ky, kx) = ((dy + half) as usize, (dx + half) as usize);
                    for c in 0..d {
                        *dw.at_mut(c, ky, kx) += gi[c] * v.get(src, c);
                        let wt = branch.kernel.at(c, ky, kx);
                        dv.row_mut(src)[c] += wt * gi[c];
                    }
                }
            }
        }
    }
    (dv, dw)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradients of `loss` with respect to Q, K and V.
pub fn finite_diff_grad(
    loss: impl Fn(&AttentionInputs) -> f64,
    inp: &AttentionInputs,
    h: f64,
) -> Result<(Mat, Mat, Mat)> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be > 0, got {h}")));
    }
    let perturb = |which: usize| -> Result<Mat> {
        let base = match which {
            0 => &inp.q,
            1 => &inp.k,
            _ => &inp.v,
        };
        let (r, c) = base.shape();
        let g = finite_diff(
            |x| {
                let m = Mat::from_vec(r, c, x.to_vec()).expect("same shape");
                let mut probe = inp.clone();
                match which {
                    0 => probe.q = m,
                    1 => probe.k = m,
                    _ => probe.v = m,
                }
                loss(&probe)
            },
            base.data(),
            h,
        );
        Mat::from_vec(r, c, g)
    };
    Ok((perturb(0)?, perturb(1)?, perturb(2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_inputs(rng: &mut ChaCha8Rng, nq: usize, nk: usize, d: usize, dv: usize) -> AttentionInputs {
        AttentionInputs::new(
            rand_mat(rng, nq, d),
            rand_mat(rng, nk, d),
            rand_mat(rng, nk, dv),
        )
        .unwrap()
    }

    /// Explicit `N_q × N_k` weight matrix for a kernelised variant.
    fn explicit_linear(a: &Mat, b: &Mat, v: &Mat, normalized: bool, eps: f64) -> (Mat, Mat) {
        let mut w = Mat::from_fn(a.rows(), b.rows(), |i, j| {
            (0..a.cols()).map(|c| a.get(i, c) * b.get(j, c)).sum()
        });
        if normalized {
            for i in 0..w.rows() {
                let s: f64 = w.row(i).iter().sum::<f64>() + eps;
                for x in w.row_mut(i) {
                    *x /= s;
                }
            }
        }
        let out = Mat::from_fn(a.rows(), v.cols(), |i, c| {
            (0..b.rows()).map(|j| w.get(i, j) * v.get(j, c)).sum()
        });
        (w, out)
    }

    #[test]
    fn softmax_single_key_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inp = rand_inputs(&mut rng, 5, 1, 3, 4);
        let out = softmax_attention(&inp, 0.5).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), inp.v.row(0));
        }

        let q = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let k = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0], vec![0.0, 2.0]]).unwrap();
        let v = rand_mat(&mut rng, 3, 2);
        let inp = AttentionInputs::new(q, k, v.clone()).unwrap();
        let out = softmax_attention(&inp, 1.0).unwrap();
        for c in 0..2 {
            let mean = (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0;
            assert!((out.get(0, c) - mean).abs() < 1e-15);
            assert!((out.get(1, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_weight_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inp = rand_inputs(&mut rng, 6, 6, 4, 4);
        let scale = 0.5;
        let mut w = Mat::from_fn(6, 6, |i, j| {
            scale * (0..4).map(|c| inp.q.get(i, c) * inp.k.get(j, c)).sum::<f64>()
        });
        for i in 0..6 {
            let m = w.row(i).iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = w.row(i).iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (j, x) in e.iter().enumerate() {
                w.set(i, j, x / s);
            }
        }
        let want = Mat::from_fn(6, 4, |i, c| (0..6).map(|j| w.get(i, j) * inp.v.get(j, c)).sum());
        let got = softmax_attention(&inp, scale).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_output_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let inp = rand_inputs(&mut rng, 7, 9, 5, 3);
            let out = softmax_attention(&inp, 3.0).unwrap();
            for c in 0..3 {
                let lo = (0..9).map(|j| inp.v.get(j, c)).fold(f64::MAX, f64::min);
                let hi = (0..9).map(|j| inp.v.get(j, c)).fold(f64::MIN, f64::max);
                for i in 0..7 {
                    assert!(out.get(i, c) >= lo - 1e-12 && out.get(i, c) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(AttentionInputs::new(Mat::zeros(2, 3), Mat::zeros(2, 4), Mat::zeros(2, 1)).is_err());
        assert!(AttentionInputs::new(Mat::zeros(2, 3), Mat::zeros(2, 3), Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn linear_normalized_weights_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kernel in [LinearKernel::Relu, LinearKernel::EluPlusOne] {
            let inp = rand_inputs(&mut rng, 8, 10, 4, 3);
            let a = inp.q.map(|x| kernel.apply(x));
            let b = inp.k.map(|x| kernel.apply(x));
            let (w, want) = explicit_linear(&a, &b, &inp.v, true, 1e-6);
            let got = linear_attention(&inp, kernel, true, 1e-6).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-10);
            for i in 0..8 {
                let s: f64 = w.row(i).iter().sum();
                // The eps guard only matters for rows whose raw mass is tiny.
                let raw: f64 = (0..10).map(|j| dot(a.row(i), b.row(j))).sum();
                assert!((s - raw / (raw + 1e-6)).abs() < 1e-10);
                if raw > 1e-2 {
                    assert!((s - 1.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn linear_single_key_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inp = AttentionInputs::new(
            rand_mat(&mut rng, 4, 3).map(|x| x.abs() + 0.5),
            Mat::from_rows(&[vec![0.7, 0.2, 0.9]]).unwrap(),
            rand_mat(&mut rng, 1, 2),
        )
        .unwrap();
        let out = linear_attention(&inp, LinearKernel::Relu, true, 1e-12).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                assert!((out.get(i, c) - inp.v.get(0, c)).abs() < 1e-10);
            }
        }

        let inp = rand_inputs(&mut rng, 9, 7, 4, 5);
        let a = inp.q.map(|x| x.max(0.0));
        let b = inp.k.map(|x| x.max(0.0));
        let (_, want) = explicit_linear(&a, &b, &inp.v, false, 0.0);
        let got = linear_attention(&inp, LinearKernel::Relu, false, 0.0).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn linear_rejects_nonpositive_eps() {
        let inp = AttentionInputs::new(Mat::zeros(1, 1), Mat::zeros(1, 1), Mat::zeros(1, 1)).unwrap();
        assert!(matches!(
            linear_attention(&inp, LinearKernel::Relu, true, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn focused_map_examples() {
        let x = Mat::from_rows(&[vec![0.3, 0.0, 2.0]]).unwrap();
        assert_eq!(focused_map(&x, 1.0, 1e-6), x);

        let x = Mat::from_rows(&[vec![-1.0, -2.0]]).unwrap();
        assert_eq!(focused_map(&x, 3.0, 1e-6).data(), &[0.0, 0.0]);

        let x = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = focused_map(&x, 2.0, 1e-6);
        let c = 5f64.sqrt() / 17f64.sqrt();
        assert!((y.get(0, 0) - c).abs() < 1e-15);
        assert!((y.get(0, 1) - 4.0 * c).abs() < 1e-15);
        assert!((y.get(0, 0) - 0.5423).abs() < 1e-4);
        assert!((y.get(0, 1) - 2.1693).abs() < 1e-4);
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    /// Rows with nonnegative entries and different argmax positions.
    fn distinct_argmax_pair(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>, usize) {
        loop {
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let au = (0..d).max_by(|&i, &j| u[i].total_cmp(&u[j])).unwrap();
            let av = (0..d).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
            if au != av {
                return (u, v, au);
            }
        }
    }

    fn cosines_over_p(u: &[f64], v: &[f64], hot: usize) -> (Vec<f64>, Vec<f64>) {
        let m = Mat::from_rows(&[u.to_vec(), v.to_vec()]).unwrap();
        let mut one_hot = vec![0.0; u.len()];
        one_hot[hot] = 1.0;
        [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&p| {
                let y = focused_map(&m, p, 1e-9);
                (cosine(y.row(0), y.row(1)), cosine(y.row(0), &one_hot))
            })
            .unzip()
    }

    #[test]
    fn focused_map_aligns_with_dominant_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for d in [2, 3, 6, 16] {
            for _ in 0..300 {
                let (u, v, au) = distinct_argmax_pair(&mut rng, d);
                let (_, hot) = cosines_over_p(&u, &v, au);
                assert!(hot.windows(2).all(|w| w[1] >= w[0] - 1e-12), "d={d} {hot:?}");
            }
        }
    }

    #[test]
    fn focused_map_separates_dissimilar_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        // Per pair in two dimensions.
        for _ in 0..1000 {
            let (u, v, au) = distinct_argmax_pair(&mut rng, 2);
            let (uv, _) = cosines_over_p(&u, &v, au);
            assert!(uv.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{uv:?}");
        }
        // In higher dimensions individual pairs can rise slightly; the mean
        // over samples still falls with p.
        for d in [3, 6, 16] {
            let mut mean = [0.0; 4];
            for _ in 0..500 {
                let (u, v, au) = distinct_argmax_pair(&mut rng, d);
                let (uv, _) = cosines_over_p(&u, &v, au);
                for (m, c) in mean.iter_mut().zip(uv) {
                    *m += c / 500.0;
                }
            }
            assert!(mean.windows(2).all(|w| w[1] < w[0]), "d={d} {mean:?}");
        }
    }

    proptest! {
        #[test]
        fn focused_map_preserves_relu_norm(
            row in proptest::collection::vec(-3.0f64..3.0, 1..12),
            p in 1u32..=4,
        ) {
            let x = Mat::from_rows(std::slice::from_ref(&row)).unwrap();
            let y = focused_map(&x, p as f64, 1e-12);
            let relu: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
            let powered: f64 = relu.iter().map(|v| v.powi(2 * p as i32)).sum::<f64>().sqrt();
            if powered > 1e-12 {
                prop_assert!((norm(y.row(0)) - norm(&relu)).abs() < 1e-12);
            } else {
                prop_assert!(y.row(0).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn focused_reduces_to_relu_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let inp = rand_inputs(&mut rng, 9, 9, 4, 4);
            let fp = FocusParams::new(1.0, 1e-6)
                .unwrap()
                .with_dwconv(DwKernel::zeros(3, 4).unwrap(), GridShape::new(3, 3).unwrap());
            let a = focused_linear_attention(&inp, &fp).unwrap();
            let b = linear_attention(&inp, LinearKernel::Relu, true, 1e-6).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn focused_delta_conv_on_sparse_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = GridShape::new(3, 3).unwrap();
        let mut v = Mat::zeros(9, 2);
        v.row_mut(4).copy_from_slice(&[0.7, -1.3]);
        let inp = AttentionInputs::new(rand_mat(&mut rng, 9, 3), rand_mat(&mut rng, 9, 3), v.clone())
            .unwrap();
        let fp = FocusParams::new(3.0, 1e-6)
            .unwrap()
            .with_dwconv(DwKernel::delta(3, 2).unwrap(), grid);
        let out = focused_linear_attention(&inp, &fp).unwrap();
        let b = focused_map(&inp.k, 3.0, 1e-6);
        // Only token 4 carries value mass; its attention contribution is the
        // normalised weight times V[4], everything else is the delta conv.
        let a = focused_map(&inp.q, 3.0, 1e-6);
        let ksum: Vec<f64> = (0..3).map(|c| (0..9).map(|j| b.get(j, c)).sum()).collect();
        for i in 0..9 {
            let w = dot(a.row(i), b.row(4)) / (dot(a.row(i), &ksum) + 1e-6);
            for c in 0..2 {
                let want = w * v.get(4, c) + v.get(i, c);
                assert!((out.get(i, c) - want).abs() < 1e-12);
            }
        }

        // With all-zero values the attention term vanishes and the delta
        // branch copies V exactly.
        let zero = AttentionInputs::new(inp.q.clone(), inp.k.clone(), Mat::zeros(9, 2)).unwrap();
        let out = focused_linear_attention(&zero, &fp).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn focused_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let grid = GridShape::new(3, 3).unwrap();
        let inp = rand_inputs(&mut rng, 9, 9, 4, 4);
        let kern = DwKernel::new(3, 4, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let fp = FocusParams::new(3.0, 1e-6).unwrap().with_dwconv(kern.clone(), grid);
        let got = focused_linear_attention(&inp, &fp).unwrap();

        // Independent route: per-element f_p, explicit weights, explicit conv.
        let fmap = |m: &Mat| {
            let mut out = Mat::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                let r: Vec<f64> = m.row(i).iter().map(|x| x.max(0.0)).collect();
                let s: Vec<f64> = r.iter().map(|x| x * x * x).collect();
                let (nr, ns) = (norm(&r), norm(&s));
                if ns > 1e-6 {
                    for j in 0..m.cols() {
                        out.set(i, j, nr / ns * s[j]);
                    }
                }
            }
            out
        };
        let (_, att) = explicit_linear(&fmap(&inp.q), &fmap(&inp.k), &inp.v, true, 1e-6);
        let conv = Mat::from_fn(9, 4, |t, c| {
            let (x, y) = ((t % 3) as isize, (t / 3) as isize);
            let mut s = 0.0;
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let (sx, sy) = (x + kx - 1, y + ky - 1);
                    if (0..3).contains(&sx) && (0..3).contains(&sy) {
                        s += kern.at(c, ky as usize, kx as usize) * inp.v.get((sy * 3 + sx) as usize, c);
                    }
                }
            }
            s
        });
        let want = att.add(&conv).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn focused_dwconv_requires_equal_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let inp = rand_inputs(&mut rng, 4, 9, 2, 2);
        let fp = FocusParams::default()
            .with_dwconv(DwKernel::zeros(3, 2).unwrap(), GridShape::new(3, 3).unwrap());
        assert!(matches!(focused_linear_attention(&inp, &fp), Err(Error::Shape(_))));
        assert!(FocusParams::new(0.5, 1e-6).is_err());
        assert!(FocusParams::new(2.0, 0.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let inp = rand_inputs(&mut rng, 9, 9, 3, 3);
        let fp = FocusParams::default().with_dwconv(
            DwKernel::new(3, 3, vec![0.2; 27]).unwrap(),
            GridShape::new(3, 3).unwrap(),
        );
        for variant in [
            AttentionVariant::softmax_for_dim(3),
            AttentionVariant::linear_relu(),
            AttentionVariant::FocusedLinear(fp),
        ] {
            let g = attention_grads(&variant, &inp, &Mat::zeros(9, 3)).unwrap();
            assert!(g.dq.data().iter().chain(g.dk.data()).chain(g.dv.data()).all(|&x| x == 0.0));
            if let Some(dw) = g.dw {
                assert!(dw.weights().iter().all(|&x| x == 0.0));
            }
        }
        assert!(attention_grads(&AttentionVariant::linear_relu(), &inp, &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let c = [0.5, -2.0, 3.25];
        let g = finite_diff(|x| dot(&c, x), &[0.1, 0.2, 0.3], 1e-5);
        for (a, b) in g.iter().zip(&c) {
            assert!((a - b).abs() < 1e-10);
        }
        let x = [0.3, -1.2, 2.0];
        let g = finite_diff(|x| dot(x, x), &x, 1e-5);
        for (a, b) in g.iter().zip(&x) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
        let inp = AttentionInputs::new(Mat::zeros(1, 1), Mat::zeros(1, 1), Mat::zeros(1, 1)).unwrap();
        assert!(finite_diff_grad(|_| 0.0, &inp, 0.0).is_err());
    }

    fn max_rel(a: &Mat, b: &Mat) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    fn away_from_kinks(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inp = rand_inputs(&mut rng, 4, 4, 3, 3);
        let g = rand_mat(&mut rng, 4, 3);
        let variant = AttentionVariant::softmax_for_dim(3);
        let an = attention_grads(&variant, &inp, &g).unwrap();
        let loss = |i: &AttentionInputs| attend(&variant, i).unwrap().dot(&g).unwrap();
        let (dq, dk, dv) = finite_diff_grad(loss, &inp, 1e-5).unwrap();
        assert!(max_rel(&an.dq, &dq) < 1e-6);
        assert!(max_rel(&an.dk, &dk) < 1e-6);
        assert!(max_rel(&an.dv, &dv) < 1e-6);
    }

    #[test]
    fn focused_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let grid = GridShape::new(3, 3).unwrap();
        let inp = AttentionInputs::new(
            away_from_kinks(&mut rng, 9, 4),
            away_from_kinks(&mut rng, 9, 4),
            rand_mat(&mut rng, 9, 4),
        )
        .unwrap();
        let kern = DwKernel::new(3, 4, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let fp = FocusParams::new(3.0, 1e-6).unwrap().with_dwconv(kern.clone(), grid);
        let g = rand_mat(&mut rng, 9, 4);
        let variant = AttentionVariant::FocusedLinear(fp.clone());
        let an = attention_grads(&variant, &inp, &g).unwrap();
        let loss = |i: &AttentionInputs| attend(&variant, i).unwrap().dot(&g).unwrap();
        let (dq, dk, dv) = finite_diff_grad(loss, &inp, 1e-5).unwrap();
        assert!(max_rel(&an.dq, &dq) < 1e-6);
        assert!(max_rel(&an.dk, &dk) < 1e-6);
        assert!(max_rel(&an.dv, &dv) < 1e-6);

        let dw_num = finite_diff(
            |w| {
                let mut fp = fp.clone();
                fp.dwconv.as_mut().unwrap().kernel = DwKernel::new(3, 4, w.to_vec()).unwrap();
                focused_linear_attention(&inp, &fp).unwrap().dot(&g).unwrap()
            },
            kern.weights(),
            1e-5,
        );
        let dw_an = an.dw.unwrap();
        let dw_num = Mat::from_vec(1, 36, dw_num).unwrap();
        assert!(max_rel(&Mat::from_vec(1, 36, dw_an.weights().to_vec()).unwrap(), &dw_num) < 1e-6);
    }
}
