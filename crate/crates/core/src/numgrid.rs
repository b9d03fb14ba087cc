//! Dense numerical foundation: row-major `f64` matrices, token grids,
//! row softmax, depth-wise convolution and a small symmetric eigensolver.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Gathers rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "add")?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "sub")?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Element-wise product summed over all entries.
    pub fn dot(&self, other: &Mat) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Mat, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_bt: {}x{} times ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_at(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_at: ({}x{})^T times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &v) in orow.iter_mut().zip(br) {
                *o += ari * v;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place stabilised softmax of `scale · row`.
pub fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row
        .iter()
        .map(|&x| scale * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (scale * *x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of `scale · a` applied independently to each row.
pub fn row_softmax(a: &Mat, scale: f64) -> Mat {
    let mut out = a.clone();
    if out.cols == 0 {
        return out;
    }
    for row in out.data.chunks_exact_mut(a.cols) {
        softmax_in_place(row, scale);
    }
    out
}

/// Height and width of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(GridShape { height, width })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major token index of cell `(x, y)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Inverse of [`GridShape::index`], returning `(x, y)`.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }
}

/// An `height × width` grid of `dim`-channel descriptors stored as tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub shape: GridShape,
    pub tokens: Mat,
}

impl FeatureGrid {
    pub fn new(shape: GridShape, tokens: Mat) -> Result<Self> {
        if tokens.rows() != shape.len() {
            return Err(Error::Shape(format!(
                "{} tokens do not fill a {}x{} grid",
                tokens.rows(),
                shape.height,
                shape.width
            )));
        }
        Ok(FeatureGrid { shape, tokens })
    }

    pub fn zeros(shape: GridShape, dim: usize) -> Self {
        FeatureGrid {
            shape,
            tokens: Mat::zeros(shape.len(), dim),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.tokens.get(self.shape.index(x, y), c)
    }

    #[inline]
    pub fn token(&self, x: usize, y: usize) -> &[f64] {
        self.tokens.row(self.shape.index(x, y))
    }
}

/// Per-channel square convolution weights, laid out `[channel][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DwKernel {
    size: usize,
    channels: usize,
    weights: Vec<f64>,
}

impl DwKernel {
    pub fn new(size: usize, channels: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depth-wise kernel size must be odd, got {size}"
            )));
        }
        if weights.len() != size * size * channels {
            return Err(Error::Shape(format!(
                "{} weights for {channels} channels of {size}x{size}",
                weights.len()
            )));
        }
        Ok(DwKernel {
            size,
            channels,
            weights,
        })
    }

    pub fn zeros(size: usize, channels: usize) -> Result<Self> {
        Self::new(size, channels, vec![0.0; size * size * channels])
    }

    /// A kernel that copies its input: 1 at the centre tap of every channel.
    pub fn delta(size: usize, channels: usize) -> Result<Self> {
        let mut k = Self::zeros(size, channels)?;
        let h = size / 2;
        for c in 0..channels {
            *k.at_mut(c, h, h) = 1.0;
        }
        Ok(k)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn at(&self, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[(c * self.size + ky) * self.size + kx]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, ky: usize, kx: usize) -> &mut f64 {
        &mut self.weights[(c * self.size + ky) * self.size + kx]
    }
}

/// Zero-padded, stride-1 depth-wise cross-correlation.
pub fn depthwise_conv2d(grid: &FeatureGrid, kernel: &DwKernel) -> Result<FeatureGrid> {
    if kernel.channels() != grid.dim() {
        return Err(Error::Shape(format!(
            "kernel has {} channels, grid has {}",
            kernel.channels(),
            grid.dim()
        )));
    }
    let (h, w, d) = (grid.height(), grid.width(), grid.dim());
    let half = (kernel.size() / 2) as isize;
    let mut out = FeatureGrid::zeros(grid.shape, d);
    for y in 0..h {
        for x in 0..w {
            let o = out.tokens.row_mut(y * w + x);
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
                    let src = grid.tokens.row(sy as usize * w + sx as usize);
                    let (ky, kx) = ((dy + half) as usize, (dx + half) as usize);
                    for c in 0..d {
                        o[c] += kernel.at(c, ky, kx) * src[c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations.
///
/// Returns eigenvalues in ascending order and the matching unit
/// eigenvectors as the columns of the second matrix.
pub fn sym_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.frobenius_norm();
    if n > 0 {
        for i in 0..n {
            for j in (i + 1)..n {
                if (a.get(i, j) - a.get(j, i)).abs() > 1e-9 * scale.max(1.0) {
                    return Err(Error::Shape(format!(
                        "matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
    }
    // Work on the symmetrised copy.
    let mut m = Mat::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Mat::identity(n);
    let tiny = f64::EPSILON * f64::EPSILON * scale * scale;

    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        Mat::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]])
            .unwrap();
        assert_eq!(matmul(&Mat::identity(3), &a).unwrap(), a);

        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 5, 4);
        let b = random_mat(&mut rng, 4, 3);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        for n in [1, 7, 33, 64] {
            let a = random_mat(&mut rng, n, n);
            let b = random_mat(&mut rng, n, n);
            let want = naive_matmul(&a, &b);
            let got = matmul(&a, &b).unwrap();
            let rel = got.max_abs_diff(&want) / want.frobenius_norm().max(1.0);
            assert!(rel < 1e-12, "n={n} rel={rel}");
            assert!(matmul_bt(&a, &b.transpose()).unwrap().max_abs_diff(&want) < 1e-12);
            assert!(matmul_at(&a.transpose(), &b).unwrap().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Mat::from_rows(&[vec![3.7], vec![-2.0]]).unwrap(), 1.0);
        assert_eq!(s.data(), &[1.0, 1.0]);

        let s = row_softmax(&Mat::from_rows(&[vec![0.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = row_softmax(
            &Mat::from_rows(&[vec![1f64.ln(), 3f64.ln()]]).unwrap(),
            1.0,
        );
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_stochastic_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_mat(&mut rng, 6, 9).scale(20.0);
            let s = row_softmax(&a, 0.7);
            for row in s.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
            }
            let shift: f64 = rng.gen_range(-50.0..50.0);
            let shifted = row_softmax(&a.map(|x| x + shift), 0.7);
            assert!(s.max_abs_diff(&shifted) < 1e-12);
        }
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let a = Mat::from_rows(&[vec![1e300, -1e300, 0.0]]).unwrap();
        let s = row_softmax(&a, 1.0);
        assert!(s.is_finite());
        assert_eq!(s.get(0, 0), 1.0);
    }

    fn ones_grid(h: usize, w: usize, d: usize) -> FeatureGrid {
        let shape = GridShape::new(h, w).unwrap();
        FeatureGrid::new(shape, Mat::from_fn(h * w, d, |_, _| 1.0)).unwrap()
    }

    #[test]
    fn dwconv_delta_is_identity_and_zero_kernel_zeroes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = GridShape::new(4, 5).unwrap();
        let g = FeatureGrid::new(shape, random_mat(&mut rng, 20, 3)).unwrap();
        for k in [1, 3, 5] {
            let out = depthwise_conv2d(&g, &DwKernel::delta(k, 3).unwrap()).unwrap();
            assert_eq!(out, g);
        }
        let out = depthwise_conv2d(&g, &DwKernel::zeros(3, 3).unwrap()).unwrap();
        assert!(out.tokens.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dwconv_unit_kernel_on_ones() {
        let g = ones_grid(3, 3, 1);
        let k = DwKernel::new(3, 1, vec![1.0; 9]).unwrap();
        let out = depthwise_conv2d(&g, &k).unwrap();
        assert_eq!(out.get(1, 1, 0), 9.0);
        for (x, y) in [(0, 0), (2, 0), (0, 2), (2, 2)] {
            assert_eq!(out.get(x, y, 0), 4.0);
        }
        assert_eq!(out.get(1, 0, 0), 6.0);

        let k = DwKernel::new(3, 1, vec![1.0 / 9.0; 9]).unwrap();
        let out = depthwise_conv2d(&g, &k).unwrap();
        assert!((out.get(1, 1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dwconv_channels_are_independent() {
        // Channel 1 of the kernel is zero, so channel 1 of the output must be.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = FeatureGrid::new(GridShape::new(3, 3).unwrap(), random_mat(&mut rng, 9, 2))
            .unwrap();
        let mut k = DwKernel::zeros(3, 2).unwrap();
        for w in &mut k.weights_mut()[..9] {
            *w = 0.5;
        }
        let out = depthwise_conv2d(&g, &k).unwrap();
        for t in 0..9 {
            assert_eq!(out.tokens.get(t, 1), 0.0);
        }
    }

    #[test]
    fn dwconv_even_kernel_rejected() {
        assert!(matches!(DwKernel::zeros(2, 1), Err(Error::Config(_))));
        let g = ones_grid(2, 2, 2);
        assert!(matches!(
            depthwise_conv2d(&g, &DwKernel::zeros(3, 1).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grid_indexing_bijection() {
        let s = GridShape::new(3, 7).unwrap();
        for idx in 0..s.len() {
            let (x, y) = s.coords(idx);
            assert_eq!(s.index(x, y), idx);
        }
        assert!(GridShape::new(0, 1).is_err());
    }

    #[test]
    fn eigen_diagonal_and_2x2() {
        let d = Mat::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]])
            .unwrap();
        let (vals, _) = sym_eigen(&d).unwrap();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);

        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let v0 = [vecs.get(0, 0), vecs.get(1, 0)];
        assert!((v0[0] + v0[1]).abs() < 1e-14);
    }

    #[test]
    fn eigen_residual_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=9 {
            let b = random_mat(&mut rng, n, n);
            let a = matmul(&b, &b.transpose()).unwrap().add(&b.add(&b.transpose()).unwrap()).unwrap();
            let (vals, vecs) = sym_eigen(&a).unwrap();
            let norm = a.frobenius_norm();
            for i in 0..n {
                let v: Vec<f64> = (0..n).map(|r| vecs.get(r, i)).collect();
                let av: Vec<f64> = (0..n).map(|r| dot(a.row(r), &v)).collect();
                let res: f64 = av
                    .iter()
                    .zip(&v)
                    .map(|(x, y)| (x - vals[i] * y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(res <= 1e-8 * norm.max(1.0), "n={n} residual {res}");
            }
            let vtv = matmul_at(&vecs, &vecs).unwrap();
            assert!(vtv.max_abs_diff(&Mat::identity(n)) < 1e-8);
            let lam = Mat::from_fn(n, n, |i, j| if i == j { vals[i] } else { 0.0 });
            let rec = matmul(&matmul(&vecs, &lam).unwrap(), &vecs.transpose()).unwrap();
            assert!(rec.max_abs_diff(&a) < 1e-8);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn eigen_rejects_non_square() {
        assert!(matches!(sym_eigen(&Mat::zeros(2, 3)), Err(Error::Shape(_))));
    }
}
