//! Dense numeric kernels: affine maps, masked softmax, multi-head attention
//! that exposes its (head-averaged) weights, and layer normalization.
//!
//! Everything is row-major and allocation-light. Shapes are validated at the
//! public boundary and reported as [`Error::Dimension`].

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} elements cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
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

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, so a zero-width matrix yields empty rows.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Returns the matrix whose row `k` is row `perm[k]` of `self`.
    pub fn select_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(perm.len(), self.cols);
        for (k, &src) in perm.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

const LANES: usize = 8;

#[inline(always)]
fn lanes<T: Copy>(c: &[T]) -> &[T; LANES] {
    c.try_into().expect("chunk of LANES")
}

#[inline(always)]
fn reduce<T: Real>(a: &[T; LANES], tail: T) -> T {
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let mut acc = [T::zero(); LANES];
    for (x, y) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
        let (x, y) = (lanes(x), lanes(y));
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[full..n].iter().zip(&b[full..n]) {
        tail += x * y;
    }
    reduce(&acc, tail)
}

/// Four dot products sharing the left operand, `[<w, x_k>]`. Each result
/// sums in the same order as [`dot`], so the two agree bit for bit.
#[inline]
pub fn dot4<T: Real>(w: &[T], x: [&[T]; 4]) -> [T; 4] {
    let n = w.len();
    let full = n / LANES * LANES;
    let x = x.map(|r| &r[..n]);
    let mut acc = [[T::zero(); LANES]; 4];
    for c in 0..full / LANES {
        let span = c * LANES..(c + 1) * LANES;
        let wc = lanes(&w[span.clone()]);
        for (a, xr) in acc.iter_mut().zip(&x) {
            let xc = lanes(&xr[span.clone()]);
            for l in 0..LANES {
                a[l] += wc[l] * xc[l];
            }
        }
    }
    let mut out = [T::zero(); 4];
    for (k, acc) in acc.iter().enumerate() {
        let mut tail = T::zero();
        for (&wv, &xv) in w[full..].iter().zip(&x[k][full..]) {
            tail += wv * xv;
        }
        out[k] = reduce(acc, tail);
    }
    out
}

/// `out[i][r] = <x_i, w_r> + b_r` over row blocks of `x` and `w`, so that a
/// tile of `w` stays in cache while every row of `x` passes over it.
fn affine_rows_into<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T], out: &mut Matrix<T>) {
    const W_TILE: usize = 32;
    let (n, out_dim) = (x.rows(), w.rows());
    for r0 in (0..out_dim).step_by(W_TILE) {
        let r1 = (r0 + W_TILE).min(out_dim);
        let mut i = 0;
        while i + 4 <= n {
            let xs = [x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3)];
            for r in r0..r1 {
                let v = dot4(w.row(r), xs);
                for (k, vk) in v.into_iter().enumerate() {
                    out.data[(i + k) * out_dim + r] = vk + b[r];
                }
            }
            i += 4;
        }
        for i in i..n {
            for r in r0..r1 {
                out.data[i * out_dim + r] = dot(w.row(r), x.row(i)) + b[r];
            }
        }
    }
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Returns `W x + b` where `W` is `out x in`.
pub fn affine<T: Real>(x: &[T], w: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::Dimension(format!(
            "affine: W is {:?}, x has {} entries, b has {}",
            w.shape(),
            x.len(),
            b.len()
        )));
    }
    Ok(w.iter_rows()
        .zip(b)
        .map(|(row, &bias)| dot(row, x) + bias)
        .collect())
}

/// Fully connected layer stored as `weight: out x in` plus `bias: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![T::zero(); n],
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        affine(x, &self.weight, &self.bias)
    }

    /// Applies the layer to every row of `x`.
    pub fn forward_rows(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "linear expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        affine_rows_into(x, &self.weight, &self.bias, &mut out);
        Ok(out)
    }

    /// `Wᵀ y`: pulls a vector in output space back to input space (bias ignored).
    pub fn transpose_apply(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.input_dim()];
        for (wr, &yi) in self.weight.iter_rows().zip(y) {
            axpy(yi, wr, &mut out);
        }
        out
    }
}

/// Layer normalization over the last axis with affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let n = T::of_usize(x.len());
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
        x.iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((&v, &g), &b)| (v - mean) * inv * g + b)
            .collect()
    }

    pub fn apply_rows(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = x.clone();
        for r in 0..x.rows() {
            let y = self.apply(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }
}

#[inline]
pub fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Dense `rows x cols` attention mask over {open, blocked}. A blocked entry
/// behaves as an additive negative infinity: it never enters max-subtraction
/// or exponentiation, so its post-softmax weight is exactly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from blocked flags. Every row must keep one open entry.
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask of {rows}x{cols} given {} flags",
                blocked.len()
            )));
        }
        let mask = Self {
            rows,
            cols,
            blocked,
        };
        if let Some(r) = (0..rows).find(|&r| mask.row(r).iter().all(|&b| b)) {
            return Err(Error::Contract(format!("mask row {r} is fully blocked")));
        }
        Ok(mask)
    }

    pub fn open(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
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
    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[bool] {
        &self.blocked[r * self.cols..(r + 1) * self.cols]
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        let mut blocked = vec![false; n * n];
        for (a, &pa) in perm.iter().enumerate() {
            for (b, &pb) in perm.iter().enumerate() {
                blocked[a * n + b] = self.is_blocked(pa, pb);
            }
        }
        Self {
            rows: n,
            cols: n,
            blocked,
        }
    }
}

/// Softmax over the open entries of `logits`; blocked entries come out as
/// exact zeros.
pub fn masked_softmax<T: Real>(logits: &[T], blocked: &[bool]) -> Result<Vec<T>> {
    if logits.len() != blocked.len() {
        return Err(Error::Dimension(format!(
            "{} logits against {} mask entries",
            logits.len(),
            blocked.len()
        )));
    }
    let mut out = vec![T::zero(); logits.len()];
    masked_softmax_into(logits, blocked, &mut out)?;
    Ok(out)
}

fn masked_softmax_into<T: Real>(logits: &[T], blocked: &[bool], out: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&l, &b) in logits.iter().zip(blocked) {
        if !b {
            any = true;
            if l > max {
                max = l;
            }
        }
    }
    if !any {
        return Err(Error::Contract("softmax over a fully blocked row".into()));
    }
    let mut total = T::zero();
    for ((o, &l), &b) in out.iter_mut().zip(logits).zip(blocked) {
        *o = if b { T::zero() } else { (l - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Plain softmax (no mask), max-stabilized.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Projection tensors of one multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Real> MhaWeights<T> {
    pub fn zeros(d: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn identity(d: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::identity(d),
            key: Linear::identity(d),
            value: Linear::identity(d),
            output: Linear::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.output_dim()
    }
}

/// Scaled dot-product attention per head with the mask applied before the
/// softmax. Returns the output projected back to `d` together with the
/// post-softmax weights averaged over heads (each row sums to one).
pub fn multi_head_attention<T: Real>(
    q_in: &Matrix<T>,
    k_in: &Matrix<T>,
    v_in: &Matrix<T>,
    mask: &AttentionMask,
    weights: &MhaWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let d = weights.dim();
    let heads = weights.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide model width {d}"
        )));
    }
    if k_in.rows() != v_in.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but {} values",
            k_in.rows(),
            v_in.rows()
        )));
    }
    if mask.rows() != q_in.rows() || mask.cols() != k_in.rows() {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, attention is {}x{}",
            mask.rows(),
            mask.cols(),
            q_in.rows(),
            k_in.rows()
        )));
    }
    let qp = weights.query.forward_rows(q_in)?;
    let kp = weights.key.forward_rows(k_in)?;
    let vp = weights.value.forward_rows(v_in)?;

    let n = q_in.rows();
    let m = k_in.rows();
    let hd = d / heads;
    let scale = T::one() / T::of_usize(hd).sqrt();
    let inv_heads = T::one() / T::of_usize(heads);

    let mut ctx = Matrix::zeros(n, d);
    let mut attn = Matrix::zeros(n, m);
    let mut logits = vec![vec![T::zero(); m]; 4];
    let mut probs = vec![T::zero(); m];
    let mut kh = Matrix::zeros(m, hd);
    let mut vh = Matrix::zeros(m, hd);
    for h in 0..heads {
        let span = h * hd..(h + 1) * hd;
        // Contiguous per-head keys and values keep the inner loops in cache.
        for j in 0..m {
            kh.row_mut(j).copy_from_slice(&kp.row(j)[span.clone()]);
            vh.row_mut(j).copy_from_slice(&vp.row(j)[span.clone()]);
        }
        let mut i0 = 0;
        while i0 < n {
            let rows = (n - i0).min(4);
            if rows == 4 {
                let qs = [0, 1, 2, 3].map(|k| &qp.row(i0 + k)[span.clone()]);
                let masks = [0, 1, 2, 3].map(|k| mask.row(i0 + k));
                for j in 0..m {
                    if masks.iter().all(|b| b[j]) {
                        continue;
                    }
                    let v = dot4(kh.row(j), qs);
                    for k in 0..4 {
                        logits[k][j] = v[k];
                    }
                }
            } else {
                for k in 0..rows {
                    let qi = &qp.row(i0 + k)[span.clone()];
                    for j in 0..m {
                        logits[k][j] = dot(kh.row(j), qi);
                    }
                }
            }
            for (k, lrow) in logits.iter_mut().enumerate().take(rows) {
                let i = i0 + k;
                let blocked = mask.row(i);
                for (l, &b) in lrow.iter_mut().zip(blocked) {
                    *l = if b { T::zero() } else { *l * scale };
                }
                masked_softmax_into(lrow, blocked, &mut probs)?;
                let ctx_row = &mut ctx.row_mut(i)[span.clone()];
                for j in 0..m {
                    if !blocked[j] {
                        axpy(probs[j], vh.row(j), ctx_row);
                    }
                }
                for (a, &p) in attn.row_mut(i).iter_mut().zip(&probs) {
                    *a += p * inv_heads;
                }
            }
            i0 += rows;
        }
    }
    let out = weights.output.forward_rows(&ctx)?;
    Ok((out, attn))
}
