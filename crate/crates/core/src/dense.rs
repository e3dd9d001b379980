//! Dense row-major matrices and the closed-form kernels used by the
//! contrastive loss: matmul, row softmax, mean cross-entropy with its
//! backward, and row L2 normalization with its backward.
//!
//! Every kernel here is a pure function of its inputs. Work that should be
//! accounted for goes through [`InstrumentCounters`], which wraps the
//! allocating kernels and tracks FLOPs and live buffer elements.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Minimum row norm accepted by [`l2_normalize_rows`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Real scalar type carried by [`DenseMatrix`].
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + Send + Sync + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    fn from_f64(value: f64) -> Self;

    fn to_f64(self) -> f64;

    fn from_usize(value: usize) -> Self {
        Self::from_f64(value as f64)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn from_f64(value: f64) -> Self {
        value
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn from_f64(value: f64) -> Self {
        value as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Row-major 2-D array of real scalars.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        let m = Self { rows, cols, data };
        m.ensure_finite()?;
        Ok(m)
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of stored elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of a matrix with {} rows", self.rows),
            ));
        }
        Ok(Self::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {i} of a matrix with {} rows", self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::from_vec_unchecked(indices.len(), self.cols, data))
    }

    /// Stacks matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("mixed column counts {cols} and {}", p.cols),
                ));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for x in &mut self.data {
            *x = *x * factor;
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += factor * y;
        }
        Ok(())
    }

    /// Adds `other` into rows `[start, start + other.rows)`.
    pub fn add_into_rows(&mut self, start: usize, other: &Self) -> Result<()> {
        if other.cols != self.cols || start + other.rows > self.rows {
            return Err(Error::shape(
                "add_into_rows",
                format!(
                    "{}x{} block at row {start} of a {}x{} matrix",
                    other.rows, other.cols, self.rows, self.cols
                ),
            ));
        }
        let offset = start * self.cols;
        for (x, &y) in self.data[offset..offset + other.data.len()]
            .iter_mut()
            .zip(&other.data)
        {
            *x += y;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Normwise relative error `max|self - reference| / max|reference|`.
    /// Falls back to the absolute error when the reference is all zero.
    pub fn rel_error(&self, reference: &Self) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?.to_f64();
        let scale = reference.max_abs().to_f64();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    /// Mixed error `max|self - reference| / max(max|reference|, floor)`.
    /// With `floor = 1` this is an absolute error for gradients whose true
    /// value is (numerically) zero and a relative error otherwise.
    pub fn scaled_error(&self, reference: &Self, floor: f64) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?.to_f64();
        Ok(diff / reference.max_abs().to_f64().max(floor))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
        }
    }

    /// Lossy conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        )
    }

    fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Debug> Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

/// Matrix product `a · b`, or `a · bᵀ` when `transpose_b` is set.
///
/// Each output entry accumulates its inner products in ascending index
/// order starting from zero, the same order as a textbook triple loop.
pub fn matmul<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    transpose_b: bool,
) -> Result<DenseMatrix<T>> {
    let (m, k) = a.shape();
    if transpose_b {
        let (n, kb) = b.shape();
        if k != kb {
            return Err(Error::shape("matmul", format!("{m}x{k} times ({n}x{kb})ᵀ")));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = a.row(i);
            for j in 0..n {
                let br = b.row(j);
                let mut acc = T::zero();
                for l in 0..k {
                    acc += ar[l] * br[l];
                }
                out.push(acc);
            }
        }
        Ok(DenseMatrix::from_vec_unchecked(m, n, out))
    } else {
        let (kb, n) = b.shape();
        if k != kb {
            return Err(Error::shape("matmul", format!("{m}x{k} times {kb}x{n}")));
        }
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            let ar = a.row(i);
            let orow = out.row_mut(i);
            for (l, &av) in ar.iter().enumerate() {
                let br = b.row(l);
                for (o, &bv) in orow.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }
}

/// Matrix product `aᵀ · b` without materializing the transpose.
pub fn matmul_at<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let (k, m) = a.shape();
    let (kb, n) = b.shape();
    if k != kb {
        return Err(Error::shape(
            "matmul_at",
            format!("({k}x{m})ᵀ times {kb}x{n}"),
        ));
    }
    let mut out = DenseMatrix::zeros(m, n);
    for l in 0..k {
        let ar = a.row(l);
        let br = b.row(l);
        for (i, &av) in ar.iter().enumerate() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = values.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn row_softmax<T: Scalar>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}

fn check_labels<T: Scalar>(logits: &DenseMatrix<T>, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            classes: logits.cols(),
        });
    }
    Ok(())
}

/// Mean over rows of `-log softmax(row)[label]`.
pub fn cross_entropy_mean<T: Scalar>(logits: &DenseMatrix<T>, labels: &[usize]) -> Result<T> {
    check_labels(logits, labels)?;
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row.iter().copied()) - row[label];
    }
    Ok(total / T::from_usize(logits.rows()))
}

/// Gradient of [`cross_entropy_mean`] with respect to the logits:
/// `(softmax(logits) - onehot(labels)) / m`.
pub fn softmax_ce_grad<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<DenseMatrix<T>> {
    check_labels(logits, labels)?;
    let inv_m = T::one() / T::from_usize(logits.rows());
    let mut grad = row_softmax(logits);
    for (i, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        for x in row.iter_mut() {
            *x = *x * inv_m;
        }
        row[label] -= inv_m;
    }
    Ok(grad)
}

/// Fused mean cross-entropy and backward that reuses the logits buffer.
///
/// Returns the mean loss and overwrites `logits` with
/// `scale · (softmax(logits) - onehot(labels)) / m`.
pub fn softmax_xent_in_place<T: Scalar>(
    logits: &mut DenseMatrix<T>,
    labels: &[usize],
    scale: T,
) -> Result<T> {
    check_labels(logits, labels)?;
    let m = logits.rows();
    let step = scale / T::from_usize(m);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row_mut(i);
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[label];
        for x in row.iter_mut() {
            *x = (*x - lse).exp() * step;
        }
        row[label] -= step;
    }
    Ok(total / T::from_usize(m))
}

/// Euclidean norm of row `i`, rescaled by the largest magnitude when the
/// plain sum of squares overflows. Rejects non-finite entries and norms
/// below [`NORM_EPSILON`].
fn row_norm<T: Scalar>(row: &[T], i: usize) -> Result<T> {
    if let Some(col) = row.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { row: i, col });
    }
    let mut norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm.is_infinite() {
        let scale = row.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        norm = scale
            * row
                .iter()
                .map(|&x| (x / scale) * (x / scale))
                .sum::<T>()
                .sqrt();
    }
    if !(norm >= T::from_f64(NORM_EPSILON)) {
        return Err(Error::Degenerate {
            row: i,
            norm: norm.to_f64(),
            epsilon: NORM_EPSILON,
        });
    }
    Ok(norm)
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows<T: Scalar>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let norm = row_norm(m.row(i), i)?;
        let row = out.row_mut(i);
        for x in row.iter_mut() {
            *x = *x / norm;
        }
    }
    Ok(out)
}

/// Backward of [`l2_normalize_rows`]: for each row `x` with upstream `g`,
/// returns `(g - (x̂·g) x̂) / ‖x‖`.
pub fn l2_normalize_rows_backward<T: Scalar>(
    m: &DenseMatrix<T>,
    upstream: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    if m.shape() != upstream.shape() {
        return Err(Error::shape(
            "l2_normalize_rows_backward",
            format!("input {:?} vs upstream {:?}", m.shape(), upstream.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let x = m.row(i);
        let g = upstream.row(i);
        let norm = row_norm(x, i)?;
        let proj = x.iter().zip(g).map(|(&xv, &gv)| xv * gv).sum::<T>() / norm;
        for ((o, &xv), &gv) in out.row_mut(i).iter_mut().zip(x).zip(g) {
            *o = (gv - proj * xv / norm) / norm;
        }
    }
    Ok(out)
}

/// FLOP and live-element accounting for one measurement scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InstrumentCounters {
    pub flops_accumulated: u64,
    pub peak_live_elements: u64,
    pub live_elements: u64,
}

impl InstrumentCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_flops(&mut self, flops: u64) {
        self.flops_accumulated += flops;
    }

    pub fn alloc(&mut self, elements: usize) {
        self.live_elements += elements as u64;
        self.peak_live_elements = self.peak_live_elements.max(self.live_elements);
    }

    pub fn release(&mut self, elements: usize) {
        debug_assert!(self.live_elements >= elements as u64, "release below zero");
        self.live_elements = self.live_elements.saturating_sub(elements as u64);
    }

    /// Counted [`matmul`]: adds `2·m·k·n` FLOPs and tracks the output buffer.
    pub fn matmul<T: Scalar>(
        &mut self,
        a: &DenseMatrix<T>,
        b: &DenseMatrix<T>,
        transpose_b: bool,
    ) -> Result<DenseMatrix<T>> {
        let out = matmul(a, b, transpose_b)?;
        self.add_flops(2 * (a.rows() * a.cols() * out.cols()) as u64);
        self.alloc(out.len());
        Ok(out)
    }

    /// Counted [`matmul_at`].
    pub fn matmul_at<T: Scalar>(
        &mut self,
        a: &DenseMatrix<T>,
        b: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        let out = matmul_at(a, b)?;
        self.add_flops(2 * (a.rows() * a.cols() * b.cols()) as u64);
        self.alloc(out.len());
        Ok(out)
    }

    /// Merges a sibling scope: FLOPs add, peaks take the maximum.
    pub fn merge(&mut self, other: &Self) {
        self.flops_accumulated += other.flops_accumulated;
        self.live_elements += other.live_elements;
        self.peak_live_elements = self
            .peak_live_elements
            .max(other.peak_live_elements)
            .max(self.live_elements);
    }
}

/// Per-worker counters split into the loss scope (similarity logits and
/// their gradients) and the exchange scope (gathered features and B×D
/// feature-gradient buffers).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Meter {
    pub loss: InstrumentCounters,
    pub exchange: InstrumentCounters,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for l in 0..a.cols() {
                    acc += a.get(i, l) * b.get(l, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn central_diff(f: impl Fn(&DenseMatrix) -> f64, x: &DenseMatrix, h: f64) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for p in 0..x.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[p] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[p] -= h;
            out.as_mut_slice()[p] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = DenseMatrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &m, false).unwrap(), m);

        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        let expected = DenseMatrix::from_rows(&[[19.0, 22.0], [43.0, 50.0]]);
        assert_eq!(matmul(&a, &b, false).unwrap(), expected);
        assert_eq!(matmul(&a, &b.transpose(), true).unwrap(), expected);
        assert_eq!(matmul_at(&a.transpose(), &b).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(5, 3, 1);
        let b = random(3, 4, 2);
        let reference = naive_matmul(&a, &b);
        assert_eq!(matmul(&a, &b, false).unwrap(), reference);
        assert!(
            matmul(&a, &b.transpose(), true)
                .unwrap()
                .rel_error(&reference)
                .unwrap()
                <= 1e-15
        );
        assert!(
            matmul_at(&a.transpose(), &b)
                .unwrap()
                .rel_error(&reference)
                .unwrap()
                <= 1e-15
        );
    }

    #[test]
    fn matmul_shape_error() {
        let a = random(2, 3, 0);
        assert!(matches!(matmul(&a, &a, false), Err(Error::Shape { .. })));
        assert!(matmul(&a, &a, true).is_ok());
        assert!(matmul_at(&a, &random(3, 2, 0)).is_err());
    }

    #[test]
    fn counted_matmul_flops() {
        let mut c = InstrumentCounters::new();
        let a = random(5, 3, 3);
        let b = random(3, 4, 4);
        let out = c.matmul(&a, &b, false).unwrap();
        assert_eq!(c.flops_accumulated, 2 * 5 * 3 * 4);
        assert_eq!(c.live_elements, 20);
        c.release(out.len());
        let _ = c.matmul_at(&b, &random(3, 6, 5)).unwrap();
        assert_eq!(c.flops_accumulated, 2 * 5 * 3 * 4 + 2 * 4 * 3 * 6);
        assert_eq!(c.live_elements, 24);
        assert_eq!(c.peak_live_elements, 24);
    }

    #[test]
    fn softmax_cases() {
        let s = row_softmax(&DenseMatrix::from_rows(&[[0.0, 0.0, 0.0]]));
        for &p in s.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = row_softmax(&DenseMatrix::from_rows(&[[1000.0, 0.0]]));
        assert!(s.as_slice().iter().all(|x| x.is_finite()));
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(0, 1) < 1e-300);

        let s = row_softmax(&random(4, 6, 9));
        for i in 0..4 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = DenseMatrix::from_rows(&[[0.7; 5], [0.7; 5]]);
        let l = cross_entropy_mean(&uniform, &[3, 0]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-14);

        let id = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = cross_entropy_mean(&id, &[0, 1]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326169).abs() < 1e-8);

        let logits = random(3, 5, 11);
        let labels = [4, 0, 2];
        let mut expected = 0.0;
        for i in 0..3 {
            let denom: f64 = (0..5).map(|j| logits.get(i, j).exp()).sum();
            expected += -(logits.get(i, labels[i]).exp() / denom).ln();
        }
        expected /= 3.0;
        assert!((cross_entropy_mean(&logits, &labels).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_label_errors() {
        let logits = random(2, 3, 0);
        assert!(matches!(
            cross_entropy_mean(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange {
                row: 1,
                label: 3,
                classes: 3
            })
        ));
        assert!(softmax_ce_grad(&logits, &[0]).is_err());
    }

    #[test]
    fn softmax_ce_grad_cases() {
        let g = softmax_ce_grad(&DenseMatrix::from_rows(&[[0.0, 0.0]]), &[0]).unwrap();
        // P = [1/2, 1/2] minus onehot(0), divided by m = 1.
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);

        let logits = random(4, 4, 21);
        let labels = [1, 3, 0, 2];
        let g = softmax_ce_grad(&logits, &labels).unwrap();
        for i in 0..4 {
            let s: f64 = g.row(i).iter().sum();
            assert!(s.abs() <= 1e-12);
        }
        let fd = central_diff(|x| cross_entropy_mean(x, &labels).unwrap(), &logits, 1e-6);
        assert!(g.rel_error(&fd).unwrap() <= 1e-6);
    }

    #[test]
    fn fused_xent_matches_separate_kernels() {
        let logits = random(5, 7, 33);
        let labels = [0, 6, 3, 3, 1];
        let mut buf = logits.clone();
        let loss = softmax_xent_in_place(&mut buf, &labels, 0.5).unwrap();
        assert!((loss - cross_entropy_mean(&logits, &labels).unwrap()).abs() < 1e-15);
        let mut expected = softmax_ce_grad(&logits, &labels).unwrap();
        expected.scale_in_place(0.5);
        assert!(buf.max_abs_diff(&expected).unwrap() < 1e-16);
    }

    #[test]
    fn normalize_cases() {
        let big = l2_normalize_rows(&DenseMatrix::from_rows(&[[3e200, 4e200]])).unwrap();
        assert!(
            big.max_abs_diff(&DenseMatrix::from_rows(&[[0.6, 0.8]]))
                .unwrap()
                < 1e-15
        );
        assert!(matches!(
            l2_normalize_rows(&DenseMatrix::from_vec_unchecked(
                1,
                2,
                vec![1.0, f64::INFINITY]
            )),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let n = l2_normalize_rows(&DenseMatrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-16 && (n.get(0, 1) - 0.8).abs() < 1e-16);

        let unit = DenseMatrix::from_rows(&[[1.0, 0.0], [0.6, 0.8]]);
        assert!(
            l2_normalize_rows(&unit)
                .unwrap()
                .max_abs_diff(&unit)
                .unwrap()
                < 1e-16
        );

        let zero = DenseMatrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        assert!(matches!(
            l2_normalize_rows(&zero),
            Err(Error::Degenerate { row: 1, .. })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = random(3, 4, 5);
        let upstream = random(3, 4, 6);
        let f = |m: &DenseMatrix| {
            let n = l2_normalize_rows(m).unwrap();
            n.as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let fd = central_diff(f, &x, 1e-6);
        let g = l2_normalize_rows_backward(&x, &upstream).unwrap();
        assert!(g.rel_error(&fd).unwrap() <= 1e-6);
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_reference(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed: u64) {
            let a = random(m, k, seed);
            let b = random(k, n, seed.wrapping_add(1));
            let reference = naive_matmul(&a, &b);
            prop_assert!(matmul(&a, &b, false).unwrap().rel_error(&reference).unwrap() <= 1e-12);
            prop_assert!(matmul(&a, &b.transpose(), true).unwrap().rel_error(&reference).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..8, cols in 1usize..16, shift in -50.0f64..50.0, seed: u64
        ) {
            let m = random(rows, cols, seed).map(|x| 20.0 * x);
            let s = row_softmax(&m);
            for i in 0..rows {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let shifted = row_softmax(&m.map(|x| x + shift));
            prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_ce_grad_matches_finite_differences(
            m in 1usize..=16, n in 1usize..=16, seed: u64
        ) {
            let logits = random(m, n, seed).map(|x| 3.0 * x);
            let labels: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % n).collect();
            let g = softmax_ce_grad(&logits, &labels).unwrap();
            let fd = central_diff(|x| cross_entropy_mean(x, &labels).unwrap(), &logits, 1e-6);
            prop_assert!(g.rel_error(&fd).unwrap() <= 1e-6);
        }
    }
}
