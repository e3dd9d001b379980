//! Full-batch bidirectional contrastive loss and its closed-form gradients,
//! computed on a single worker. This is the reference every decomposed
//! result is checked against.
//!
//! With `S = t · I · Tᵀ` (B×B) and diagonal labels, the loss is
//! `(CE(S) + CE(Sᵀ)) / 2`. The text-to-image direction reads `S` through
//! column statistics instead of a transposed copy, and the gradient with
//! respect to `S`,
//!
//! ```text
//! ∂L/∂S = ½ · ((softmax_rows(S) − Id) + (softmax_cols(S) − Id)) / B
//! ```
//!
//! overwrites `S` in place, so the loss scope never holds more than one
//! B×B buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dense::{l2_normalize_rows, DenseMatrix, InstrumentCounters, Meter, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Image,
    Text,
}

/// A B×D matrix of unit-norm feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T = f64> {
    features: DenseMatrix<T>,
    role: Role,
}

impl<T: Scalar> FeatureBatch<T> {
    /// Wraps already-normalized features, checking every row norm.
    pub fn new(features: DenseMatrix<T>, role: Role) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::shape(
                "FeatureBatch::new",
                format!("empty {}x{} batch", features.rows(), features.cols()),
            ));
        }
        let tol = unit_norm_tolerance::<T>();
        for i in 0..features.rows() {
            let norm = features
                .row(i)
                .iter()
                .map(|&x| x * x)
                .sum::<T>()
                .sqrt()
                .to_f64();
            if (norm - 1.0).abs() > tol {
                return Err(Error::Domain(format!(
                    "feature row {i} has norm {norm}, expected 1 ± {tol:e}"
                )));
            }
        }
        Ok(Self { features, role })
    }

    /// Normalizes raw rows and wraps them.
    pub fn normalize(raw: &DenseMatrix<T>, role: Role) -> Result<Self> {
        Self::new(l2_normalize_rows(raw)?, role)
    }

    pub fn features(&self) -> &DenseMatrix<T> {
        &self.features
    }

    pub fn into_features(self) -> DenseMatrix<T> {
        self.features
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn batch(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

fn unit_norm_tolerance<T: Scalar>() -> f64 {
    (100.0 * T::epsilon().to_f64()).max(1e-9)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T = f64> {
    pub total: T,
    pub image_to_text: T,
    pub text_to_image: T,
    pub temperature: T,
}

/// Loss together with `∂L/∂I` and `∂L/∂T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair<T = f64> {
    pub d_image: DenseMatrix<T>,
    pub d_text: DenseMatrix<T>,
    pub loss: LossBreakdown<T>,
}

pub(crate) fn check_temperature<T: Scalar>(t: T) -> Result<()> {
    if t > T::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn check_pair<T: Scalar>(image: &DenseMatrix<T>, text: &DenseMatrix<T>) -> Result<()> {
    if image.shape() != text.shape() || image.is_empty() {
        return Err(Error::shape(
            "clip_loss",
            format!("image {:?} vs text {:?}", image.shape(), text.shape()),
        ));
    }
    Ok(())
}

/// Row and column log-sum-exp of a square matrix, in one pass order that
/// never copies the matrix.
fn row_col_lse<T: Scalar>(s: &DenseMatrix<T>) -> (Vec<T>, Vec<T>) {
    let n = s.cols();
    let mut row_max = vec![T::neg_infinity(); s.rows()];
    let mut col_max = vec![T::neg_infinity(); n];
    for i in 0..s.rows() {
        for (j, &x) in s.row(i).iter().enumerate() {
            row_max[i] = row_max[i].max(x);
            col_max[j] = col_max[j].max(x);
        }
    }
    let mut row_sum = vec![T::zero(); s.rows()];
    let mut col_sum = vec![T::zero(); n];
    for i in 0..s.rows() {
        for (j, &x) in s.row(i).iter().enumerate() {
            row_sum[i] += (x - row_max[i]).exp();
            col_sum[j] += (x - col_max[j]).exp();
        }
    }
    let row = row_max
        .iter()
        .zip(&row_sum)
        .map(|(&m, &s)| m + s.ln())
        .collect();
    let col = col_max
        .iter()
        .zip(&col_sum)
        .map(|(&m, &s)| m + s.ln())
        .collect();
    (row, col)
}

fn similarity<T: Scalar>(
    image: &DenseMatrix<T>,
    text: &DenseMatrix<T>,
    temperature: T,
    counters: &mut InstrumentCounters,
) -> Result<DenseMatrix<T>> {
    let mut s = counters.matmul(image, text, true)?;
    s.scale_in_place(temperature);
    Ok(s)
}

fn breakdown<T: Scalar>(
    s: &DenseMatrix<T>,
    row_lse: &[T],
    col_lse: &[T],
    t: T,
) -> LossBreakdown<T> {
    let b = T::from_usize(s.rows());
    let mut l1 = T::zero();
    let mut l2 = T::zero();
    for i in 0..s.rows() {
        l1 += row_lse[i] - s.get(i, i);
        l2 += col_lse[i] - s.get(i, i);
    }
    let (l1, l2) = (l1 / b, l2 / b);
    LossBreakdown {
        total: (l1 + l2) / T::from_f64(2.0),
        image_to_text: l1,
        text_to_image: l2,
        temperature: t,
    }
}

/// Loss on raw feature matrices; rows need not be normalized.
pub fn clip_loss_matrices<T: Scalar>(
    image: &DenseMatrix<T>,
    text: &DenseMatrix<T>,
    temperature: T,
) -> Result<LossBreakdown<T>> {
    check_pair(image, text)?;
    check_temperature(temperature)?;
    let s = similarity(image, text, temperature, &mut InstrumentCounters::new())?;
    let (row_lse, col_lse) = row_col_lse(&s);
    Ok(breakdown(&s, &row_lse, &col_lse, temperature))
}

/// Loss and gradients on raw feature matrices, recording the similarity
/// buffer in `meter.loss` and the B×D gradients in `meter.exchange`.
pub fn clip_grad_matrices<T: Scalar>(
    image: &DenseMatrix<T>,
    text: &DenseMatrix<T>,
    temperature: T,
    meter: &mut Meter,
) -> Result<GradPair<T>> {
    check_pair(image, text)?;
    check_temperature(temperature)?;
    let mut s = similarity(image, text, temperature, &mut meter.loss)?;
    let (row_lse, col_lse) = row_col_lse(&s);
    let loss = breakdown(&s, &row_lse, &col_lse, temperature);

    let b = s.rows();
    let half_over_b = T::from_f64(0.5) / T::from_usize(b);
    let inv_b = T::one() / T::from_usize(b);
    for i in 0..b {
        let r = row_lse[i];
        for (j, x) in s.row_mut(i).iter_mut().enumerate() {
            *x = half_over_b * ((*x - r).exp() + (*x - col_lse[j]).exp());
            if i == j {
                *x -= inv_b;
            }
        }
    }

    let mut d_image = meter.exchange.matmul(&s, text, false)?;
    let mut d_text = meter.exchange.matmul_at(&s, image)?;
    meter.loss.release(s.len());
    d_image.scale_in_place(temperature);
    d_text.scale_in_place(temperature);
    Ok(GradPair {
        d_image,
        d_text,
        loss,
    })
}

/// Full-batch loss: `(L_image→text + L_text→image) / 2` with labels `0..B`.
pub fn clip_loss_full<T: Scalar>(
    image: &FeatureBatch<T>,
    text: &FeatureBatch<T>,
    temperature: T,
) -> Result<LossBreakdown<T>> {
    clip_loss_matrices(image.features(), text.features(), temperature)
}

/// Gradients of [`clip_loss_full`] with respect to the normalized features.
pub fn clip_grad_full<T: Scalar>(
    image: &FeatureBatch<T>,
    text: &FeatureBatch<T>,
    temperature: T,
) -> Result<GradPair<T>> {
    clip_grad_matrices(
        image.features(),
        text.features(),
        temperature,
        &mut Meter::new(),
    )
}

/// Error floor for comparisons against [`finite_diff_grad`]. Central
/// differences at `h = 1e-6` carry roughly `ε·|L| / h ≈ 1e-10` of rounding
/// noise, so gradients that are exactly zero cannot be checked relatively.
pub const FD_FLOOR: f64 = 1.0;

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h` for every coordinate.
pub fn finite_diff_grad(
    loss_fn: impl Fn(&DenseMatrix) -> f64,
    point: &DenseMatrix,
    h: f64,
) -> DenseMatrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = DenseMatrix::zeros(point.rows(), point.cols());
    let mut probe = point.clone();
    for p in 0..point.len() {
        let x = point.as_slice()[p];
        probe.as_mut_slice()[p] = x + h;
        let plus = loss_fn(&probe);
        probe.as_mut_slice()[p] = x - h;
        let minus = loss_fn(&probe);
        probe.as_mut_slice()[p] = x;
        grad.as_mut_slice()[p] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Seeded Gaussian rows projected onto the unit sphere.
pub fn seeded_unit_rows(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    l2_normalize_rows(&raw).expect("gaussian rows are nonzero")
}
