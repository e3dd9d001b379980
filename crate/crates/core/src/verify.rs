//! Equivalence checks of the decomposed step against the full-batch
//! reference: gradients and loss over a parameter grid, finite differences
//! for the reference itself, and invariance under row permutation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dense::DenseMatrix;
use crate::error::Result;
use crate::fabric::Scheduler;
use crate::oracle::{
    clip_grad_full, clip_loss_matrices, finite_diff_grad, seeded_unit_rows, FeatureBatch, Role,
    FD_FLOOR,
};
use crate::shard::{simulate_step, Mutation, SimConfig, StepKind};

pub const GRADIENT_TOLERANCE: f64 = 1e-12;
pub const FD_TOLERANCE: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;
/// Largest `B` and `D` for which finite-difference checks run.
pub const FD_MAX_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyGrid {
    pub batches: Vec<usize>,
    pub dims: Vec<usize>,
    pub worlds: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scheduler: Scheduler,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyGrid {
    fn default() -> Self {
        Self {
            batches: vec![8, 16, 32, 64],
            dims: vec![4, 8, 16],
            worlds: vec![1, 2, 4, 8],
            temperatures: vec![1.0, 10.0, 100.0],
            seeds: (0..5).collect(),
            scheduler: Scheduler::Lockstep,
            mutation: None,
        }
    }
}

/// One `(B, D, t, seed)` problem; `N = 0` marks checks that do not involve
/// ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Instance {
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "N")]
    pub world: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "t")]
    pub temperature: f64,
    pub seed: u64,
}

impl Instance {
    fn features(&self) -> (DenseMatrix, DenseMatrix) {
        let image = seeded_unit_rows(self.batch, self.dim, self.seed.wrapping_mul(2));
        let text = seeded_unit_rows(self.batch, self.dim, self.seed.wrapping_mul(2) + 1);
        (image, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    #[serde(flatten)]
    pub instance: Instance,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(check: &'static str, instance: Instance, max_error: f64, tolerance: f64) -> Self {
        Self {
            check,
            instance,
            max_error,
            tolerance,
            // NaN errors fail.
            passed: max_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Largest error among checks named `check`.
    pub fn max_error(&self, check: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.check == check)
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }
}

impl VerifyGrid {
    /// Every `(B, N, D, t, seed)` with `N | B`.
    pub fn instances(&self) -> Vec<Instance> {
        let mut out = Vec::new();
        for &batch in &self.batches {
            for &world in self.worlds.iter().filter(|&&n| n > 0 && batch % n == 0) {
                for &dim in &self.dims {
                    for &temperature in &self.temperatures {
                        for &seed in &self.seeds {
                            out.push(Instance {
                                batch,
                                world,
                                dim,
                                temperature,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn sim_config(&self, world: usize, temperature: f64) -> SimConfig {
        SimConfig {
            world_size: world,
            temperature,
            scheduler: self.scheduler,
            kind: StepKind::Disco,
            mutation: self.mutation,
        }
    }
}

/// Disco gradients (image rows stacked over text rows) and loss against the
/// full-batch reference.
pub fn equivalence_checks(grid: &VerifyGrid) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for inst in grid.instances() {
        let (image, text) = inst.features();
        let reference = clip_grad_full(
            &FeatureBatch::new(image.clone(), Role::Image)?,
            &FeatureBatch::new(text.clone(), Role::Text)?,
            inst.temperature,
        )?;
        let step = simulate_step(
            &image,
            &text,
            &grid.sim_config(inst.world, inst.temperature),
        )?;
        let got = DenseMatrix::vstack(&[step.d_image, step.d_text])?;
        let want = DenseMatrix::vstack(&[reference.d_image, reference.d_text])?;
        out.push(CheckResult::new(
            "gradient",
            inst,
            got.rel_error(&want)?,
            GRADIENT_TOLERANCE,
        ));
        let loss_error = step
            .losses
            .iter()
            .map(|l| (l - reference.loss.total).abs() / reference.loss.total.abs().max(1.0))
            .fold(0.0, f64::max);
        out.push(CheckResult::new(
            "loss",
            inst,
            loss_error,
            GRADIENT_TOLERANCE,
        ));
    }
    Ok(out)
}

/// Reference gradients against central differences of the reference loss,
/// on grid instances with `B, D <= 8`.
pub fn finite_difference_checks(grid: &VerifyGrid) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let small = grid
        .instances()
        .into_iter()
        .filter(|i| i.world == 1 && i.batch <= FD_MAX_SIZE && i.dim <= FD_MAX_SIZE);
    for inst in small {
        let inst = Instance { world: 0, ..inst };
        let (image, text) = inst.features();
        let t = inst.temperature;
        let reference = clip_grad_full(
            &FeatureBatch::new(image.clone(), Role::Image)?,
            &FeatureBatch::new(text.clone(), Role::Text)?,
            t,
        )?;
        let loss = |i: &DenseMatrix, x: &DenseMatrix| {
            clip_loss_matrices(i, x, t)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        };
        let fd_image = finite_diff_grad(|p| loss(p, &text), &image, FD_STEP);
        let fd_text = finite_diff_grad(|p| loss(&image, p), &text, FD_STEP);
        let error = reference
            .d_image
            .scaled_error(&fd_image, FD_FLOOR)?
            .max(reference.d_text.scaled_error(&fd_text, FD_FLOOR)?);
        out.push(CheckResult::new(
            "finite_difference",
            inst,
            error,
            FD_TOLERANCE,
        ));
    }
    Ok(out)
}

/// Shuffling the pairs (rows of both sides together) leaves the loss
/// unchanged and permutes the disco gradients the same way.
pub fn permutation_checks(grid: &VerifyGrid) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for inst in grid.instances() {
        let (image, text) = inst.features();
        let mut order: Vec<usize> = (0..inst.batch).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(inst.seed ^ 0xa5a5));
        let config = grid.sim_config(inst.world, inst.temperature);
        let base = simulate_step(&image, &text, &config)?;
        let shuffled = simulate_step(
            &image.select_rows(&order)?,
            &text.select_rows(&order)?,
            &config,
        )?;
        let grad_error = shuffled
            .d_image
            .rel_error(&base.d_image.select_rows(&order)?)?
            .max(
                shuffled
                    .d_text
                    .rel_error(&base.d_text.select_rows(&order)?)?,
            );
        let loss_error = (shuffled.loss() - base.loss()).abs() / base.loss().abs().max(1.0);
        out.push(CheckResult::new(
            "permutation",
            inst,
            grad_error.max(loss_error),
            GRADIENT_TOLERANCE,
        ));
    }
    Ok(out)
}

/// All checks over `grid`.
pub fn run_verify(grid: &VerifyGrid) -> Result<VerifyReport> {
    let mut checks = equivalence_checks(grid)?;
    checks.extend(finite_difference_checks(grid)?);
    checks.extend(permutation_checks(grid)?);
    Ok(VerifyReport::new(checks))
}
