//! Linear two-tower model trained with plain gradient descent on synthetic
//! paired data, in either full-batch (naive) or decomposed (disco) mode.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dense::{
    l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_at, DenseMatrix, Meter,
};
use crate::error::{Error, Result};
use crate::fabric::{RankGroup, ReduceOp, Scheduler};
use crate::oracle::{
    check_temperature, clip_grad_matrices, clip_loss_matrices, FeatureBatch, Role,
};
use crate::shard::disco_step;

/// Inverse temperature used when none is given.
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    /// `D_in × D` projection for images.
    pub image: DenseMatrix,
    /// `D_in × D` projection for texts.
    pub text: DenseMatrix,
    pub temperature: f64,
}

impl TowerParams {
    pub fn new(image: DenseMatrix, text: DenseMatrix, temperature: f64) -> Result<Self> {
        if image.shape() != text.shape() || image.is_empty() {
            return Err(Error::shape(
                "TowerParams::new",
                format!("image {:?} vs text {:?}", image.shape(), text.shape()),
            ));
        }
        check_temperature(temperature)?;
        image.ensure_finite()?;
        text.ensure_finite()?;
        Ok(Self {
            image,
            text,
            temperature,
        })
    }

    /// Gaussian initialization scaled by `1/sqrt(D_in)`.
    pub fn seeded(input_dim: usize, dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let mut draw = || {
            DenseMatrix::from_fn(input_dim, dim, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
        };
        let image = draw();
        let text = draw();
        Self::new(image, text, temperature)
    }

    pub fn input_dim(&self) -> usize {
        self.image.rows()
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }

    fn weights(&self, which: Role) -> &DenseMatrix {
        match which {
            Role::Image => &self.image,
            Role::Text => &self.text,
        }
    }

    /// Largest relative difference between the two parameter sets.
    pub fn rel_error(&self, reference: &Self) -> Result<f64> {
        Ok(self
            .image
            .rel_error(&reference.image)?
            .max(self.text.rel_error(&reference.text)?))
    }
}

/// Paired inputs: row `i` of each side comes from the same latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub image_inputs: DenseMatrix,
    pub text_inputs: DenseMatrix,
    pub seed: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.image_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.image_inputs.cols()
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

/// Draws `samples` latent vectors `z ~ N(0, I)` and emits
/// `image = A·z + ε`, `text = C·z + ε′`, where `C` shares `A`'s structure
/// plus an independent perturbation of half its scale.
pub fn generate_dataset(
    samples: usize,
    input_dim: usize,
    latent_dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<PairedDataset> {
    if samples == 0 || input_dim == 0 || latent_dim == 0 {
        return Err(Error::Domain(
            "dataset dimensions must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let image_mixing = gaussian(input_dim, latent_dim, scale, &mut rng);
    let mut text_mixing = gaussian(input_dim, latent_dim, 0.5 * scale, &mut rng);
    text_mixing.add_assign(&image_mixing)?;
    generate_dataset_with_mixing(samples, &image_mixing, &text_mixing, noise_scale, seed)
}

/// Like [`generate_dataset`] with caller-supplied `D_in × latent` mixing
/// matrices.
pub fn generate_dataset_with_mixing(
    samples: usize,
    image_mixing: &DenseMatrix,
    text_mixing: &DenseMatrix,
    noise_scale: f64,
    seed: u64,
) -> Result<PairedDataset> {
    if image_mixing.shape() != text_mixing.shape() || image_mixing.is_empty() || samples == 0 {
        return Err(Error::shape(
            "generate_dataset",
            format!(
                "{samples} samples, mixing {:?} vs {:?}",
                image_mixing.shape(),
                text_mixing.shape()
            ),
        ));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Domain(format!(
            "noise scale must be >= 0, got {noise_scale}"
        )));
    }
    // Separate stream from the mixing matrices so both entry points agree.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let (input_dim, latent_dim) = image_mixing.shape();
    let latents = gaussian(samples, latent_dim, 1.0, &mut rng);
    let mut image_inputs = matmul(&latents, image_mixing, true)?;
    let mut text_inputs = matmul(&latents, text_mixing, true)?;
    image_inputs.axpy(noise_scale, &gaussian(samples, input_dim, 1.0, &mut rng))?;
    text_inputs.axpy(noise_scale, &gaussian(samples, input_dim, 1.0, &mut rng))?;
    Ok(PairedDataset {
        image_inputs,
        text_inputs,
        seed,
    })
}

/// Linear projection followed by row normalization.
pub fn encode(params: &TowerParams, inputs: &DenseMatrix, which: Role) -> Result<FeatureBatch> {
    let projected = matmul(inputs, params.weights(which), false)?;
    FeatureBatch::new(l2_normalize_rows(&projected)?, which)
}

/// Loss and parameter gradients for one full batch on a single worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub loss: f64,
    pub d_image: DenseMatrix,
    pub d_text: DenseMatrix,
}

/// Backpropagates feature gradients through normalization and the linear
/// map: returns `Xᵀ · normalize_backward(X·W, dF)`.
fn tower_backward(
    inputs: &DenseMatrix,
    projected: &DenseMatrix,
    d_features: &DenseMatrix,
) -> Result<DenseMatrix> {
    let d_projected = l2_normalize_rows_backward(projected, d_features)?;
    matmul_at(inputs, &d_projected)
}

pub fn naive_loss_and_param_grads(
    params: &TowerParams,
    image_inputs: &DenseMatrix,
    text_inputs: &DenseMatrix,
) -> Result<ParamGrads> {
    let zi = matmul(image_inputs, &params.image, false)?;
    let zt = matmul(text_inputs, &params.text, false)?;
    let fi = l2_normalize_rows(&zi)?;
    let ft = l2_normalize_rows(&zt)?;
    let grads = clip_grad_matrices(&fi, &ft, params.temperature, &mut Meter::new())?;
    Ok(ParamGrads {
        loss: grads.loss.total,
        d_image: tower_backward(image_inputs, &zi, &grads.d_image)?,
        d_text: tower_backward(text_inputs, &zt, &grads.d_text)?,
    })
}

/// Loss of one batch under `params`, without gradients.
pub fn batch_loss(
    params: &TowerParams,
    image_inputs: &DenseMatrix,
    text_inputs: &DenseMatrix,
) -> Result<f64> {
    let fi = encode(params, image_inputs, Role::Image)?;
    let ft = encode(params, text_inputs, Role::Text)?;
    Ok(clip_loss_matrices(fi.features(), ft.features(), params.temperature)?.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Naive,
    Disco,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub global_batch: usize,
    pub world_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub scheduler: Scheduler,
}

impl TrainConfig {
    pub fn validate(&self, dataset: &PairedDataset) -> Result<()> {
        if self.world_size == 0
            || self.global_batch == 0
            || !self.global_batch.is_multiple_of(self.world_size)
        {
            return Err(Error::Layout {
                batch: self.global_batch,
                world: self.world_size,
            });
        }
        if self.global_batch > dataset.len() {
            return Err(Error::Domain(format!(
                "global batch {} exceeds dataset size {}",
                self.global_batch,
                dataset.len()
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// `(step, global loss before the update)` for every step.
    pub trajectory: Vec<(usize, f64)>,
    pub params: TowerParams,
}

/// Row order for every step: a single seeded shuffle, consumed in
/// consecutive windows of `global_batch` rows with wrap-around.
pub fn batch_schedule(
    samples: usize,
    global_batch: usize,
    seed: u64,
) -> impl Fn(usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    move |step| {
        (0..global_batch)
            .map(|j| order[(step * global_batch + j) % samples])
            .collect()
    }
}

/// Non-finite or degenerate values during training are reported as
/// divergence at the step where they appeared.
fn diverged_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Degenerate { .. } | Error::NonFinite { .. } => Error::Divergence {
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn check_step(step: usize, loss: f64, grads: [&DenseMatrix; 2]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    for g in grads {
        if let Err(e) = g.ensure_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("parameter gradient: {e}"),
            });
        }
    }
    Ok(())
}

pub fn train_run(
    config: &TrainConfig,
    dataset: &PairedDataset,
    initial: &TowerParams,
) -> Result<TrainRun> {
    config.validate(dataset)?;
    if initial.input_dim() != dataset.input_dim() {
        return Err(Error::shape(
            "train_run",
            format!(
                "towers expect {} inputs, dataset has {}",
                initial.input_dim(),
                dataset.input_dim()
            ),
        ));
    }
    let batches = batch_schedule(dataset.len(), config.global_batch, config.seed);
    match config.mode {
        TrainMode::Naive => train_naive(config, dataset, initial, &batches),
        TrainMode::Disco => train_disco(config, dataset, initial, &batches),
    }
}

fn train_naive(
    config: &TrainConfig,
    dataset: &PairedDataset,
    initial: &TowerParams,
    batches: &dyn Fn(usize) -> Vec<usize>,
) -> Result<TrainRun> {
    let mut params = initial.clone();
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rows = batches(step);
        let xi = dataset.image_inputs.select_rows(&rows)?;
        let xt = dataset.text_inputs.select_rows(&rows)?;
        let g = naive_loss_and_param_grads(&params, &xi, &xt).map_err(diverged_at(step))?;
        check_step(step, g.loss, [&g.d_image, &g.d_text])?;
        params.image.axpy(-config.learning_rate, &g.d_image)?;
        params.text.axpy(-config.learning_rate, &g.d_text)?;
        trajectory.push((step, g.loss));
    }
    Ok(TrainRun { trajectory, params })
}

/// Each rank owns a replica of the towers and its `b` rows of every batch.
/// Feature gradients come from [`disco_step`]; the per-rank parameter
/// gradients are partial sums of the global gradient and are combined with
/// a summing `all_reduce`, so every replica applies the same update.
fn train_disco(
    config: &TrainConfig,
    dataset: &PairedDataset,
    initial: &TowerParams,
    batches: &(dyn Fn(usize) -> Vec<usize> + Sync),
) -> Result<TrainRun> {
    let group = RankGroup::<f64>::new(config.world_size, config.scheduler)?;
    let local_batch = config.global_batch / config.world_size;
    let outputs = group.run(|mut ep| async move {
        let rank = ep.rank();
        let mut params = initial.clone();
        let mut trajectory = Vec::new();
        for step in 0..config.steps {
            let rows = batches(step);
            let own = &rows[rank * local_batch..(rank + 1) * local_batch];
            let xi = dataset.image_inputs.select_rows(own)?;
            let xt = dataset.text_inputs.select_rows(own)?;
            let zi = matmul(&xi, &params.image, false)?;
            let zt = matmul(&xt, &params.text, false)?;
            let forward = l2_normalize_rows(&zi).and_then(|fi| Ok((fi, l2_normalize_rows(&zt)?)));
            // Ranks agree on a failed forward pass before anyone leaves the
            // collective sequence.
            let ok = if forward.is_ok() { 1.0 } else { 0.0 };
            let all_ok = ep.all_reduce_scalar(ok, ReduceOp::Sum).await?;
            let (fi, ft) = match forward {
                Err(e) => return Err(diverged_at(step)(e)),
                Ok(_) if all_ok < ep.world_size() as f64 => {
                    return Err(Error::Divergence {
                        step,
                        detail: "forward pass failed on another rank".into(),
                    })
                }
                Ok(f) => f,
            };

            let out = disco_step(&mut ep, &fi, &ft, params.temperature).await?;

            let partial_image = tower_backward(&xi, &zi, &out.d_image)?;
            let partial_text = tower_backward(&xt, &zt, &out.d_text)?;
            let d_image = ep.all_reduce(&partial_image, ReduceOp::Sum).await?;
            let d_text = ep.all_reduce(&partial_text, ReduceOp::Sum).await?;
            check_step(step, out.loss, [&d_image, &d_text])?;
            params.image.axpy(-config.learning_rate, &d_image)?;
            params.text.axpy(-config.learning_rate, &d_text)?;
            if rank == 0 {
                trajectory.push((step, out.loss));
            }
        }
        Ok::<_, Error>(TrainRun { trajectory, params })
    })?;
    let mut outputs = outputs.into_iter();
    let first = outputs.next().expect("world size >= 1")?;
    for other in outputs {
        let other = other?;
        debug_assert_eq!(other.params, first.params, "replicas diverged");
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_grad, FD_FLOOR};

    fn config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            global_batch: 16,
            world_size: 2,
            steps: 50,
            learning_rate: 0.5,
            seed: 7,
            mode,
            scheduler: Scheduler::Lockstep,
        }
    }

    fn fixture() -> (PairedDataset, TowerParams) {
        let data = generate_dataset(64, 8, 4, 0.1, 3).unwrap();
        let params = TowerParams::seeded(8, 4, DEFAULT_TEMPERATURE, 5).unwrap();
        (data, params)
    }

    #[test]
    fn zero_noise_shared_mixing_gives_identical_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(6, 3, 1.0, &mut rng);
        let d = generate_dataset_with_mixing(10, &a, &a, 0.0, 4).unwrap();
        assert_eq!(d.image_inputs, d.text_inputs);
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = generate_dataset(20, 5, 3, 0.2, 11).unwrap();
        let b = generate_dataset(20, 5, 3, 0.2, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(20, 5, 3, 0.2, 12).unwrap());
        assert!(generate_dataset(0, 5, 3, 0.2, 1).is_err());
        assert!(generate_dataset(5, 5, 3, -1.0, 1).is_err());
    }

    #[test]
    fn positive_pairs_are_more_similar_than_negatives() {
        let d = generate_dataset(64, 8, 4, 0.1, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian(8, 4, 1.0, &mut rng);
        let fi = l2_normalize_rows(&matmul(&d.image_inputs, &w, false).unwrap()).unwrap();
        let ft = l2_normalize_rows(&matmul(&d.text_inputs, &w, false).unwrap()).unwrap();
        let cos = matmul(&fi, &ft, true).unwrap();
        let n = cos.rows();
        let pos: f64 = (0..n).map(|i| cos.get(i, i)).sum::<f64>() / n as f64;
        let all: f64 = cos.as_slice().iter().sum();
        let neg = (all - pos * n as f64) / (n * (n - 1)) as f64;
        assert!(pos > neg + 0.3, "pos {pos} neg {neg}");
    }

    #[test]
    fn encode_identity_and_unit_rows() {
        let x = crate::oracle::seeded_unit_rows(5, 4, 0);
        let params =
            TowerParams::new(DenseMatrix::identity(4), DenseMatrix::identity(4), 1.0).unwrap();
        let f = encode(&params, &x, Role::Image).unwrap();
        assert!(f.features().max_abs_diff(&x).unwrap() < 1e-15);

        let (data, params) = fixture();
        let f = encode(&params, &data.text_inputs, Role::Text).unwrap();
        for i in 0..f.batch() {
            let norm: f64 = f
                .features()
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }

        assert!(matches!(
            encode(&params, &DenseMatrix::zeros(2, 8), Role::Image),
            Err(Error::Degenerate { row: 0, .. })
        ));
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let (data, params) = fixture();
        let rows = [3, 17, 40, 9];
        let xi = data.image_inputs.select_rows(&rows).unwrap();
        let xt = data.text_inputs.select_rows(&rows).unwrap();
        let g = naive_loss_and_param_grads(&params, &xi, &xt).unwrap();
        let fd_image = finite_diff_grad(
            |w| {
                let p = TowerParams {
                    image: w.clone(),
                    ..params.clone()
                };
                batch_loss(&p, &xi, &xt).unwrap()
            },
            &params.image,
            1e-6,
        );
        let fd_text = finite_diff_grad(
            |w| {
                let p = TowerParams {
                    text: w.clone(),
                    ..params.clone()
                };
                batch_loss(&p, &xi, &xt).unwrap()
            },
            &params.text,
            1e-6,
        );
        assert!(g.d_image.scaled_error(&fd_image, FD_FLOOR).unwrap() <= 1e-5);
        assert!(g.d_text.scaled_error(&fd_text, FD_FLOOR).unwrap() <= 1e-5);
        assert!(g.d_image.rel_error(&fd_image).unwrap() <= 1e-5);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (data, params) = fixture();
        for mode in [TrainMode::Naive, TrainMode::Disco] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                steps: 5,
                global_batch: 64,
                ..config(mode)
            };
            let run = train_run(&cfg, &data, &params).unwrap();
            let first = run.trajectory[0].1;
            assert!(run
                .trajectory
                .iter()
                .all(|&(_, l)| (l - first).abs() <= 1e-12));
            assert_eq!(run.params.image, params.image);
        }
    }

    #[test]
    fn naive_and_disco_trajectories_agree_and_make_progress() {
        let (data, params) = fixture();
        let naive = train_run(&config(TrainMode::Naive), &data, &params).unwrap();
        let disco = train_run(&config(TrainMode::Disco), &data, &params).unwrap();
        assert_eq!(naive.trajectory.len(), 50);
        for (a, b) in naive.trajectory.iter().zip(&disco.trajectory) {
            assert_eq!(a.0, b.0);
            assert!(
                (a.1 - b.1).abs() <= 1e-10,
                "step {}: {} vs {}",
                a.0,
                a.1,
                b.1
            );
        }
        assert!(disco.params.rel_error(&naive.params).unwrap() <= 1e-9);
        assert!(naive.trajectory[49].1 < naive.trajectory[0].1);
    }

    #[test]
    fn runs_are_deterministic() {
        let (data, params) = fixture();
        for mode in [TrainMode::Naive, TrainMode::Disco] {
            let cfg = TrainConfig {
                steps: 10,
                ..config(mode)
            };
            let a = train_run(&cfg, &data, &params).unwrap();
            let b = train_run(&cfg, &data, &params).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (data, params) = fixture();
        let cfg = TrainConfig {
            learning_rate: 1e308,
            steps: 10,
            ..config(TrainMode::Naive)
        };
        for mode in [TrainMode::Naive, TrainMode::Disco] {
            match train_run(&TrainConfig { mode, ..cfg }, &data, &params) {
                Err(Error::Divergence { step, .. }) => assert!((1..=2).contains(&step)),
                other => panic!("expected divergence, got {other:?}"),
            }
        }
    }

    #[test]
    fn config_validation() {
        let (data, params) = fixture();
        let bad = TrainConfig {
            world_size: 3,
            ..config(TrainMode::Disco)
        };
        assert_eq!(
            train_run(&bad, &data, &params).unwrap_err(),
            Error::Layout {
                batch: 16,
                world: 3
            }
        );
        let bad = TrainConfig {
            global_batch: 128,
            ..config(TrainMode::Naive)
        };
        assert!(matches!(
            train_run(&bad, &data, &params),
            Err(Error::Domain(_))
        ));
        let cfg = TrainConfig {
            steps: 0,
            ..config(TrainMode::Disco)
        };
        assert!(train_run(&cfg, &data, &params)
            .unwrap()
            .trajectory
            .is_empty());
    }
}
