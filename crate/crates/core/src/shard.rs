//! Per-rank decomposition of the contrastive loss.
//!
//! Rank `n` holds rows `[n·b, (n+1)·b)` of the global image and text
//! features. After gathering both feature sets it builds only two b×B
//! similarity matrices, `t · I_n · Tᵀ` and `t · T_n · Iᵀ`, and turns them
//! into a B×D gradient contribution for each modality:
//!
//! * `G_i · T` and `G_t · I` land in the rank's own rows (intra-rank terms);
//! * `G_tᵀ · T_n` and `G_iᵀ · I_n` land in every row. Outside the rank's
//!   own slice these are the inter-rank terms that other ranks need.
//!
//! Averaging the contributions with `all_reduce` reproduces the full-batch
//! gradient exactly, because the global loss is the mean of the per-rank
//! local losses.

use std::ops::Range;

use crate::dense::{softmax_xent_in_place, DenseMatrix, Meter, Scalar};
use crate::error::{Error, Result};
use crate::fabric::{RankEndpoint, RankGroup, ReduceOp, Scheduler};
use crate::oracle::{check_temperature, clip_grad_matrices};

/// Contiguous rank-order sharding of a global batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardLayout {
    world_size: usize,
    global_batch: usize,
    rank: usize,
}

impl ShardLayout {
    pub fn new(world_size: usize, global_batch: usize, rank: usize) -> Result<Self> {
        if world_size == 0 || global_batch == 0 || !global_batch.is_multiple_of(world_size) {
            return Err(Error::Layout {
                batch: global_batch,
                world: world_size,
            });
        }
        if rank >= world_size {
            return Err(Error::Domain(format!(
                "rank {rank} outside world of size {world_size}"
            )));
        }
        Ok(Self {
            world_size,
            global_batch,
            rank,
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn global_batch(&self) -> usize {
        self.global_batch
    }

    pub fn local_batch(&self) -> usize {
        self.global_batch / self.world_size
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Global row range owned by this rank.
    pub fn rows(&self) -> Range<usize> {
        let b = self.local_batch();
        self.rank * b..(self.rank + 1) * b
    }
}

pub fn shard_slice<T: Scalar>(
    layout: &ShardLayout,
    full: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    if full.rows() != layout.global_batch {
        return Err(Error::shape(
            "shard_slice",
            format!(
                "{} rows for a global batch of {}",
                full.rows(),
                layout.global_batch
            ),
        ));
    }
    let rows = layout.rows();
    full.slice_rows(rows.start, rows.end)
}

/// Global indices of this rank's positive pairs: `arange(b) + b · rank`.
pub fn local_labels(layout: &ShardLayout) -> Vec<usize> {
    layout.rows().collect()
}

/// Deliberate defects used to show that the verification suite detects a
/// broken decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negates every inter-rank contribution before the reduction.
    FlipInterRankSign,
}

/// One rank's share of the global gradient, before reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradContribution<T = f64> {
    pub d_image_full: DenseMatrix<T>,
    pub d_text_full: DenseMatrix<T>,
    pub local_loss: T,
}

pub fn local_loss_and_grads<T: Scalar>(
    layout: &ShardLayout,
    image_gathered: &DenseMatrix<T>,
    text_gathered: &DenseMatrix<T>,
    temperature: T,
) -> Result<LocalGradContribution<T>> {
    local_loss_and_grads_with(
        layout,
        image_gathered,
        text_gathered,
        temperature,
        None,
        &mut Meter::new(),
    )
}

pub fn local_loss_and_grads_with<T: Scalar>(
    layout: &ShardLayout,
    image_gathered: &DenseMatrix<T>,
    text_gathered: &DenseMatrix<T>,
    temperature: T,
    mutation: Option<Mutation>,
    meter: &mut Meter,
) -> Result<LocalGradContribution<T>> {
    check_temperature(temperature)?;
    if image_gathered.shape() != text_gathered.shape() {
        return Err(Error::shape(
            "local_loss_and_grads",
            format!(
                "image {:?} vs text {:?}",
                image_gathered.shape(),
                text_gathered.shape()
            ),
        ));
    }
    let image_local = shard_slice(layout, image_gathered)?;
    let text_local = shard_slice(layout, text_gathered)?;
    let labels = local_labels(layout);
    let own = layout.rows();

    let mut logits_i = meter.loss.matmul(&image_local, text_gathered, true)?;
    logits_i.scale_in_place(temperature);
    let mut logits_t = meter.loss.matmul(&text_local, image_gathered, true)?;
    logits_t.scale_in_place(temperature);

    // The ½ of (loss_i + loss_t) / 2 is folded into both gradients here.
    let half = T::from_f64(0.5);
    let loss_i = softmax_xent_in_place(&mut logits_i, &labels, half)?;
    let loss_t = softmax_xent_in_place(&mut logits_t, &labels, half)?;
    let (grad_i, grad_t) = (logits_i, logits_t);

    let (batch, dim) = image_gathered.shape();
    let mut d_image_full = DenseMatrix::zeros(batch, dim);
    let mut d_text_full = DenseMatrix::zeros(batch, dim);
    meter.exchange.alloc(2 * batch * dim);

    let accumulate = |target: &mut DenseMatrix<T>,
                      intra: DenseMatrix<T>,
                      mut spread: DenseMatrix<T>,
                      meter: &mut Meter|
     -> Result<()> {
        target.add_into_rows(own.start, &intra)?;
        if mutation == Some(Mutation::FlipInterRankSign) {
            for r in (0..batch).filter(|r| !own.contains(r)) {
                for x in spread.row_mut(r) {
                    *x = -*x;
                }
            }
        }
        target.add_assign(&spread)?;
        meter.exchange.release(intra.len() + spread.len());
        Ok(())
    };

    let intra = meter.exchange.matmul(&grad_i, text_gathered, false)?;
    let spread = meter.exchange.matmul_at(&grad_t, &text_local)?;
    accumulate(&mut d_image_full, intra, spread, meter)?;

    let intra = meter.exchange.matmul(&grad_t, image_gathered, false)?;
    let spread = meter.exchange.matmul_at(&grad_i, &image_local)?;
    accumulate(&mut d_text_full, intra, spread, meter)?;

    meter.loss.release(grad_i.len() + grad_t.len());
    d_image_full.scale_in_place(temperature);
    d_text_full.scale_in_place(temperature);

    Ok(LocalGradContribution {
        d_image_full,
        d_text_full,
        local_loss: (loss_i + loss_t) * half,
    })
}

/// Output of one rank's training step: gradients for the rank's own b rows
/// and the global loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T = f64> {
    pub d_image: DenseMatrix<T>,
    pub d_text: DenseMatrix<T>,
    pub loss: T,
}

/// Decomposed step: gather features, compute the local contribution, and
/// average contributions and losses across ranks.
pub async fn disco_step<T: Scalar>(
    endpoint: &mut RankEndpoint<T>,
    local_image: &DenseMatrix<T>,
    local_text: &DenseMatrix<T>,
    temperature: T,
) -> Result<StepOutput<T>> {
    disco_step_with(
        endpoint,
        local_image,
        local_text,
        temperature,
        None,
        &mut Meter::new(),
    )
    .await
}

pub async fn disco_step_with<T: Scalar>(
    endpoint: &mut RankEndpoint<T>,
    local_image: &DenseMatrix<T>,
    local_text: &DenseMatrix<T>,
    temperature: T,
    mutation: Option<Mutation>,
    meter: &mut Meter,
) -> Result<StepOutput<T>> {
    check_temperature(temperature)?;
    let image_gathered = endpoint.all_gather(local_image).await?;
    let text_gathered = endpoint.all_gather(local_text).await?;
    meter
        .exchange
        .alloc(image_gathered.len() + text_gathered.len());

    let layout = ShardLayout::new(
        endpoint.world_size(),
        image_gathered.rows(),
        endpoint.rank(),
    )?;
    let contribution = local_loss_and_grads_with(
        &layout,
        &image_gathered,
        &text_gathered,
        temperature,
        mutation,
        meter,
    )?;

    let d_image_full = endpoint
        .all_reduce(&contribution.d_image_full, ReduceOp::Avg)
        .await?;
    let d_text_full = endpoint
        .all_reduce(&contribution.d_text_full, ReduceOp::Avg)
        .await?;
    meter.exchange.alloc(d_image_full.len() + d_text_full.len());
    let loss = endpoint
        .all_reduce_scalar(contribution.local_loss, ReduceOp::Avg)
        .await?;

    Ok(StepOutput {
        d_image: shard_slice(&layout, &d_image_full)?,
        d_text: shard_slice(&layout, &d_text_full)?,
        loss,
    })
}

/// Baseline step: every rank gathers all features, evaluates the full B×B
/// loss locally and keeps the gradient rows for its own slice.
pub async fn replicated_step<T: Scalar>(
    endpoint: &mut RankEndpoint<T>,
    local_image: &DenseMatrix<T>,
    local_text: &DenseMatrix<T>,
    temperature: T,
    meter: &mut Meter,
) -> Result<StepOutput<T>> {
    check_temperature(temperature)?;
    let image_gathered = endpoint.all_gather(local_image).await?;
    let text_gathered = endpoint.all_gather(local_text).await?;
    meter
        .exchange
        .alloc(image_gathered.len() + text_gathered.len());
    let layout = ShardLayout::new(
        endpoint.world_size(),
        image_gathered.rows(),
        endpoint.rank(),
    )?;
    let grads = clip_grad_matrices(&image_gathered, &text_gathered, temperature, meter)?;
    Ok(StepOutput {
        d_image: shard_slice(&layout, &grads.d_image)?,
        d_text: shard_slice(&layout, &grads.d_text)?,
        loss: grads.loss.total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Disco,
    Replicated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig<T = f64> {
    pub world_size: usize,
    pub temperature: T,
    pub scheduler: Scheduler,
    pub kind: StepKind,
    pub mutation: Option<Mutation>,
}

impl<T: Scalar> SimConfig<T> {
    pub fn disco(world_size: usize, temperature: T) -> Self {
        Self {
            world_size,
            temperature,
            scheduler: Scheduler::Lockstep,
            kind: StepKind::Disco,
            mutation: None,
        }
    }
}

/// Result of simulating one step over all ranks, with per-rank outputs
/// concatenated back into global order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStep<T = f64> {
    pub d_image: DenseMatrix<T>,
    pub d_text: DenseMatrix<T>,
    /// Global loss as seen by each rank.
    pub losses: Vec<T>,
    pub meters: Vec<Meter>,
    pub elements_received: Vec<u64>,
}

impl<T: Scalar> SimulatedStep<T> {
    pub fn loss(&self) -> T {
        self.losses[0]
    }

    /// Largest loss-scope peak over ranks.
    pub fn max_loss_peak(&self) -> u64 {
        self.meters
            .iter()
            .map(|m| m.loss.peak_live_elements)
            .max()
            .unwrap_or(0)
    }

    /// Largest loss-scope FLOP count over ranks.
    pub fn max_loss_flops(&self) -> u64 {
        self.meters
            .iter()
            .map(|m| m.loss.flops_accumulated)
            .max()
            .unwrap_or(0)
    }
}

/// Shards `image`/`text` over `config.world_size` simulated ranks, runs one
/// step on each and reassembles the result.
pub fn simulate_step<T: Scalar>(
    image: &DenseMatrix<T>,
    text: &DenseMatrix<T>,
    config: &SimConfig<T>,
) -> Result<SimulatedStep<T>> {
    let world = config.world_size;
    let layouts = (0..world)
        .map(|r| ShardLayout::new(world, image.rows(), r))
        .collect::<Result<Vec<_>>>()?;
    let shards = layouts
        .iter()
        .map(|l| Ok((shard_slice(l, image)?, shard_slice(l, text)?)))
        .collect::<Result<Vec<_>>>()?;

    let group = RankGroup::<T>::new(world, config.scheduler)?;
    let outputs = group.run(|mut ep| {
        let (local_image, local_text) = &shards[ep.rank()];
        async move {
            let mut meter = Meter::new();
            let out = match config.kind {
                StepKind::Disco => {
                    disco_step_with(
                        &mut ep,
                        local_image,
                        local_text,
                        config.temperature,
                        config.mutation,
                        &mut meter,
                    )
                    .await?
                }
                StepKind::Replicated => {
                    replicated_step(
                        &mut ep,
                        local_image,
                        local_text,
                        config.temperature,
                        &mut meter,
                    )
                    .await?
                }
            };
            Ok::<_, Error>((out, meter, ep.elements_received()))
        }
    })?;

    let mut d_image = Vec::with_capacity(world);
    let mut d_text = Vec::with_capacity(world);
    let mut losses = Vec::with_capacity(world);
    let mut meters = Vec::with_capacity(world);
    let mut received = Vec::with_capacity(world);
    for out in outputs {
        let (step, meter, elements) = out?;
        d_image.push(step.d_image);
        d_text.push(step.d_text);
        losses.push(step.loss);
        meters.push(meter);
        received.push(elements);
    }
    Ok(SimulatedStep {
        d_image: DenseMatrix::vstack(&d_image)?,
        d_text: DenseMatrix::vstack(&d_text)?,
        losses,
        meters,
        elements_received: received,
    })
}
