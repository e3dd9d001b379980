//! Analytic memory and FLOP footprints for the four training layouts, and
//! the same quantities measured from instrumented single-step runs.
//!
//! All figures are per rank. Loss-scope FLOPs are counted in
//! multiply-adds; the instrumented counters count two FLOPs per
//! multiply-add and are halved when converted into a [`CostReport`].

use std::fmt;

use clap::ValueEnum;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::dense::{DenseMatrix, Scalar};
use crate::error::{Error, Result};
use crate::fabric::Scheduler;
use crate::oracle::seeded_unit_rows;
use crate::shard::{simulate_step, SimConfig, StepKind};

/// Largest global batch [`measured_footprint`] will execute.
pub const MAX_MEASURED_BATCH: usize = 4096;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum,
)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostInputs {
    pub batch: u64,
    pub world: u64,
    pub layers: u64,
    pub dim: u64,
    pub bytes_per_scalar: u64,
}

impl CostInputs {
    pub fn new(
        batch: u64,
        world: u64,
        layers: u64,
        dim: u64,
        bytes_per_scalar: u64,
    ) -> Result<Self> {
        let inputs = Self {
            batch,
            world,
            layers,
            dim,
            bytes_per_scalar,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.batch, self.world, self.layers, self.dim].contains(&0) {
            return Err(Error::Domain(format!(
                "batch, world, layers and dim must be >= 1: {self:?}"
            )));
        }
        if !matches!(self.bytes_per_scalar, 4 | 8) {
            return Err(Error::Domain(format!(
                "bytes per scalar must be 4 or 8, got {}",
                self.bytes_per_scalar
            )));
        }
        if !self.batch.is_multiple_of(self.world) {
            return Err(Error::Layout {
                batch: self.batch as usize,
                world: self.world as usize,
            });
        }
        Ok(())
    }

    fn local_batch(&self) -> u64 {
        self.batch / self.world
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CLIP")]
    Clip,
    #[serde(rename = "BASIC")]
    Basic,
    #[serde(rename = "DisCo")]
    DisCo,
    #[serde(rename = "DisCo*")]
    DisCoStar,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Clip,
        Method::Basic,
        Method::DisCo,
        Method::DisCoStar,
    ];

    /// Whether the backbone keeps only one layer's activations alive.
    fn light_backbone(self) -> bool {
        matches!(self, Method::Basic | Method::DisCoStar)
    }

    /// Whether the loss is decomposed across ranks.
    fn decomposed(self) -> bool {
        matches!(self, Method::DisCo | Method::DisCoStar)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Clip => "CLIP",
            Method::Basic => "BASIC",
            Method::DisCo => "DisCo",
            Method::DisCoStar => "DisCo*",
        })
    }
}

/// One row of a cost table. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "N")]
    pub world: u64,
    #[serde(rename = "L")]
    pub layers: u64,
    #[serde(rename = "D")]
    pub dim: u64,
    pub backbone_elements: u64,
    pub loss_elements: u64,
    pub total_elements: u64,
    pub loss_flops: u64,
    pub bytes: u64,
}

impl CostReport {
    fn assemble(
        method: Method,
        inputs: &CostInputs,
        backbone_elements: u64,
        loss_elements: u64,
        loss_flops: u64,
    ) -> Result<Self> {
        let total_elements = checked(backbone_elements.checked_add(loss_elements))?;
        Ok(Self {
            method,
            batch: inputs.batch,
            world: inputs.world,
            layers: inputs.layers,
            dim: inputs.dim,
            backbone_elements,
            loss_elements,
            total_elements,
            loss_flops,
            bytes: checked(total_elements.checked_mul(inputs.bytes_per_scalar))?,
        })
    }

    /// Bytes attributable to the loss scope alone.
    pub fn loss_bytes(&self) -> u64 {
        self.loss_elements * (self.bytes / self.total_elements.max(1))
    }
}

fn checked(v: Option<u64>) -> Result<u64> {
    v.ok_or_else(|| Error::Domain("cost figure overflows u64".into()))
}

fn product(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Domain("cost figure overflows u64".into()))
}

pub fn analytic_footprint(inputs: &CostInputs, method: Method) -> Result<CostReport> {
    inputs.validate()?;
    let b = inputs.local_batch();
    let backbone = if method.light_backbone() {
        product(&[b, inputs.dim])?
    } else {
        product(&[b, inputs.layers, inputs.dim])?
    };
    let (loss_elements, loss_flops) = if method.decomposed() {
        (
            product(&[2, b, inputs.batch])?,
            product(&[2, b, inputs.batch, inputs.dim])?,
        )
    } else {
        (
            product(&[inputs.batch, inputs.batch])?,
            product(&[inputs.batch, inputs.batch, inputs.dim])?,
        )
    };
    CostReport::assemble(method, inputs, backbone, loss_elements, loss_flops)
}

/// All four methods in table order.
pub fn analytic_table(inputs: &CostInputs) -> Result<Vec<CostReport>> {
    Method::ALL
        .iter()
        .map(|&m| analytic_footprint(inputs, m))
        .collect()
}

/// Fraction of loss-scope memory saved by decomposition: `max(0, 1 − 2/N)`.
pub fn savings_fraction(world: u64) -> Result<Ratio<u64>> {
    if world == 0 {
        return Err(Error::Domain("world size must be >= 1".into()));
    }
    if world <= 2 {
        return Ok(Ratio::from_integer(0));
    }
    Ok(Ratio::new(world - 2, world))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collective {
    AllGather,
    AllReduce,
}

/// Elements received per rank. `all_reduce` is costed like the equivalent
/// `all_gather`.
pub fn bytes_moved(collective: Collective, buffer_elements: u64, world: u64) -> u64 {
    match collective {
        Collective::AllGather | Collective::AllReduce => world * buffer_elements,
    }
}

/// Problem sizes for an instrumented run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasureSizes {
    pub batch: usize,
    pub world: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Counters from one instrumented step, maximized over ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    /// Loss-scope figures in the analytic schema, with no backbone (`L = 0`).
    pub report: CostReport,
    /// Raw loss-scope FLOP counter (two per multiply-add).
    pub loss_flops_counted: u64,
    pub exchange_peak_elements: u64,
    pub elements_received: u64,
}

const MEASURE_TEMPERATURE: f64 = 10.0;

/// Runs one instrumented step of the replicated full-batch path
/// ([`StepKind::Replicated`], reported as CLIP) or the decomposed path
/// ([`StepKind::Disco`], reported as DisCo) on seeded unit features.
pub fn measured_footprint<T: Scalar>(
    kind: StepKind,
    sizes: MeasureSizes,
    scheduler: Scheduler,
) -> Result<Measurement> {
    if sizes.batch > MAX_MEASURED_BATCH {
        return Err(Error::Domain(format!(
            "batch {} exceeds the measured limit of {MAX_MEASURED_BATCH}",
            sizes.batch
        )));
    }
    let inputs = CostInputs::new(
        sizes.batch as u64,
        sizes.world as u64,
        1,
        sizes.dim as u64,
        T::BYTES as u64,
    )?;
    let image: DenseMatrix<T> = seeded_unit_rows(sizes.batch, sizes.dim, sizes.seed).cast();
    let text: DenseMatrix<T> =
        seeded_unit_rows(sizes.batch, sizes.dim, sizes.seed.wrapping_add(1)).cast();
    let config = SimConfig {
        world_size: sizes.world,
        temperature: T::from_f64(MEASURE_TEMPERATURE),
        scheduler,
        kind,
        mutation: None,
    };
    let step = simulate_step(&image, &text, &config)?;
    let method = match kind {
        StepKind::Replicated => Method::Clip,
        StepKind::Disco => Method::DisCo,
    };
    let counted = step.max_loss_flops();
    let mut report = CostReport::assemble(method, &inputs, 0, step.max_loss_peak(), counted / 2)?;
    report.layers = 0;
    Ok(Measurement {
        report,
        loss_flops_counted: counted,
        exchange_peak_elements: step
            .meters
            .iter()
            .map(|m| m.exchange.peak_live_elements)
            .max()
            .unwrap_or(0),
        elements_received: step.elements_received.iter().copied().max().unwrap_or(0),
    })
}
