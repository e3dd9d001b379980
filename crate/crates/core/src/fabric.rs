//! In-process rank group with `all_gather`, `all_reduce` and `barrier`.
//!
//! A rank program is an async closure that receives its [`RankEndpoint`].
//! The same program runs under two schedulers:
//!
//! * [`Scheduler::Lockstep`] polls every rank on the calling thread,
//!   round-robin over ranks whose wakers have fired. A stalled group is
//!   reported as [`FabricError::Deadlock`]. [`explore_schedules`] reuses this
//!   executor to enumerate every interleaving of a small program.
//! * [`Scheduler::Concurrent`] runs one OS thread per rank and converts a
//!   rank that never arrives into [`FabricError::Timeout`].
//!
//! Reductions always accumulate contributions in ascending rank order,
//! starting from rank 0's buffer, so results are bitwise identical across
//! ranks, runs and schedulers.

use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Wake, Waker};
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dense::{DenseMatrix, Scalar};

/// Default time a concurrent rank waits for its peers.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Environment variable selecting the scheduler for the CLI.
pub const SCHEDULER_ENV: &str = "DISCO_SCHEDULER";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("collective contract violated at call {call}: {detail}")]
    Contract { call: u64, detail: String },

    #[error("rank {rank} timed out after {timeout:?} at collective call {call}; missing ranks {missing:?}")]
    Timeout {
        rank: usize,
        call: u64,
        missing: Vec<usize>,
        timeout: Duration,
    },

    #[error("deadlock: ranks {blocked:?} wait on collectives that can never complete")]
    Deadlock { blocked: Vec<usize> },

    #[error("world size must be at least 1")]
    EmptyWorld,

    #[error("unknown scheduler {0:?} (expected lockstep or concurrent)")]
    UnknownScheduler(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    #[default]
    Lockstep,
    Concurrent {
        timeout: Duration,
    },
}

impl Scheduler {
    pub fn concurrent() -> Self {
        Scheduler::Concurrent {
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn parse(name: &str) -> Result<Self, FabricError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "lockstep" => Ok(Scheduler::Lockstep),
            "concurrent" => Ok(Scheduler::concurrent()),
            other => Err(FabricError::UnknownScheduler(other.to_string())),
        }
    }

    /// Reads [`SCHEDULER_ENV`]; unset means lockstep.
    pub fn from_env() -> Result<Self, FabricError> {
        match std::env::var(SCHEDULER_ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => Ok(Scheduler::Lockstep),
        }
    }

    fn timeout(&self) -> Option<Duration> {
        match self {
            Scheduler::Lockstep => None,
            Scheduler::Concurrent { timeout } => Some(*timeout),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Gather,
    Reduce(ReduceOp),
    Barrier,
}

type Outcome<T> = Result<Arc<DenseMatrix<T>>, FabricError>;

struct Round<T> {
    slots: Vec<Option<(Kind, DenseMatrix<T>)>>,
    arrived: usize,
    collected: usize,
    outcome: Option<Outcome<T>>,
    wakers: Vec<Option<Waker>>,
}

impl<T: Scalar> Round<T> {
    fn new(world_size: usize) -> Self {
        Self {
            slots: (0..world_size).map(|_| None).collect(),
            arrived: 0,
            collected: 0,
            outcome: None,
            wakers: vec![None; world_size],
        }
    }

    fn missing(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&r| self.slots[r].is_none())
            .collect()
    }

    fn complete(&mut self, call: u64) -> Outcome<T> {
        let contributions: Vec<(Kind, DenseMatrix<T>)> = self
            .slots
            .iter_mut()
            .map(|s| s.take().expect("all ranks arrived"))
            .collect();
        let kind = contributions[0].0;
        if let Some(r) = contributions.iter().position(|(k, _)| *k != kind) {
            return Err(FabricError::Contract {
                call,
                detail: format!(
                    "rank 0 issued {:?} but rank {r} issued {:?}",
                    kind, contributions[r].0
                ),
            });
        }
        let shape = contributions[0].1.shape();
        if contributions.iter().any(|(_, m)| m.shape() != shape) {
            let shapes: Vec<_> = contributions.iter().map(|(_, m)| m.shape()).collect();
            return Err(FabricError::Contract {
                call,
                detail: format!("{kind:?} with mismatched shapes per rank {shapes:?}"),
            });
        }
        let mut parts = contributions.into_iter().map(|(_, m)| m);
        let result = match kind {
            Kind::Barrier => DenseMatrix::zeros(0, 0),
            Kind::Gather => {
                let parts: Vec<_> = parts.collect();
                DenseMatrix::vstack(&parts).expect("shapes checked")
            }
            Kind::Reduce(op) => {
                let mut acc = parts.next().expect("world size >= 1");
                for m in parts {
                    acc.add_assign(&m).expect("shapes checked");
                }
                if op == ReduceOp::Avg {
                    let n = T::from_usize(self.slots.len());
                    for x in acc.as_mut_slice() {
                        *x = *x / n;
                    }
                }
                acc
            }
        };
        Ok(Arc::new(result))
    }
}

struct Shared<T> {
    world_size: usize,
    rounds: Mutex<HashMap<u64, Round<T>>>,
}

impl<T: Scalar> Shared<T> {
    fn lock(&self) -> MutexGuard<'_, HashMap<u64, Round<T>>> {
        self.rounds.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn deposit(&self, call: u64, rank: usize, kind: Kind, payload: DenseMatrix<T>) {
        let mut rounds = self.lock();
        let round = rounds
            .entry(call)
            .or_insert_with(|| Round::new(self.world_size));
        debug_assert!(round.slots[rank].is_none(), "rank deposited twice");
        round.slots[rank] = Some((kind, payload));
        round.arrived += 1;
        if round.arrived == self.world_size {
            round.outcome = Some(round.complete(call));
            for w in round.wakers.iter_mut().filter_map(Option::take) {
                w.wake();
            }
        }
    }
}

/// A group of `world_size` simulated ranks sharing one collective fabric.
pub struct RankGroup<T = f64> {
    shared: Arc<Shared<T>>,
    scheduler: Scheduler,
}

impl<T: Scalar> RankGroup<T> {
    pub fn new(world_size: usize, scheduler: Scheduler) -> Result<Self, FabricError> {
        if world_size == 0 {
            return Err(FabricError::EmptyWorld);
        }
        Ok(Self {
            shared: Arc::new(Shared {
                world_size,
                rounds: Mutex::new(HashMap::new()),
            }),
            scheduler,
        })
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    fn endpoints(&self) -> Vec<RankEndpoint<T>> {
        self.shared.lock().clear();
        (0..self.world_size())
            .map(|rank| RankEndpoint {
                rank,
                shared: Arc::clone(&self.shared),
                timeout: self.scheduler.timeout(),
                next_call: 0,
                elements_received: 0,
            })
            .collect()
    }

    /// Runs `program` once per rank and returns the per-rank outputs in
    /// rank order.
    pub fn run<'a, F, Fut, R>(&self, program: F) -> Result<Vec<R>, FabricError>
    where
        F: Fn(RankEndpoint<T>) -> Fut,
        Fut: Future<Output = R> + Send + 'a,
        R: Send,
    {
        let tasks: Vec<Task<'a, R>> = self
            .endpoints()
            .into_iter()
            .map(|ep| Box::pin(program(ep)) as Task<'a, R>)
            .collect();
        match self.scheduler {
            Scheduler::Lockstep => drive_lockstep(tasks, &mut round_robin(self.world_size())),
            Scheduler::Concurrent { timeout } => Ok(drive_concurrent(tasks, timeout)),
        }
    }

    fn run_with_chooser<'a, F, Fut, R>(
        &self,
        program: F,
        choose: &mut dyn FnMut(&[usize]) -> usize,
    ) -> Result<Vec<R>, FabricError>
    where
        F: Fn(RankEndpoint<T>) -> Fut,
        Fut: Future<Output = R> + Send + 'a,
        R: Send,
    {
        let tasks: Vec<Task<'a, R>> = self
            .endpoints()
            .into_iter()
            .map(|ep| Box::pin(program(ep)) as Task<'a, R>)
            .collect();
        drive_lockstep(tasks, choose)
    }
}

/// One rank's handle on its group. Owned by exactly one rank program.
pub struct RankEndpoint<T = f64> {
    rank: usize,
    shared: Arc<Shared<T>>,
    timeout: Option<Duration>,
    next_call: u64,
    elements_received: u64,
}

impl<T: Scalar> RankEndpoint<T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    /// Elements this rank has received through gathers and reductions,
    /// counting `N` blocks per collective.
    pub fn elements_received(&self) -> u64 {
        self.elements_received
    }

    /// Rank-order concatenation of every rank's `local` block.
    pub async fn all_gather(
        &mut self,
        local: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>, FabricError> {
        self.elements_received += (self.world_size() * local.len()) as u64;
        let out = self.collective(Kind::Gather, local.clone()).await?;
        Ok((*out).clone())
    }

    /// Elementwise sum (or mean) of every rank's `buffer`.
    pub async fn all_reduce(
        &mut self,
        buffer: &DenseMatrix<T>,
        op: ReduceOp,
    ) -> Result<DenseMatrix<T>, FabricError> {
        self.elements_received += (self.world_size() * buffer.len()) as u64;
        let out = self.collective(Kind::Reduce(op), buffer.clone()).await?;
        Ok((*out).clone())
    }

    pub async fn all_reduce_scalar(&mut self, value: T, op: ReduceOp) -> Result<T, FabricError> {
        let buf = DenseMatrix::from_vec_unchecked(1, 1, vec![value]);
        Ok(self.all_reduce(&buf, op).await?.get(0, 0))
    }

    pub async fn barrier(&mut self) -> Result<(), FabricError> {
        self.collective(Kind::Barrier, DenseMatrix::zeros(0, 0))
            .await
            .map(|_| ())
    }

    async fn collective(
        &mut self,
        kind: Kind,
        payload: DenseMatrix<T>,
    ) -> Result<Arc<DenseMatrix<T>>, FabricError> {
        let call = self.next_call;
        self.next_call += 1;
        self.shared.deposit(call, self.rank, kind, payload);
        WaitRound {
            shared: &self.shared,
            call,
            rank: self.rank,
            timeout: self.timeout,
            deadline: None,
        }
        .await
    }
}

struct WaitRound<'a, T> {
    shared: &'a Shared<T>,
    call: u64,
    rank: usize,
    timeout: Option<Duration>,
    deadline: Option<Instant>,
}

impl<T: Scalar> Future for WaitRound<'_, T> {
    type Output = Outcome<T>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let (call, rank, world) = (self.call, self.rank, self.shared.world_size);
        if let (Some(t), None) = (self.timeout, self.deadline) {
            self.deadline = Some(Instant::now() + t);
        }
        let mut rounds = self.shared.lock();
        let round = rounds.get_mut(&call).expect("deposit precedes wait");
        if let Some(outcome) = round.outcome.clone() {
            round.collected += 1;
            if round.collected == world {
                rounds.remove(&call);
            }
            return Poll::Ready(outcome);
        }
        if let (Some(deadline), Some(timeout)) = (self.deadline, self.timeout) {
            if Instant::now() >= deadline {
                return Poll::Ready(Err(FabricError::Timeout {
                    rank,
                    call,
                    missing: round.missing(),
                    timeout,
                }));
            }
        }
        round.wakers[rank] = Some(cx.waker().clone());
        Poll::Pending
    }
}

/// Yields once to the scheduler. Lets tests stagger rank progress.
pub async fn yield_now() {
    struct YieldNow(bool);
    impl Future for YieldNow {
        type Output = ();
        fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
            if self.0 {
                Poll::Ready(())
            } else {
                self.0 = true;
                cx.waker().wake_by_ref();
                Poll::Pending
            }
        }
    }
    YieldNow(false).await
}

type Task<'a, R> = Pin<Box<dyn Future<Output = R> + Send + 'a>>;

struct ReadyFlag(AtomicBool);

impl Wake for ReadyFlag {
    fn wake(self: Arc<Self>) {
        self.0.store(true, Ordering::SeqCst);
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.0.store(true, Ordering::SeqCst);
    }
}

fn round_robin(world_size: usize) -> impl FnMut(&[usize]) -> usize {
    let mut cursor = 0;
    move |ready: &[usize]| {
        let idx = ready.iter().position(|&r| r >= cursor).unwrap_or(0);
        cursor = (ready[idx] + 1) % world_size;
        idx
    }
}

/// Single-threaded executor. `choose` receives the ready ranks in
/// ascending order and returns the index of the one to poll next.
fn drive_lockstep<R>(
    mut tasks: Vec<Task<'_, R>>,
    choose: &mut dyn FnMut(&[usize]) -> usize,
) -> Result<Vec<R>, FabricError> {
    let n = tasks.len();
    let flags: Vec<Arc<ReadyFlag>> = (0..n)
        .map(|_| Arc::new(ReadyFlag(AtomicBool::new(true))))
        .collect();
    let wakers: Vec<Waker> = flags.iter().map(|f| Waker::from(Arc::clone(f))).collect();
    let mut outputs: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut ready = Vec::with_capacity(n);
    loop {
        ready.clear();
        ready.extend((0..n).filter(|&r| outputs[r].is_none() && flags[r].0.load(Ordering::SeqCst)));
        if ready.is_empty() {
            let blocked: Vec<usize> = (0..n).filter(|&r| outputs[r].is_none()).collect();
            if blocked.is_empty() {
                return Ok(outputs.into_iter().map(|o| o.expect("finished")).collect());
            }
            return Err(FabricError::Deadlock { blocked });
        }
        let rank = ready[choose(&ready)];
        flags[rank].0.store(false, Ordering::SeqCst);
        let mut cx = Context::from_waker(&wakers[rank]);
        if let Poll::Ready(out) = tasks[rank].as_mut().poll(&mut cx) {
            outputs[rank] = Some(out);
        }
    }
}

struct ThreadWaker(Thread);

impl Wake for ThreadWaker {
    fn wake(self: Arc<Self>) {
        self.0.unpark();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.0.unpark();
    }
}

fn block_on<R>(mut task: Task<'_, R>, poll_interval: Duration) -> R {
    let waker = Waker::from(Arc::new(ThreadWaker(thread::current())));
    let mut cx = Context::from_waker(&waker);
    loop {
        if let Poll::Ready(out) = task.as_mut().poll(&mut cx) {
            return out;
        }
        thread::park_timeout(poll_interval);
    }
}

fn drive_concurrent<R: Send>(tasks: Vec<Task<'_, R>>, timeout: Duration) -> Vec<R> {
    let poll_interval = timeout.min(Duration::from_millis(50));
    thread::scope(|s| {
        let handles: Vec<_> = tasks
            .into_iter()
            .enumerate()
            .map(|(rank, task)| {
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(s, move || block_on(task, poll_interval))
                    .expect("spawn rank worker")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Result of [`explore_schedules`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exploration {
    pub schedules: usize,
    /// False when `limit` stopped the search before every schedule ran.
    pub exhausted: bool,
}

/// Runs `program` under every lockstep interleaving, up to `limit` runs.
///
/// An interleaving is the sequence of ranks chosen whenever more than one
/// rank is ready. `visit` receives that sequence and the run's outcome.
pub fn explore_schedules<T, F, Fut, R>(
    world_size: usize,
    program: F,
    limit: usize,
    mut visit: impl FnMut(&[usize], Result<Vec<R>, FabricError>),
) -> Result<Exploration, FabricError>
where
    T: Scalar,
    F: Fn(RankEndpoint<T>) -> Fut,
    Fut: Future<Output = R> + Send,
    R: Send,
{
    let group = RankGroup::<T>::new(world_size, Scheduler::Lockstep)?;
    // (choice index, number of options) at every decision point.
    let mut path: Vec<(usize, usize)> = Vec::new();
    let mut schedules = 0;
    loop {
        let mut depth = 0;
        let mut trace = Vec::new();
        let outcome = group.run_with_chooser(&program, &mut |ready: &[usize]| {
            let idx = if depth < path.len() {
                path[depth].0
            } else {
                path.push((0, ready.len()));
                0
            };
            depth += 1;
            trace.push(ready[idx]);
            idx
        });
        schedules += 1;
        visit(&trace, outcome);
        while matches!(path.last(), Some(&(c, k)) if c + 1 >= k) {
            path.pop();
        }
        match path.last_mut() {
            None => {
                return Ok(Exploration {
                    schedules,
                    exhausted: true,
                })
            }
            Some(last) => last.0 += 1,
        }
        if schedules >= limit {
            return Ok(Exploration {
                schedules,
                exhausted: false,
            });
        }
    }
}
