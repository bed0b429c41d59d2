//! Training execution: one worker per rank, each paired with a communication
//! thread that owns the rank's ring endpoint.
//!
//! The worker drives forward and backward passes and hands finished gradient
//! buckets to its communication thread mid-backward, so ring transfers run
//! while the remaining layers still differentiate. Every rank ships its local
//! mean gradient; the received ring sum is divided by the world size, which
//! is exact for power-of-two worlds and keeps the update bitwise independent
//! of how the batch was sharded.
//!
//! Both threads append to one shared trace. Events are stamped under the
//! trace lock, so list order equals time order and the trace validator can
//! replay the schedule afterwards. Trace bytes count logical f32 gradient
//! bytes even when the wire carries fp16; wire-level traffic lives in the
//! endpoint counters instead.

use crate::comm::wire::Dtype;
use crate::comm::{
    allgather_flags, barrier, bootstrap_loopback, bootstrap_tcp, chunk_span, ring_allreduce,
    CommError, RingEndpoint, TcpBootstrap, WireStats,
};
use crate::harness::config::{RunConfig, Scheduling, Transport};
use crate::harness::csv::MetricsRow;
use crate::harness::mlperf::{epoch_value, parse_log, EventLog};
use crate::model::{
    epoch_plan, forward_eval, forward_train, gen_dataset, init_params, iterations_per_epoch,
    shard, backward_with, BatchNormState, Dataset, FlatParams, ModelSpec, ParamSegment,
};
use crate::optim::{sgd_step, Decay, LrSchedule, MomentumState};
use crate::sched::{make_buckets, validate_trace, BucketPlan, GroupTracker, TraceEvent, TraceKind};
use std::net::TcpListener;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

const BOOT_TIMEOUT: Duration = Duration::from_secs(30);

/// Buckets a model's gradient segments in backward-completion order, which
/// is the reverse of parameter layout order.
pub fn bucket_plan_for(spec: &ModelSpec, threshold_bytes: u64) -> BucketPlan {
    let sizes: Vec<(usize, u64)> = spec
        .segments()
        .iter()
        .enumerate()
        .rev()
        .map(|(id, s)| (id, 4 * s.len as u64))
        .collect();
    make_buckets(&sizes, threshold_bytes)
}

/// One generator call produces training and held-out evaluation data from
/// the same class blobs, split disjointly.
pub fn split_holdout(cfg: &RunConfig) -> Result<(Dataset, Dataset), String> {
    let spec = cfg.model_spec()?;
    let d = spec.input_dim();
    let classes = spec.classes();
    let all = gen_dataset(cfg.dataset_seed, cfg.dataset_n + cfg.eval_n, d, classes);
    let n = cfg.dataset_n;
    let train = Dataset {
        features: all.features[..n * d].to_vec(),
        labels: all.labels[..n].to_vec(),
        n,
        d,
        classes,
        seed: all.seed,
    };
    let eval = Dataset {
        features: all.features[n * d..].to_vec(),
        labels: all.labels[n..].to_vec(),
        n: cfg.eval_n,
        d,
        classes,
        seed: all.seed,
    };
    Ok((train, eval))
}

/// Shared event sink. The timestamp is taken while holding the lock so the
/// event list is ordered by time even with two writers.
#[derive(Clone)]
struct TraceSink {
    events: Arc<Mutex<Vec<TraceEvent>>>,
    clock: Instant,
}

impl TraceSink {
    fn new() -> TraceSink {
        TraceSink {
            events: Arc::default(),
            clock: Instant::now(),
        }
    }

    fn record(&self, iteration: u64, kind: TraceKind) {
        let mut events = self.events.lock().unwrap();
        let timestamp_ns = self.clock.elapsed().as_nanos() as u64;
        events.push(TraceEvent {
            timestamp_ns,
            iteration,
            kind,
        });
    }

    fn take(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut *self.events.lock().unwrap())
    }
}

enum CommReq {
    Allreduce {
        iteration: u64,
        group: u32,
        dtype: Dtype,
        traced: bool,
        buf: Vec<f32>,
    },
    Flags {
        word: u32,
    },
    Barrier,
}

enum CommResp {
    Allreduce { group: u32, buf: Vec<f32> },
    /// Round completed; the gathered word is discarded because group
    /// composition is already static.
    Flags,
    Barrier,
}

/// Serves ring collectives for one rank until the request channel closes or
/// a collective fails, then reports the endpoint's byte counters.
fn comm_thread(
    mut ep: RingEndpoint,
    reqs: Receiver<CommReq>,
    resps: Sender<Result<CommResp, CommError>>,
    sink: TraceSink,
) -> WireStats {
    for req in reqs {
        let result = match req {
            CommReq::Allreduce {
                iteration,
                group,
                dtype,
                traced,
                mut buf,
            } => {
                if traced {
                    sink.record(
                        iteration,
                        TraceKind::AllreduceStart {
                            group,
                            bytes: 4 * buf.len() as u64,
                        },
                    );
                }
                let r = ring_allreduce(&mut buf, &mut ep, iteration, group, dtype);
                if traced && r.is_ok() {
                    sink.record(iteration, TraceKind::AllreduceEnd { group });
                }
                r.map(|()| CommResp::Allreduce { group, buf })
            }
            CommReq::Flags { word } => allgather_flags(&[word], &mut ep).map(|_| CommResp::Flags),
            CommReq::Barrier => barrier(&mut ep).map(|()| CommResp::Barrier),
        };
        let failed = result.is_err();
        if resps.send(result).is_err() || failed {
            break;
        }
    }
    ep.stats()
}

/// How a worker obtains its ring endpoint. TCP bootstrap must run on the
/// worker's own thread so all ranks rendezvous concurrently.
enum EndpointSource {
    Ready(Box<RingEndpoint>),
    Tcp {
        boot: TcpBootstrap,
        listener: Option<TcpListener>,
    },
}

impl EndpointSource {
    fn connect(self) -> Result<RingEndpoint, CommError> {
        match self {
            EndpointSource::Ready(ep) => Ok(*ep),
            EndpointSource::Tcp { boot, listener } => bootstrap_tcp(&boot, listener),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub epoch: u64,
    pub accuracy: f64,
}

/// Everything one rank produced. Metrics, log lines, and evaluation points
/// are filled on rank 0; other ranks leave them empty.
#[derive(Debug)]
pub struct RankResult {
    pub rank: usize,
    pub params: FlatParams,
    pub bn_states: Vec<Option<BatchNormState>>,
    pub trace: Vec<TraceEvent>,
    pub stats: WireStats,
    pub rows: Vec<MetricsRow>,
    pub log_lines: Vec<String>,
    pub evals: Vec<EvalPoint>,
    /// Global images consumed by applied steps.
    pub images: u64,
    /// Optimizer steps applied.
    pub updates: u64,
    /// Iteration whose gradients came back non-finite, if any. Its trace
    /// events have no step and are excluded from validation.
    pub aborted_iteration: Option<u64>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub per_rank: Vec<RankResult>,
    pub evals: Vec<EvalPoint>,
    pub rows: Vec<MetricsRow>,
    pub log_lines: Vec<String>,
    /// run_final minus run_start, recovered by parsing the emitted log.
    pub elapsed_seconds: f64,
    pub images_per_sec: f64,
    pub updates: u64,
    pub diverged: bool,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }

    pub fn log_text(&self) -> String {
        let mut text = self.log_lines.join("\n");
        text.push('\n');
        text
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("rank {rank}: {message}")]
    Worker { rank: usize, message: String },
    #[error("rank {rank} trace violations: {violations:?}")]
    Trace {
        rank: usize,
        violations: Vec<String>,
    },
    #[error("internal: {0}")]
    Internal(String),
}

struct WorkerCtx<'a> {
    cfg: &'a RunConfig,
    spec: &'a ModelSpec,
    plan: &'a BucketPlan,
    schedule: &'a LrSchedule,
    train: &'a Dataset,
    eval: &'a Dataset,
}

fn pack_group(plan: &BucketPlan, group: u32, grads: &[f32], segments: &[ParamSegment]) -> Vec<f32> {
    let g = &plan.groups[group as usize];
    let mut buf = Vec::with_capacity((g.bytes / 4) as usize);
    for &s in &g.members {
        buf.extend_from_slice(&grads[segments[s].range()]);
    }
    buf
}

fn run_worker(ctx: &WorkerCtx<'_>, rank: usize, source: EndpointSource) -> Result<RankResult, String> {
    let cfg = ctx.cfg;
    let world = cfg.world_size;
    let bpr = cfg.batch_per_rank;
    let dtype = if cfg.fp16_comm { Dtype::F16 } else { Dtype::F32 };
    let groups = ctx.plan.group_count();

    let ep = source.connect().map_err(|e| format!("bootstrap: {e}"))?;
    let sink = TraceSink::new();
    let (req_tx, req_rx) = mpsc::channel::<CommReq>();
    let (resp_tx, resp_rx) = mpsc::channel::<Result<CommResp, CommError>>();
    let comm = {
        let sink = sink.clone();
        thread::Builder::new()
            .name(format!("comm-{rank}"))
            .spawn(move || comm_thread(ep, req_rx, resp_tx, sink))
            .expect("spawn comm thread")
    };
    // Any early return must close the request channel first so the
    // communication thread stops and can be joined.
    macro_rules! bail {
        ($msg:expr) => {{
            drop(req_tx);
            let _ = comm.join();
            return Err($msg);
        }};
    }

    let segments = ctx.spec.segments();
    let mut params = init_params(ctx.spec, cfg.seed);
    let mut bn_states = ctx.spec.fresh_bn_states();
    let mut momentum = MomentumState::new(params.values.len(), cfg.momentum);
    let lars = cfg.lars();
    let mut grads = vec![0.0f32; params.values.len()];
    // Staging copy filled segment by segment as backward finishes them, so
    // buckets can ship while `grads` is still being written.
    let mut staged = vec![0.0f32; params.values.len()];
    let mut tracker = GroupTracker::new(ctx.plan);

    let mut log = EventLog::new(&cfg.model_name);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut images: u64 = 0;
    let mut updates: u64 = 0;
    let mut aborted_iteration: Option<u64> = None;
    let mut it: u64 = 0;

    let epoch_shape = epoch_plan(ctx.train.n, world, bpr);
    if rank == 0 {
        log.event("train_loop", None);
    }

    'epochs: for epoch in 0..cfg.epochs {
        if rank == 0 {
            log.event("train_epoch", Some(epoch.to_string()));
        }
        let indices = shard(ctx.train, epoch, rank, world, bpr);
        for t in 0..epoch_shape.iterations() {
            let iter_start = Instant::now();
            let b = epoch_shape.batch_at(t, bpr);
            // Full iterations sit at t * bpr; the underfilled tail starts
            // right after them, which the same formula yields.
            let base = t * bpr;
            let mut feats = Vec::with_capacity(b * ctx.train.d);
            let mut labels = Vec::with_capacity(b);
            for &i in &indices[base..base + b] {
                feats.extend_from_slice(ctx.train.sample(i as usize));
                labels.push(ctx.train.labels[i as usize]);
            }

            let (loss, cache) = forward_train(
                ctx.spec,
                &params,
                &mut bn_states,
                &feats,
                &labels,
                cfg.label_smoothing,
            );
            tracker.reset();
            backward_with(&cache, &mut grads, |seg, slice| {
                staged[segments[seg].range()].copy_from_slice(slice);
                sink.record(it, TraceKind::BackwardDone { segment: seg });
                let outcome = tracker
                    .on_backward_done(seg)
                    .expect("plan covers every segment once");
                if let Some(g) = outcome.became_ready {
                    sink.record(it, TraceKind::GroupReady { group: g });
                }
                if cfg.scheduling != Scheduling::None {
                    for g in outcome.launches {
                        if cfg.scheduling == Scheduling::DynamicAllgather {
                            let _ = req_tx.send(CommReq::Flags { word: 1 << (g % 32) });
                        }
                        let buf = pack_group(ctx.plan, g, &staged, &segments);
                        let _ = req_tx.send(CommReq::Allreduce {
                            iteration: it,
                            group: g,
                            dtype,
                            traced: true,
                            buf,
                        });
                    }
                }
            });
            drop(cache);
            if cfg.scheduling == Scheduling::None {
                for g in 0..groups as u32 {
                    let buf = pack_group(ctx.plan, g, &staged, &segments);
                    let _ = req_tx.send(CommReq::Allreduce {
                        iteration: it,
                        group: g,
                        dtype,
                        traced: true,
                        buf,
                    });
                }
            }

            let expected = match cfg.scheduling {
                Scheduling::DynamicAllgather => 2 * groups,
                _ => groups,
            };
            let mut reduced: Vec<Option<Vec<f32>>> = vec![None; groups];
            for _ in 0..expected {
                match resp_rx.recv() {
                    Ok(Ok(CommResp::Allreduce { group, buf })) => {
                        reduced[group as usize] = Some(buf)
                    }
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => bail!(format!("allreduce: {e}")),
                    Err(_) => bail!("communication thread stopped".to_string()),
                }
            }
            // The ring delivered the sum of per-rank mean gradients; dividing
            // by the world yields the global mean. Exact for power-of-two
            // worlds, so sharding does not perturb the update.
            let world_f = world as f32;
            for (gi, g) in ctx.plan.groups.iter().enumerate() {
                let buf = reduced[gi].take().expect("one response per group");
                let mut off = 0;
                for &s in &g.members {
                    let len = segments[s].len;
                    let dst = &mut grads[segments[s].range()];
                    for (d, &v) in dst.iter_mut().zip(&buf[off..off + len]) {
                        *d = v / world_f;
                    }
                    off += len;
                }
            }

            let lr = ctx.schedule.lr_at(it);
            match sgd_step(&mut params, &grads, &mut momentum, ctx.schedule, &lars, it) {
                Ok(()) => {
                    sink.record(it, TraceKind::StepApplied);
                    updates += 1;
                    images += (b * world) as u64;
                    if rank == 0 {
                        let dt = iter_start.elapsed().as_secs_f64().max(1e-9);
                        rows.push(MetricsRow {
                            epoch,
                            iter: it,
                            lr: Some(lr),
                            loss: Some(loss),
                            eval_acc: None,
                            imgs_per_sec: Some((b * world) as f64 / dt),
                        });
                    }
                    it += 1;
                }
                Err(_) => {
                    // Post-allreduce gradients are bitwise identical on all
                    // ranks, so every rank rejects this same iteration and
                    // the abort needs no extra coordination.
                    aborted_iteration = Some(it);
                    break 'epochs;
                }
            }
        }

        let due = epoch % cfg.eval_period == cfg.eval_offset || epoch + 1 == cfg.epochs;
        if due {
            if rank == 0 {
                log.event("eval_start", None);
            }
            let span = chunk_span(ctx.eval.n, world, rank);
            let (correct, total) = if span.is_empty() {
                (0usize, 0usize)
            } else {
                let mut feats = Vec::with_capacity(span.len() * ctx.eval.d);
                let mut labels = Vec::with_capacity(span.len());
                for i in span {
                    feats.extend_from_slice(ctx.eval.sample(i));
                    labels.push(ctx.eval.labels[i]);
                }
                let r = forward_eval(
                    ctx.spec,
                    &params,
                    &bn_states,
                    &feats,
                    &labels,
                    cfg.label_smoothing,
                );
                (r.correct, r.total)
            };
            // Counts are small integers, exact in f32, and integer sums stay
            // exact through the ring. Always reduced in f32.
            let counts = vec![correct as f32, total as f32];
            if req_tx
                .send(CommReq::Allreduce {
                    iteration: it,
                    group: groups as u32,
                    dtype: Dtype::F32,
                    traced: false,
                    buf: counts,
                })
                .is_err()
            {
                bail!("communication thread stopped".to_string());
            }
            let buf = match resp_rx.recv() {
                Ok(Ok(CommResp::Allreduce { buf, .. })) => buf,
                Ok(Err(e)) => bail!(format!("eval allreduce: {e}")),
                _ => bail!("communication thread stopped".to_string()),
            };
            let accuracy = buf[0] as f64 / (buf[1] as f64).max(1.0);
            evals.push(EvalPoint { epoch, accuracy });
            if rank == 0 {
                log.event("eval_accuracy", Some(epoch_value(epoch, accuracy)));
                log.event("eval_stop", None);
                rows.push(MetricsRow {
                    epoch,
                    iter: it,
                    lr: None,
                    loss: None,
                    eval_acc: Some(accuracy),
                    imgs_per_sec: None,
                });
            }
            if let Some(target) = cfg.target_accuracy {
                // Aggregated accuracy is identical on every rank, so all
                // ranks stop together.
                if accuracy >= target {
                    break 'epochs;
                }
            }
        }
    }

    let _ = req_tx.send(CommReq::Barrier);
    let barrier_ok = matches!(resp_rx.recv(), Ok(Ok(CommResp::Barrier)));
    drop(req_tx);
    let stats = comm
        .join()
        .map_err(|_| "communication thread panicked".to_string())?;
    if !barrier_ok {
        return Err("final barrier failed".into());
    }

    Ok(RankResult {
        rank,
        params,
        bn_states,
        trace: sink.take(),
        stats,
        rows,
        log_lines: log.lines,
        evals,
        images,
        updates,
        aborted_iteration,
    })
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

fn schedule_for(cfg: &RunConfig, iters_per_epoch: usize) -> Result<LrSchedule, String> {
    if cfg.epochs > 0 {
        cfg.schedule(iters_per_epoch)
    } else {
        // Zero epochs run zero iterations; the schedule is never consulted.
        Ok(LrSchedule {
            base_lr: cfg.base_lr,
            warmup_iters: 0,
            total_iters: 1,
            decay: Decay::Constant,
        })
    }
}

fn validate_rank_trace(r: &RankResult, plan: &BucketPlan, grad_bytes: u64) -> Result<(), RunError> {
    let mut events = r.trace.clone();
    if let Some(aborted) = r.aborted_iteration {
        events.retain(|e| e.iteration != aborted);
    }
    let violations = validate_trace(&events, plan, grad_bytes);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(RunError::Trace {
            rank: r.rank,
            violations,
        })
    }
}

fn log_tail(model: &str) -> Vec<String> {
    let mut tail = EventLog::new(model);
    tail.event("run_stop", None);
    tail.event("run_final", None);
    tail.lines
}

/// Runs a whole training job in this process, one thread per rank. The tcp
/// transport here still uses threads, just connected over real sockets; the
/// command-line `train` subcommand is what spreads tcp ranks across
/// processes.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let spec = cfg.model_spec().map_err(RunError::Config)?;

    // The clock starts before any model or data work so elapsed time covers
    // initialization, as a wall-clock training record must.
    let mut pre = EventLog::new(&cfg.model_name);
    pre.event("eval_offset", Some(cfg.eval_offset.to_string()));
    pre.event("run_start", None);
    pre.event("run_set_random_seed", Some(cfg.seed.to_string()));

    let (train, eval) = split_holdout(cfg).map_err(RunError::Config)?;
    let plan = bucket_plan_for(&spec, cfg.bucket_bytes);
    let ipe = iterations_per_epoch(train.n, cfg.world_size, cfg.batch_per_rank);
    let schedule = schedule_for(cfg, ipe).map_err(RunError::Config)?;
    let ctx = WorkerCtx {
        cfg,
        spec: &spec,
        plan: &plan,
        schedule: &schedule,
        train: &train,
        eval: &eval,
    };

    let sources: Vec<EndpointSource> = match cfg.transport {
        Transport::Loopback => bootstrap_loopback(cfg.world_size)
            .into_iter()
            .map(|ep| EndpointSource::Ready(Box::new(ep)))
            .collect(),
        Transport::Tcp => {
            let listener = TcpListener::bind(&cfg.rendezvous)
                .map_err(|e| RunError::Config(format!("bind {}: {e}", cfg.rendezvous)))?;
            let addr = listener
                .local_addr()
                .map_err(|e| RunError::Internal(e.to_string()))?
                .to_string();
            let mut prebound = Some(listener);
            (0..cfg.world_size)
                .map(|rank| EndpointSource::Tcp {
                    boot: TcpBootstrap {
                        world: cfg.world_size,
                        rank,
                        rendezvous: addr.clone(),
                        timeout: BOOT_TIMEOUT,
                    },
                    listener: if rank == 0 { prebound.take() } else { None },
                })
                .collect()
        }
    };

    let mut outcomes = Vec::with_capacity(cfg.world_size);
    thread::scope(|s| {
        let handles: Vec<_> = sources
            .into_iter()
            .enumerate()
            .map(|(rank, source)| {
                let ctx = &ctx;
                thread::Builder::new()
                    .name(format!("worker-{rank}"))
                    .spawn_scoped(s, move || run_worker(ctx, rank, source))
                    .expect("spawn worker")
            })
            .collect();
        for h in handles {
            outcomes.push(h.join());
        }
    });

    let mut per_rank = Vec::with_capacity(outcomes.len());
    for (rank, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(Ok(r)) => per_rank.push(r),
            Ok(Err(message)) => return Err(RunError::Worker { rank, message }),
            Err(p) => {
                return Err(RunError::Worker {
                    rank,
                    message: panic_text(p),
                })
            }
        }
    }

    let grad_bytes = 4 * spec.param_count() as u64;
    for r in &per_rank {
        validate_rank_trace(r, &plan, grad_bytes)?;
    }

    let mut log_lines = pre.lines;
    log_lines.extend(per_rank[0].log_lines.iter().cloned());
    log_lines.extend(log_tail(&cfg.model_name));
    let parsed = parse_log(&log_lines.join("\n")).map_err(RunError::Internal)?;

    let diverged = per_rank[0].aborted_iteration.is_some();
    let updates = per_rank[0].updates;
    let images = per_rank[0].images;
    let evals = per_rank[0].evals.clone();
    let rows = per_rank[0].rows.clone();
    let elapsed_seconds = parsed.elapsed_seconds;
    Ok(RunSummary {
        per_rank,
        evals,
        rows,
        log_lines,
        elapsed_seconds,
        images_per_sec: images as f64 / elapsed_seconds.max(1e-9),
        updates,
        diverged,
    })
}

/// One rank's contribution when each rank is its own OS process. Rank 0
/// carries the run log (head, body, tail); other ranks leave it empty.
#[derive(Debug)]
pub struct ProcessRankOutcome {
    pub result: RankResult,
    pub log_lines: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub diverged: bool,
}

/// Runs exactly one rank, rendezvousing over tcp at the configured address.
/// Rank 0 binds the rendezvous listener itself.
pub fn run_process_rank(cfg: &RunConfig, rank: usize) -> Result<ProcessRankOutcome, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    if cfg.transport != Transport::Tcp {
        return Err(RunError::Config(
            "process workers rendezvous over tcp; set transport = \"tcp\"".into(),
        ));
    }
    if rank >= cfg.world_size {
        return Err(RunError::Config(format!(
            "rank {rank} outside world of {}",
            cfg.world_size
        )));
    }
    let spec = cfg.model_spec().map_err(RunError::Config)?;

    let mut pre = EventLog::new(&cfg.model_name);
    if rank == 0 {
        pre.event("eval_offset", Some(cfg.eval_offset.to_string()));
        pre.event("run_start", None);
        pre.event("run_set_random_seed", Some(cfg.seed.to_string()));
    }

    let (train, eval) = split_holdout(cfg).map_err(RunError::Config)?;
    let plan = bucket_plan_for(&spec, cfg.bucket_bytes);
    let ipe = iterations_per_epoch(train.n, cfg.world_size, cfg.batch_per_rank);
    let schedule = schedule_for(cfg, ipe).map_err(RunError::Config)?;
    let ctx = WorkerCtx {
        cfg,
        spec: &spec,
        plan: &plan,
        schedule: &schedule,
        train: &train,
        eval: &eval,
    };
    let source = EndpointSource::Tcp {
        boot: TcpBootstrap {
            world: cfg.world_size,
            rank,
            rendezvous: cfg.rendezvous.clone(),
            timeout: BOOT_TIMEOUT,
        },
        listener: None,
    };
    let result = run_worker(&ctx, rank, source).map_err(|message| RunError::Worker { rank, message })?;
    validate_rank_trace(&result, &plan, 4 * spec.param_count() as u64)?;

    let mut log_lines = Vec::new();
    if rank == 0 {
        log_lines = pre.lines;
        log_lines.extend(result.log_lines.iter().cloned());
        log_lines.extend(log_tail(&cfg.model_name));
    }
    Ok(ProcessRankOutcome {
        diverged: result.aborted_iteration.is_some(),
        rows: result.rows.clone(),
        result,
        log_lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            layer_dims: vec![8, 16, 10],
            batchnorm: false,
            dataset_n: 128,
            eval_n: 64,
            world_size: 1,
            batch_per_rank: 16,
            epochs: 2,
            eval_period: 2,
            eval_offset: 1,
            base_lr: 0.05,
            warmup_epochs: 1,
            bucket_bytes: 4096,
            ..RunConfig::default()
        }
    }

    #[test]
    fn single_rank_run_reports_consistently() {
        let cfg = tiny_config();
        let s = run_training(&cfg).unwrap();
        let ipe = iterations_per_epoch(cfg.dataset_n, 1, cfg.batch_per_rank);
        assert_eq!(s.updates, cfg.epochs * ipe as u64);
        assert!(!s.diverged);
        assert_eq!(s.evals.len(), 1, "epoch 1 is both due and final");
        assert_eq!(s.rows.len(), s.updates as usize + s.evals.len());
        assert!(s.elapsed_seconds >= 0.0);
        assert!(s.per_rank[0].params.all_finite());
        let text = s.log_text();
        assert!(text.contains(" run_start"));
        assert!(text.contains("eval_accuracy"));
        let parsed = parse_log(&text).unwrap();
        assert_eq!(parsed.accuracy.len(), 1);
    }

    #[test]
    fn world_size_leaves_weights_bit_identical() {
        // Power-of-two shards of a power-of-two batch reduce through the
        // same summation tree, so the update stream cannot tell the world
        // sizes apart.
        let run = |world: usize| {
            let mut cfg = tiny_config();
            cfg.world_size = world;
            cfg.batch_per_rank = 16 / world;
            run_training(&cfg).unwrap()
        };
        let one = run(1);
        let two = run(2);
        let four = run(4);
        assert_eq!(one.per_rank[0].params.values, two.per_rank[0].params.values);
        assert_eq!(one.per_rank[0].params.values, four.per_rank[3].params.values);
        assert_eq!(one.evals, two.evals);
        assert_eq!(two.per_rank[0].params.values, two.per_rank[1].params.values);
    }

    #[test]
    fn tcp_threads_match_loopback() {
        let mut cfg = tiny_config();
        cfg.world_size = 2;
        cfg.batch_per_rank = 8;
        cfg.epochs = 1;
        let lo = run_training(&cfg).unwrap();
        cfg.transport = Transport::Tcp;
        cfg.rendezvous = "127.0.0.1:0".into();
        let tcp = run_training(&cfg).unwrap();
        assert_eq!(
            lo.per_rank[0].params.values,
            tcp.per_rank[0].params.values
        );
        assert!(tcp.per_rank[0].stats.data_bytes > 0);
    }

    #[test]
    fn scheduling_modes_change_nothing_numerically() {
        let base = {
            let cfg = tiny_config();
            run_training(&cfg).unwrap()
        };
        for scheduling in [Scheduling::DynamicAllgather, Scheduling::None] {
            let mut cfg = tiny_config();
            cfg.scheduling = scheduling;
            cfg.world_size = 2;
            cfg.batch_per_rank = 8;
            let s = run_training(&cfg).unwrap();
            assert_eq!(
                base.per_rank[0].params.values,
                s.per_rank[0].params.values,
                "{scheduling:?}"
            );
        }
    }

    #[test]
    fn absurd_learning_rate_diverges_cleanly() {
        let mut cfg = tiny_config();
        cfg.base_lr = 1e8;
        cfg.warmup_epochs = 0;
        cfg.lars_enabled = false;
        cfg.epochs = 8;
        let s = run_training(&cfg).unwrap();
        assert!(s.diverged);
        let total = 8 * iterations_per_epoch(cfg.dataset_n, 1, cfg.batch_per_rank) as u64;
        assert!(s.updates < total);
    }

    #[test]
    fn divergence_aborts_every_rank_alike() {
        let mut cfg = tiny_config();
        cfg.base_lr = 1e8;
        cfg.warmup_epochs = 0;
        cfg.lars_enabled = false;
        cfg.epochs = 8;
        cfg.world_size = 2;
        cfg.batch_per_rank = 8;
        let s = run_training(&cfg).unwrap();
        assert!(s.diverged);
        assert_eq!(
            s.per_rank[0].aborted_iteration,
            s.per_rank[1].aborted_iteration
        );
    }

    #[test]
    fn zero_epochs_still_produce_a_parsable_log() {
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let s = run_training(&cfg).unwrap();
        assert_eq!(s.updates, 0);
        assert!(s.evals.is_empty());
        let text = s.log_text();
        assert!(!text.contains("train_epoch"));
        let parsed = parse_log(&text).unwrap();
        assert!(parsed.elapsed_seconds > 0.0);
    }

    #[test]
    fn csv_lr_column_replays_the_schedule() {
        let cfg = tiny_config();
        let s = run_training(&cfg).unwrap();
        let ipe = iterations_per_epoch(cfg.dataset_n, 1, cfg.batch_per_rank);
        let schedule = cfg.schedule(ipe).unwrap();
        for row in s.rows.iter().filter(|r| r.lr.is_some()) {
            assert_eq!(row.lr.unwrap(), schedule.lr_at(row.iter));
        }
    }

    #[test]
    fn batchnorm_stats_stay_local_while_weights_stay_shared() {
        let mut cfg = tiny_config();
        cfg.batchnorm = true;
        cfg.world_size = 2;
        cfg.batch_per_rank = 8;
        let s = run_training(&cfg).unwrap();
        // Reduced gradients are identical bits on every rank, so weights
        // cannot drift apart even though normalization statistics come from
        // each rank's own samples.
        assert_eq!(s.per_rank[0].params.values, s.per_rank[1].params.values);
        let mean = |r: &RankResult| {
            r.bn_states[0]
                .as_ref()
                .map(|b| b.running_mean.clone())
                .unwrap()
        };
        let (a, b) = (mean(&s.per_rank[0]), mean(&s.per_rank[1]));
        assert!(a.iter().chain(&b).all(|v| v.is_finite()));
        assert_ne!(a, b, "different shards leave different running means");
    }

    #[test]
    fn target_accuracy_stops_early() {
        let mut cfg = tiny_config();
        cfg.epochs = 8;
        cfg.eval_period = 1;
        cfg.eval_offset = 0;
        cfg.target_accuracy = Some(0.0);
        let s = run_training(&cfg).unwrap();
        assert_eq!(s.evals.len(), 1, "first eval already meets a zero target");
        let ipe = iterations_per_epoch(cfg.dataset_n, 1, cfg.batch_per_rank) as u64;
        assert_eq!(s.updates, ipe);
    }

    #[test]
    fn holdout_split_is_disjoint_by_construction() {
        let cfg = tiny_config();
        let (train, eval) = split_holdout(&cfg).unwrap();
        assert_eq!(train.n, cfg.dataset_n);
        assert_eq!(eval.n, cfg.eval_n);
        let all = gen_dataset(
            cfg.dataset_seed,
            cfg.dataset_n + cfg.eval_n,
            train.d,
            train.classes,
        );
        assert_eq!(&all.features[..train.n * train.d], &train.features[..]);
        assert_eq!(&all.features[train.n * train.d..], &eval.features[..]);
    }

    #[test]
    fn bucket_plan_covers_every_parameter_byte() {
        let cfg = tiny_config();
        let spec = cfg.model_spec().unwrap();
        for threshold in [1, 4096, u64::MAX] {
            let plan = bucket_plan_for(&spec, threshold);
            assert_eq!(plan.total_bytes(), 4 * spec.param_count() as u64);
        }
    }

    #[test]
    fn fp16_communication_stays_near_the_exact_run() {
        let exact = run_training(&tiny_config()).unwrap();
        let mut cfg = tiny_config();
        cfg.fp16_comm = true;
        cfg.world_size = 2;
        cfg.batch_per_rank = 8;
        let quantized = run_training(&cfg).unwrap();
        let a = &exact.per_rank[0].params.values;
        let b = &quantized.per_rank[0].params.values;
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(num / den < 1e-2, "relative drift {}", num / den);
        assert_eq!(
            quantized.per_rank[0].params.values,
            quantized.per_rank[1].params.values,
            "ranks install identical quantized bits"
        );
    }
}
