//! Desk-scale data-parallel SGD training engine.
//!
//! The crate trains a small MLP classifier synchronously across N workers
//! (threads over an in-process loopback fabric, or processes over TCP),
//! exchanging gradients with a ring allreduce. The optimizer implements
//! learning-rate warmup with selectable decay, layer-wise adaptive rate
//! scaling driven by a single fused norm pass, label smoothing, and
//! half-precision gradient communication against f32 master weights.
//!
//! Module map:
//! - [`model`]: parameter layout, deterministic init, forward/backward, data.
//! - [`optim`]: schedules, LARS trust ratios, momentum SGD, f16 conversion.
//! - [`comm`]: wire format, loopback and TCP transports, ring allreduce.
//! - [`sched`]: gradient bucketing and launch-order tracking with a trace
//!   validator.
//! - [`sim`]: analytic what-if model for scaling the same schedule to large
//!   worker counts.
//! - [`harness`]: the end-to-end training driver, metrics, and log format.
//!
//! # Determinism
//!
//! Training runs are reproducible at the bit level. Three rules make that
//! hold everywhere rather than by accident:
//!
//! 1. All randomness flows through [`rng::DetRng`], a counter-seeded ChaCha20
//!    stream (the `rand_chacha` dependency is version-pinned). Sampling uses
//!    only integer ops and a fixed polynomial, never platform `libm`.
//! 2. Every reduction over the batch dimension uses the canonical pairwise
//!    tree order from [`pairwise`], so a batch split across workers sums in
//!    exactly the same float expression tree as the whole batch on one
//!    worker.
//! 3. The ring allreduce forwards partial-sum blocks instead of folding
//!    values in arrival order, closing each sum along that same tree.

pub mod comm;
pub mod harness;
pub mod sched;
pub mod sim;
pub mod model;
pub mod optim;
pub mod pairwise;
pub mod rng;

pub use comm::{allgather_flags, barrier, ring_allreduce, CommError, RingEndpoint, RingTopology};
pub use sched::{make_buckets, validate_trace, BucketPlan, GroupTracker, TraceEvent, TraceKind};
pub use sim::{
    scalability_curve, simulate_iteration, threshold_sweep, SimConfig, SimFileConfig, Timeline,
};
pub use model::{
    backward, forward_eval, forward_train, gen_dataset, init_params, iterations_per_epoch, shard,
    BatchNormState, Dataset, FlatParams, ModelSpec, ParamSegment, SegmentKind,
};
pub use optim::{
    batched_norms, lars_trust_ratio, sgd_step, Half16, LarsConfig, LrSchedule, MomentumState,
};
pub use harness::{
    parse_log, render_csv, run_training, MetricsRow, RunConfig, RunError, RunSummary, Scheduling,
    Transport,
};
