//! Discrete-event timing model of one data-parallel training iteration.
//!
//! The model prices a grouped ring allreduce at 2(P-1)/P * S/B + 2(P-1)*a
//! per group of S bytes over a world of P, the bandwidth-optimal ring cost,
//! matching the collective the engine actually runs. Groups launch in order
//! as their last member finishes backward (or all at once with overlap
//! disabled), on one shared link, so a group's transfer starts at
//! max(its readiness, the previous group's end). The iteration closes at
//! max(backward end, last transfer end) plus the optimizer step.
//!
//! Simulated schedules come out as the same [`TraceEvent`] stream the live
//! scheduler emits, so one validator audits both.

use crate::sched::{make_buckets, BucketPlan, TraceEvent, TraceKind};

/// Cost-model inputs for one iteration. Times are microseconds; segments
/// are listed in backward-completion order and indexed by that order, the
/// same ids the [`BucketPlan`] members use.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub forward_us: f64,
    /// Per-segment backward cost, in completion order.
    pub backward_us: Vec<f64>,
    /// Gradient bytes per segment, same order.
    pub segment_bytes: Vec<u64>,
    pub batch_per_rank: u64,
    /// Link bandwidth in bytes per second. Infinity is a legal ideal.
    pub bandwidth_bytes_per_sec: f64,
    /// Per-message latency in seconds.
    pub latency_sec: f64,
    pub world: u32,
    pub plan: BucketPlan,
    pub overlap: bool,
    pub step_us: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.forward_us > 0.0) {
            return Err("forward time must be positive".into());
        }
        if self.backward_us.is_empty() {
            return Err("no backward segments".into());
        }
        if self.backward_us.iter().any(|&t| !(t > 0.0)) {
            return Err("backward times must be positive".into());
        }
        if self.backward_us.len() != self.segment_bytes.len() {
            return Err("backward times and segment bytes disagree on length".into());
        }
        if self.segment_bytes.iter().any(|&b| b == 0) {
            return Err("segment bytes must be positive".into());
        }
        if self.batch_per_rank == 0 {
            return Err("batch per rank must be positive".into());
        }
        if !(self.bandwidth_bytes_per_sec > 0.0) {
            return Err("bandwidth must be positive".into());
        }
        if !(self.latency_sec >= 0.0) {
            return Err("latency must be nonnegative".into());
        }
        if self.world == 0 {
            return Err("world size must be at least 1".into());
        }
        if !(self.step_us >= 0.0) {
            return Err("step time must be nonnegative".into());
        }
        let mut seen = vec![false; self.segment_bytes.len()];
        for g in &self.plan.groups {
            let mut bytes = 0u64;
            for &s in &g.members {
                if s >= seen.len() || seen[s] {
                    return Err(format!("plan does not tile the segments at {s}"));
                }
                seen[s] = true;
                bytes += self.segment_bytes[s];
            }
            if bytes != g.bytes {
                return Err(format!("group {} bytes disagree with its members", g.id));
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err("plan leaves segments uncovered".into());
        }
        Ok(())
    }

    /// Ring allreduce cost for one group. Zero at world 1 by the formula
    /// itself: both terms carry a (P-1) factor.
    fn allreduce_us(&self, group_bytes: u64) -> f64 {
        let p = self.world as f64;
        let bandwidth = 2.0 * (p - 1.0) / p * (group_bytes as f64 / self.bandwidth_bytes_per_sec);
        let latency = 2.0 * (p - 1.0) * self.latency_sec;
        (bandwidth + latency) * 1e6
    }
}

/// One simulated iteration: the event schedule plus its summary numbers.
#[derive(Clone, Debug)]
pub struct Timeline {
    pub events: Vec<TraceEvent>,
    pub iteration_time_us: f64,
    pub throughput_images_per_sec: f64,
}

fn ns(t_us: f64) -> u64 {
    (t_us * 1000.0).round() as u64
}

/// Runs the event schedule for one iteration. Deterministic; panics only
/// on an invalid config.
pub fn simulate_iteration(cfg: &SimConfig) -> Timeline {
    cfg.validate().expect("invalid simulator config");

    let mut events = Vec::new();
    let mut done_at = Vec::with_capacity(cfg.backward_us.len());
    let mut t = cfg.forward_us;
    for (s, &dt) in cfg.backward_us.iter().enumerate() {
        t += dt;
        done_at.push(t);
        events.push(TraceEvent {
            timestamp_ns: ns(t),
            iteration: 0,
            kind: TraceKind::BackwardDone { segment: s },
        });
    }
    let backward_end = t;

    let mut prev_end = 0.0f64;
    for g in &cfg.plan.groups {
        let ready = g
            .members
            .iter()
            .map(|&s| done_at[s])
            .fold(0.0f64, f64::max);
        let earliest = if cfg.overlap { ready } else { backward_end };
        let start = earliest.max(prev_end);
        let end = start + cfg.allreduce_us(g.bytes);
        prev_end = end;
        events.push(TraceEvent {
            timestamp_ns: ns(ready),
            iteration: 0,
            kind: TraceKind::GroupReady { group: g.id },
        });
        events.push(TraceEvent {
            timestamp_ns: ns(start),
            iteration: 0,
            kind: TraceKind::AllreduceStart {
                group: g.id,
                bytes: g.bytes,
            },
        });
        events.push(TraceEvent {
            timestamp_ns: ns(end),
            iteration: 0,
            kind: TraceKind::AllreduceEnd { group: g.id },
        });
    }

    let iteration_time_us = backward_end.max(prev_end) + cfg.step_us;
    events.push(TraceEvent {
        timestamp_ns: ns(iteration_time_us),
        iteration: 0,
        kind: TraceKind::StepApplied,
    });
    // Equal timestamps keep construction order, which is already causal.
    events.sort_by_key(|e| e.timestamp_ns);

    let per_rank = cfg.batch_per_rank as f64 * 1e6 / iteration_time_us;
    Timeline {
        events,
        iteration_time_us,
        throughput_images_per_sec: cfg.world as f64 * per_rank,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScalePoint {
    pub world: u32,
    pub throughput_images_per_sec: f64,
    /// throughput(P) / (P * throughput(1)).
    pub efficiency: f64,
}

/// Sweeps world sizes at fixed per-rank work (weak scaling).
pub fn scalability_curve(cfg: &SimConfig, worlds: &[u32]) -> Vec<ScalePoint> {
    assert!(!worlds.is_empty(), "no world sizes to sweep");
    let mut base = cfg.clone();
    base.world = 1;
    let per_rank_base =
        simulate_iteration(&base).throughput_images_per_sec;
    worlds
        .iter()
        .map(|&world| {
            let mut c = cfg.clone();
            c.world = world;
            let tl = simulate_iteration(&c);
            ScalePoint {
                world,
                throughput_images_per_sec: tl.throughput_images_per_sec,
                efficiency: tl.throughput_images_per_sec / (world as f64 * per_rank_base),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct SweepPoint {
    pub threshold_bytes: u64,
    pub iteration_time_us: f64,
}

/// Re-buckets the same segments at each threshold and times the iteration.
pub fn threshold_sweep(cfg: &SimConfig, thresholds: &[u64]) -> Vec<SweepPoint> {
    assert!(!thresholds.is_empty(), "no thresholds to sweep");
    let segments: Vec<(usize, u64)> = cfg.segment_bytes.iter().copied().enumerate().collect();
    thresholds
        .iter()
        .map(|&threshold_bytes| {
            let mut c = cfg.clone();
            c.plan = make_buckets(&segments, threshold_bytes);
            SweepPoint {
                threshold_bytes,
                iteration_time_us: simulate_iteration(&c).iteration_time_us,
            }
        })
        .collect()
}

/// The sweep's minimizing threshold; first wins on exact ties.
pub fn fastest(points: &[SweepPoint]) -> SweepPoint {
    assert!(!points.is_empty());
    let mut best = points[0];
    for &p in &points[1..] {
        if p.iteration_time_us < best.iteration_time_us {
            best = p;
        }
    }
    best
}

/// A hand-tuned operating point whose weak-scaling efficiency lands near
/// 0.77 at a world of 2048. The numbers are an illustrative calibration,
/// not measurements: 32 gradient segments of 3.2 MB (a 102.4 MB model),
/// 16 ms of backward behind an 8 ms forward, a 15 GB/s link with 0.25 us
/// message latency, fused at 16 MB.
pub fn calibration_config() -> SimConfig {
    SimFileConfig::default()
        .to_sim_config()
        .expect("calibration numbers are valid")
}

/// The simulator's flat key-value configuration. Every field defaults to
/// the calibration point, so a file states only what it changes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimFileConfig {
    pub forward_us: f64,
    /// Per-segment backward cost, in completion order.
    pub backward_us: Vec<f64>,
    /// Gradient bytes per segment, same order.
    pub segment_bytes: Vec<u64>,
    pub batch_per_rank: u64,
    pub bandwidth_bytes_per_sec: f64,
    pub latency_sec: f64,
    pub threshold_bytes: u64,
    pub overlap: bool,
    pub step_us: f64,
    /// World the single-iteration timeline and threshold sweeps run at.
    pub world: u32,
    /// Worlds the scalability curve visits.
    pub worlds: Vec<u32>,
}

impl Default for SimFileConfig {
    fn default() -> SimFileConfig {
        SimFileConfig {
            forward_us: 8_000.0,
            backward_us: vec![500.0; 32],
            segment_bytes: vec![3_200_000; 32],
            batch_per_rank: 16,
            bandwidth_bytes_per_sec: 15e9,
            latency_sec: 2.5e-7,
            threshold_bytes: 16_000_000,
            overlap: true,
            step_us: 1_000.0,
            world: 2048,
            worlds: (0..=11).map(|e| 1 << e).collect(),
        }
    }
}

impl SimFileConfig {
    pub fn from_toml(text: &str) -> Result<SimFileConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("simulator config serializes")
    }

    /// Buckets the segments at the configured threshold and assembles the
    /// runnable config at `self.world`.
    pub fn to_sim_config(&self) -> Result<SimConfig, String> {
        if self.backward_us.is_empty() {
            return Err("no backward segments".into());
        }
        if self.worlds.is_empty() {
            return Err("no world sizes to sweep".into());
        }
        if self.threshold_bytes == 0 {
            return Err("threshold_bytes must be positive".into());
        }
        let segments: Vec<(usize, u64)> =
            self.segment_bytes.iter().copied().enumerate().collect();
        let cfg = SimConfig {
            forward_us: self.forward_us,
            backward_us: self.backward_us.clone(),
            segment_bytes: self.segment_bytes.clone(),
            batch_per_rank: self.batch_per_rank,
            bandwidth_bytes_per_sec: self.bandwidth_bytes_per_sec,
            latency_sec: self.latency_sec,
            world: self.world,
            plan: make_buckets(&segments, self.threshold_bytes),
            overlap: self.overlap,
            step_us: self.step_us,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
