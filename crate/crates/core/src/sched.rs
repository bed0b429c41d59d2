//! Gradient bucketing and allreduce launch ordering.
//!
//! Small per-layer gradients make terrible allreduce payloads (latency
//! dominates), so segments fuse into size-thresholded groups, assigned
//! statically from sizes every rank already knows. During backward, a
//! group's allreduce launches the moment its last member finishes, letting
//! communication overlap the rest of backward. Launches stay in group
//! order on every rank, so the collective schedules line up without any
//! negotiation.
//!
//! Every launch decision is observable as a [`TraceEvent`]; the validator
//! replays a trace against the plan and reports ordering or byte
//! conservation violations instead of panicking.

use std::collections::HashMap;
use std::fmt;

/// Groups close at this size unless configured otherwise.
pub const DEFAULT_THRESHOLD_BYTES: u64 = 4 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketGroup {
    pub id: u32,
    /// Segment ids, in backward-completion order.
    pub members: Vec<usize>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketPlan {
    /// Ordered by backward completion of each group's last member.
    pub groups: Vec<BucketGroup>,
    pub threshold_bytes: u64,
}

impl BucketPlan {
    pub fn total_bytes(&self) -> u64 {
        self.groups.iter().map(|g| g.bytes).sum()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Greedy fusion in backward order: a group closes as soon as its byte
/// total reaches the threshold after a segment is added; whatever trails
/// becomes the residual group. Identical inputs give identical plans on
/// every rank, with no communication.
///
/// `segments_backward` pairs each segment id with its gradient byte size,
/// in backward-completion order. Panics on an empty list.
pub fn make_buckets(segments_backward: &[(usize, u64)], threshold_bytes: u64) -> BucketPlan {
    assert!(!segments_backward.is_empty(), "no segments to bucket");
    assert!(threshold_bytes > 0, "threshold must be positive");
    let mut groups: Vec<BucketGroup> = Vec::new();
    let mut members = Vec::new();
    let mut bytes = 0u64;
    for &(id, size) in segments_backward {
        members.push(id);
        bytes = bytes.saturating_add(size);
        if bytes >= threshold_bytes {
            groups.push(BucketGroup {
                id: groups.len() as u32,
                members: std::mem::take(&mut members),
                bytes,
            });
            bytes = 0;
        }
    }
    if !members.is_empty() {
        groups.push(BucketGroup {
            id: groups.len() as u32,
            members,
            bytes,
        });
    }
    BucketPlan {
        groups,
        threshold_bytes,
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("segment {0} is not in the bucket plan")]
    UnknownSegment(usize),
    #[error("segment {0} reported backward completion twice")]
    DuplicateReport(usize),
}

/// What one completion report triggered.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct DoneOutcome {
    /// The group this segment completed, if it was the last member.
    pub became_ready: Option<u32>,
    /// Groups to launch now, ascending. A ready group defers until every
    /// lower group has launched, so this can carry several at once.
    pub launches: Vec<u32>,
}

/// Per-iteration launch bookkeeping for one worker.
pub struct GroupTracker {
    group_of: HashMap<usize, u32>,
    remaining: Vec<usize>,
    member_counts: Vec<usize>,
    ready: Vec<bool>,
    next_launch: usize,
    reported: HashMap<usize, bool>,
}

impl GroupTracker {
    pub fn new(plan: &BucketPlan) -> GroupTracker {
        let mut group_of = HashMap::new();
        for g in &plan.groups {
            for &s in &g.members {
                let prev = group_of.insert(s, g.id);
                assert!(prev.is_none(), "segment {s} in two groups");
            }
        }
        let member_counts: Vec<usize> = plan.groups.iter().map(|g| g.members.len()).collect();
        GroupTracker {
            group_of,
            remaining: member_counts.clone(),
            member_counts,
            ready: vec![false; plan.groups.len()],
            next_launch: 0,
            reported: HashMap::new(),
        }
    }

    /// Starts the next iteration.
    pub fn reset(&mut self) {
        self.remaining.copy_from_slice(&self.member_counts);
        self.ready.iter_mut().for_each(|r| *r = false);
        self.next_launch = 0;
        self.reported.clear();
    }

    /// Records one segment's backward completion and returns what it
    /// unlocked.
    pub fn on_backward_done(&mut self, segment: usize) -> Result<DoneOutcome, SchedError> {
        let g = *self
            .group_of
            .get(&segment)
            .ok_or(SchedError::UnknownSegment(segment))? as usize;
        if self.reported.insert(segment, true).is_some() {
            return Err(SchedError::DuplicateReport(segment));
        }
        let mut out = DoneOutcome::default();
        self.remaining[g] -= 1;
        if self.remaining[g] == 0 {
            self.ready[g] = true;
            out.became_ready = Some(g as u32);
        }
        while self.next_launch < self.ready.len() && self.ready[self.next_launch] {
            out.launches.push(self.next_launch as u32);
            self.next_launch += 1;
        }
        Ok(out)
    }

    pub fn all_launched(&self) -> bool {
        self.next_launch == self.ready.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceKind {
    BackwardDone { segment: usize },
    GroupReady { group: u32 },
    AllreduceStart { group: u32, bytes: u64 },
    AllreduceEnd { group: u32 },
    StepApplied,
}

/// One scheduling event on one worker. Timestamps are monotonic
/// nanoseconds from the worker's run start and must not decrease.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub timestamp_ns: u64,
    pub iteration: u64,
    pub kind: TraceKind,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} it={} ", self.timestamp_ns, self.iteration)?;
        match &self.kind {
            TraceKind::BackwardDone { segment } => write!(f, "backward_done seg={segment}"),
            TraceKind::GroupReady { group } => write!(f, "group_ready group={group}"),
            TraceKind::AllreduceStart { group, bytes } => {
                write!(f, "allreduce_start group={group} bytes={bytes}")
            }
            TraceKind::AllreduceEnd { group } => write!(f, "allreduce_end group={group}"),
            TraceKind::StepApplied => write!(f, "step_applied"),
        }
    }
}

/// Replays one worker's trace against the plan. Returns human-readable
/// violations; an empty list means the trace is sound. Checks, per
/// iteration: every allreduce starts only after all of its members'
/// backward completions; launches happen in group order, each group
/// exactly once; the optimizer step follows every allreduce end; and the
/// bytes launched equal the gradient bytes exactly (each segment
/// communicated once, no more, no less).
pub fn validate_trace(
    events: &[TraceEvent],
    plan: &BucketPlan,
    total_gradient_bytes: u64,
) -> Vec<String> {
    let mut violations = Vec::new();
    let mut last_ts = 0u64;
    for e in events {
        if e.timestamp_ns < last_ts {
            violations.push(format!("timestamp regressed at {e}"));
        }
        last_ts = e.timestamp_ns;
    }

    let mut iterations: Vec<u64> = events.iter().map(|e| e.iteration).collect();
    iterations.dedup();
    let mut sorted = iterations.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != iterations.len() {
        violations.push("iterations interleave in the trace".into());
    }

    for &iter in &sorted {
        let ev: Vec<&TraceEvent> = events.iter().filter(|e| e.iteration == iter).collect();
        let pos_of = |pred: &dyn Fn(&TraceKind) -> bool| ev.iter().position(|e| pred(&e.kind));

        // (a) every member's backward_done precedes its group's start
        for g in &plan.groups {
            let start = pos_of(&|k| matches!(k, TraceKind::AllreduceStart { group, .. } if *group == g.id));
            for &s in &g.members {
                let done = pos_of(&|k| matches!(k, TraceKind::BackwardDone { segment } if *segment == s));
                match (done, start) {
                    (Some(d), Some(st)) if d > st => violations.push(format!(
                        "iteration {iter}: group {} started before segment {s} finished backward",
                        g.id
                    )),
                    (None, Some(_)) => violations.push(format!(
                        "iteration {iter}: group {} started but segment {s} never finished backward",
                        g.id
                    )),
                    _ => {}
                }
            }
        }

        // (b) launches in group order, exactly one start per group
        let started: Vec<u32> = ev
            .iter()
            .filter_map(|e| match e.kind {
                TraceKind::AllreduceStart { group, .. } => Some(group),
                _ => None,
            })
            .collect();
        let expected: Vec<u32> = (0..plan.groups.len() as u32).collect();
        if started != expected {
            violations.push(format!(
                "iteration {iter}: launch order {started:?}, want {expected:?}"
            ));
        }

        // (c) the step follows every allreduce end
        let step = pos_of(&|k| matches!(k, TraceKind::StepApplied));
        match step {
            None => violations.push(format!("iteration {iter}: no step_applied")),
            Some(st) => {
                for g in &plan.groups {
                    let end = pos_of(
                        &|k| matches!(k, TraceKind::AllreduceEnd { group } if *group == g.id),
                    );
                    match end {
                        None => violations.push(format!(
                            "iteration {iter}: group {} never finished its allreduce",
                            g.id
                        )),
                        Some(e) if e > st => violations.push(format!(
                            "iteration {iter}: step applied before group {} finished",
                            g.id
                        )),
                        _ => {}
                    }
                }
            }
        }

        // (d) communicated bytes equal gradient bytes
        let communicated: u64 = ev
            .iter()
            .map(|e| match e.kind {
                TraceKind::AllreduceStart { bytes, .. } => bytes,
                _ => 0,
            })
            .sum();
        if communicated != total_gradient_bytes {
            violations.push(format!(
                "iteration {iter}: communicated {communicated} bytes, gradients hold {total_gradient_bytes}"
            ));
        }
    }
    violations
}
