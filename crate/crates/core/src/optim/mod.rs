//! Momentum SGD with warmup schedules, layer-wise adaptive rate scaling,
//! and half-precision conversion for the communication path.
//!
//! Parameter updates always run in f32 master precision on the flat buffer.
//! The per-layer norms that feed LARS come out of one pass over the fused
//! buffer; their summation order (ascending, f64 accumulator) is part of
//! the contract so repeated runs reproduce bit for bit.

mod fp16;

pub use fp16::{dequantize_fp16, quantize_fp16, Half16};

use crate::model::{validate_segments, FlatParams, ParamSegment, SegmentKind};

/// Learning-rate decay applied after warmup.
#[derive(Clone, Debug, PartialEq)]
pub enum Decay {
    /// Multiply by gamma at each milestone iteration. Milestones are
    /// absolute iteration numbers past warmup, ascending.
    Step { milestones: Vec<u64>, gamma: f64 },
    /// base * (1 - progress)^power, progress measured over the post-warmup
    /// stretch.
    Polynomial { power: f64 },
    Linear,
    Constant,
}

impl Decay {
    /// Conventional default; a power-2 ramp-down spends more iterations at
    /// small rates than linear does.
    pub fn default_polynomial() -> Decay {
        Decay::Polynomial { power: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0) {
            return Err("base_lr must be positive".into());
        }
        if self.total_iters == 0 {
            return Err("total_iters must be at least 1".into());
        }
        if self.warmup_iters > self.total_iters {
            return Err("warmup cannot exceed total iterations".into());
        }
        match &self.decay {
            Decay::Step { milestones, gamma } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err("step gamma must be in (0, 1]".into());
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("milestones must be strictly ascending".into());
                }
                if milestones.iter().any(|&m| m <= self.warmup_iters) {
                    return Err("milestones must come after warmup".into());
                }
            }
            Decay::Polynomial { power } => {
                if !(*power > 0.0) {
                    return Err("polynomial power must be positive".into());
                }
            }
            Decay::Linear | Decay::Constant => {}
        }
        Ok(())
    }

    /// Learning rate for iteration `iter` (0-based).
    ///
    /// During warmup the rate climbs linearly and reaches `base_lr` exactly
    /// when `iter + 1 == warmup_iters`; afterwards the decay shape applies
    /// over the remaining iterations.
    pub fn lr_at(&self, iter: u64) -> f64 {
        assert!(
            iter < self.total_iters,
            "iteration {} outside schedule of {}",
            iter,
            self.total_iters
        );
        if iter < self.warmup_iters {
            return self.base_lr * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        match &self.decay {
            Decay::Constant => self.base_lr,
            Decay::Step { milestones, gamma } => {
                let hit = milestones.iter().filter(|&&m| m <= iter).count() as i32;
                self.base_lr * gamma.powi(hit)
            }
            Decay::Linear => {
                let p = self.progress(iter);
                self.base_lr * (1.0 - p)
            }
            Decay::Polynomial { power } => {
                let p = self.progress(iter);
                self.base_lr * (1.0 - p).powf(*power)
            }
        }
    }

    /// Fraction of the post-warmup stretch completed, in [0, 1).
    fn progress(&self, iter: u64) -> f64 {
        (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64
    }
}

/// Layer-wise adaptive rate scaling configuration.
///
/// Segments whose kind is in `skip_kinds` take the plain scheduled rate and
/// no weight decay; by default that is biases and both batch-norm parameter
/// kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct LarsConfig {
    pub enabled: bool,
    /// Trust coefficient.
    pub eta: f64,
    /// Denominator guard; a denominator at or below it falls back to
    /// trust ratio 1.
    pub epsilon_guard: f64,
    pub weight_decay: f64,
    pub skip_kinds: Vec<SegmentKind>,
}

impl Default for LarsConfig {
    fn default() -> LarsConfig {
        LarsConfig {
            enabled: true,
            eta: 0.001,
            epsilon_guard: 0.0,
            weight_decay: 0.0,
            skip_kinds: vec![SegmentKind::Bias, SegmentKind::BnGamma, SegmentKind::BnBeta],
        }
    }
}

impl LarsConfig {
    pub fn skips(&self, kind: SegmentKind) -> bool {
        self.skip_kinds.contains(&kind)
    }
}

/// Trust ratio eta * |w| / (|g| + weight_decay * |w| + epsilon_guard).
///
/// Falls back to 1 (plain scheduled rate) when the weight norm is zero or
/// the denominator is degenerate, which is the state of every zero-init
/// segment at iteration 0.
pub fn lars_trust_ratio(w_norm: f64, g_norm: f64, cfg: &LarsConfig) -> f64 {
    debug_assert!(w_norm >= 0.0 && g_norm >= 0.0);
    if w_norm == 0.0 {
        return 1.0;
    }
    let denom = g_norm + cfg.weight_decay * w_norm + cfg.epsilon_guard;
    if denom <= cfg.epsilon_guard {
        return 1.0;
    }
    cfg.eta * w_norm / denom
}

/// Per-segment L2 norms of the fused buffer in one pass.
///
/// Each segment's sum of squares accumulates in ascending element order in
/// an f64, and the result is its square root. This order is frozen: the
/// naive per-segment loop computes the identical bits.
///
/// Panics if the segments do not tile the buffer exactly.
pub fn batched_norms(flat: &[f32], segments: &[ParamSegment]) -> Vec<f64> {
    validate_segments(segments, flat.len()).expect("segments must tile the buffer");
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut ss = 0.0f64;
        for &v in &flat[seg.range()] {
            let vd = v as f64;
            ss += vd * vd;
        }
        out.push(ss.sqrt());
    }
    out
}

/// Velocity buffer congruent to the parameter buffer.
#[derive(Clone, Debug)]
pub struct MomentumState {
    pub velocity: Vec<f32>,
    pub mu: f32,
}

impl MomentumState {
    pub fn new(len: usize, mu: f32) -> MomentumState {
        assert!((0.0..1.0).contains(&mu), "momentum must be in [0,1)");
        MomentumState {
            velocity: vec![0.0; len],
            mu,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("non-finite gradient in {segment} at element {index}: {value}")]
    NonFiniteGrad {
        segment: String,
        index: usize,
        value: f32,
    },
}

/// One momentum SGD update on the flat buffer, f32 throughout.
///
/// Per segment s: v <- mu * v + (g + wd * w); w <- w - local_lr * v, where
/// local_lr is the scheduled rate times the segment's trust ratio (skipped
/// kinds and disabled LARS use the scheduled rate alone, and skipped kinds
/// take no weight decay).
///
/// A non-finite gradient element rejects the whole step before any state
/// changes, so a diverging run can stop on the exact iteration.
pub fn sgd_step(
    params: &mut FlatParams,
    grads: &[f32],
    mom: &mut MomentumState,
    schedule: &LrSchedule,
    lars: &LarsConfig,
    iter: u64,
) -> Result<(), StepError> {
    assert_eq!(grads.len(), params.values.len(), "gradient layout mismatch");
    assert_eq!(mom.velocity.len(), params.values.len(), "velocity layout mismatch");
    for seg in &params.segments {
        for (k, &g) in grads[seg.range()].iter().enumerate() {
            if !g.is_finite() {
                return Err(StepError::NonFiniteGrad {
                    segment: seg.name.clone(),
                    index: k,
                    value: g,
                });
            }
        }
    }

    let lr = schedule.lr_at(iter);
    let (w_norms, g_norms) = if lars.enabled {
        (
            batched_norms(&params.values, &params.segments),
            batched_norms(grads, &params.segments),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    for (s, seg) in params.segments.iter().enumerate() {
        let skipped = lars.skips(seg.kind);
        let local_lr = if lars.enabled && !skipped {
            (lr * lars_trust_ratio(w_norms[s], g_norms[s], lars)) as f32
        } else {
            lr as f32
        };
        let wd = if skipped { 0.0f32 } else { lars.weight_decay as f32 };
        for e in seg.range() {
            let g_eff = grads[e] + wd * params.values[e];
            mom.velocity[e] = mom.mu * mom.velocity[e] + g_eff;
            params.values[e] -= local_lr * mom.velocity[e];
        }
    }
    Ok(())
}
