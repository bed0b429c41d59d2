//! Deterministic parameter initialization.
//!
//! Every worker initializes the full parameter buffer from the shared seed
//! instead of receiving a broadcast from rank 0. Bitwise agreement across
//! ranks (and across machines) is therefore a correctness requirement, not a
//! nicety: the draw order is fixed by the segment table, and the sampler in
//! [`crate::rng`] avoids platform `libm` entirely.

use super::{FlatParams, ModelSpec, SegmentKind};
use crate::rng::{DetRng, StreamKind};

/// Builds the full parameter buffer for `spec` from `seed`.
///
/// Weights draw from a normal truncated at two standard deviations with
/// std = sqrt(2 / fan_in). Biases and bn_beta are zero, bn_gamma is one.
pub fn init_params(spec: &ModelSpec, seed: u64) -> FlatParams {
    let segments = spec.segments();
    let total = segments.iter().map(|s| s.len).sum();
    let mut values = vec![0.0f32; total];
    let mut rng = DetRng::new(seed, StreamKind::Init);
    for seg in &segments {
        match seg.kind {
            SegmentKind::Weight => {
                let fan_in = seg.shape[0] as f64;
                let std = (2.0 / fan_in).sqrt();
                for v in &mut values[seg.range()] {
                    *v = (rng.trunc_normal() * std) as f32;
                }
            }
            SegmentKind::Bias | SegmentKind::BnBeta => {}
            SegmentKind::BnGamma => {
                values[seg.range()].fill(1.0);
            }
        }
    }
    FlatParams { values, segments }
}
