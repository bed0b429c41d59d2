//! Forward, backward, and batch-norm bookkeeping for the MLP.
//!
//! Every reduction over the batch dimension goes through the canonical
//! pairwise tree ([`crate::pairwise`]). That is the property the distributed
//! equivalence guarantees rest on: a worker summing its aligned slice of the
//! global batch computes a subtree of the exact expression tree the whole
//! batch would produce on one worker, so combining worker results along the
//! same tree reproduces the single-process bits.
//!
//! The math is generic over the scalar type. Training always runs in f32;
//! the f64 instantiation exists so finite-difference tests can check the
//! identical code path at a precision where central differences are sharp.

use super::{BatchNormState, FlatParams, ModelSpec, ParamSegment};
use crate::pairwise::{tree_sum, TreeAccumulator};

/// Scalar the network math runs in.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + std::ops::DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_usize(v: usize) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Smoothed target distribution for `class`: 1 - epsilon + epsilon/K at the
/// class index, epsilon/K elsewhere.
pub fn smooth_labels(class: usize, epsilon: f32, k: usize) -> Vec<f32> {
    smoothed_row::<f32>(class, epsilon, k)
}

fn smoothed_row<R: Real>(class: usize, epsilon: f32, k: usize) -> Vec<R> {
    assert!(k >= 2, "need at least two classes");
    assert!(class < k, "class {class} out of range for {k} classes");
    assert!((0.0..1.0).contains(&epsilon), "epsilon must be in [0,1)");
    let eps = R::from_f32(epsilon);
    let uniform = eps / R::from_usize(k);
    let mut v = vec![uniform; k];
    v[class] = (R::ONE - eps) + uniform;
    v
}

/// Folds batch statistics into the moving averages:
/// running <- momentum * running + (1 - momentum) * batch_stat.
pub fn batchnorm_update<R: Real>(
    state: &mut BatchNormState<R>,
    batch_mean: &[R],
    batch_var: &[R],
) {
    assert_eq!(batch_mean.len(), state.running_mean.len());
    assert_eq!(batch_var.len(), state.running_var.len());
    let m = state.momentum;
    let rest = R::ONE - m;
    for (r, &b) in state.running_mean.iter_mut().zip(batch_mean) {
        assert!(b.is_finite(), "non-finite batch mean");
        *r = m * *r + rest * b;
    }
    for (r, &b) in state.running_var.iter_mut().zip(batch_var) {
        assert!(
            b.is_finite() && b >= R::ZERO,
            "batch variance must be finite and non-negative"
        );
        *r = m * *r + rest * b;
    }
}

/// Segment indices owned by one linear layer.
struct LayerSegs {
    weight: usize,
    bias: usize,
    /// (gamma, beta) when the layer is batch-normalized.
    bn: Option<(usize, usize)>,
}

fn layer_seg_ids(spec: &ModelSpec) -> Vec<LayerSegs> {
    let mut out = Vec::with_capacity(spec.num_layers());
    let mut idx = 0;
    for l in 0..spec.num_layers() {
        let weight = idx;
        let bias = idx + 1;
        idx += 2;
        let bn = spec.layer_has_bn(l).then(|| {
            idx += 2;
            (idx - 2, idx - 1)
        });
        out.push(LayerSegs { weight, bias, bn });
    }
    out
}

struct BnCache<R> {
    xhat: Vec<R>,
    inv_std: Vec<R>,
}

struct Cached<'a, R> {
    spec: &'a ModelSpec,
    values: &'a [R],
    segments: &'a [ParamSegment],
    batch: usize,
    /// inputs[l] is the batch-major input to linear layer l; for hidden
    /// layers inputs[l + 1] doubles as the relu mask source.
    inputs: Vec<Vec<R>>,
    bn: Vec<Option<BnCache<R>>>,
    probs: Vec<R>,
    targets: Vec<Vec<R>>,
    labels: Vec<u32>,
}

/// Everything backward needs from a train-mode forward pass.
pub struct TrainCache<'a>(Cached<'a, f32>);

/// Train-mode forward: batch statistics normalize, moving averages update.
/// Returns the mean label-smoothed cross-entropy over the batch.
pub fn forward_train<'a>(
    spec: &'a ModelSpec,
    params: &'a FlatParams,
    bn_states: &mut [Option<BatchNormState>],
    features: &[f32],
    labels: &[u32],
    label_smoothing: f32,
) -> (f64, TrainCache<'a>) {
    let (loss, cache) = forward_train_impl(
        spec,
        &params.values,
        &params.segments,
        bn_states,
        features,
        labels,
        label_smoothing,
    );
    (loss, TrainCache(cache))
}

/// Mean-loss gradient for every parameter, same layout as the flat buffer.
pub fn backward(cache: &TrainCache) -> Vec<f32> {
    let mut grads = vec![0.0f32; cache.0.values.len()];
    backward_with(cache, &mut grads, |_, _| {});
    grads
}

/// Like [`backward`] but writes into a caller-owned buffer and invokes
/// `on_segment` with a segment index and its finished gradient slice the
/// moment that slice is final, so a communication scheduler can ship it
/// while the rest of backward still runs. Segments finalize in reverse
/// layout order (deepest layer first).
pub fn backward_with(cache: &TrainCache, grads: &mut [f32], on_segment: impl FnMut(usize, &[f32])) {
    backward_impl(&cache.0, grads, on_segment)
}

#[derive(Clone, Copy, Debug)]
pub struct EvalResult {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Eval-mode forward: moving averages normalize, nothing is mutated.
pub fn forward_eval(
    spec: &ModelSpec,
    params: &FlatParams,
    bn_states: &[Option<BatchNormState>],
    features: &[f32],
    labels: &[u32],
    label_smoothing: f32,
) -> EvalResult {
    forward_eval_impl(
        spec,
        &params.values,
        &params.segments,
        bn_states,
        features,
        labels,
        label_smoothing,
    )
}

/// x (b rows of din) times w (din by dout) plus bias, row-major. For every
/// output cell the inner sum runs over inputs in ascending index order, so
/// the result is independent of how the loops are blocked.
fn linear<R: Real>(x: &[R], b: usize, din: usize, dout: usize, w: &[R], bias: &[R]) -> Vec<R> {
    let mut h = vec![R::ZERO; b * dout];
    for j in 0..b {
        let row = &x[j * din..(j + 1) * din];
        let out = &mut h[j * dout..(j + 1) * dout];
        out.copy_from_slice(bias);
        for (i, &xv) in row.iter().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    h
}

fn forward_train_impl<'a, R: Real>(
    spec: &'a ModelSpec,
    values: &'a [R],
    segments: &'a [ParamSegment],
    bn_states: &mut [Option<BatchNormState<R>>],
    features: &[R],
    labels: &[u32],
    label_smoothing: f32,
) -> (f64, Cached<'a, R>) {
    let b = labels.len();
    assert!(b >= 1, "empty batch");
    assert_eq!(features.len(), b * spec.input_dim(), "feature shape mismatch");
    assert_eq!(bn_states.len(), spec.use_batchnorm.len());
    let k = spec.classes();
    assert!(labels.iter().all(|&y| (y as usize) < k), "label out of range");
    let layers = layer_seg_ids(spec);
    let bf = R::from_usize(b);

    let mut inputs: Vec<Vec<R>> = Vec::with_capacity(spec.num_layers());
    inputs.push(features.to_vec());
    let mut bn_caches: Vec<Option<BnCache<R>>> = Vec::with_capacity(spec.num_layers());
    let mut logits = Vec::new();

    for l in 0..spec.num_layers() {
        let din = spec.layer_dims[l];
        let dout = spec.layer_dims[l + 1];
        let w = &values[segments[layers[l].weight].range()];
        let bias = &values[segments[layers[l].bias].range()];
        let mut h = linear(&inputs[l], b, din, dout, w, bias);

        if let Some((gseg, bseg)) = layers[l].bn {
            let st = bn_states[l].as_mut().expect("BN layer without state");
            let gamma = &values[segments[gseg].range()];
            let beta = &values[segments[bseg].range()];
            let mut acc = TreeAccumulator::new(dout);
            let mut mean = vec![R::ZERO; dout];
            acc.accumulate(0, b, &mut mean, &mut |j, leaf: &mut [R]| {
                leaf.copy_from_slice(&h[j * dout..(j + 1) * dout])
            });
            for m in &mut mean {
                *m /= bf;
            }
            let mut var = vec![R::ZERO; dout];
            acc.accumulate(0, b, &mut var, &mut |j, leaf: &mut [R]| {
                for (f, slot) in leaf.iter_mut().enumerate() {
                    let d = h[j * dout + f] - mean[f];
                    *slot = d * d;
                }
            });
            for v in &mut var {
                *v /= bf;
            }
            let inv_std: Vec<R> = var
                .iter()
                .map(|&v| R::ONE / (v + st.epsilon).sqrt())
                .collect();
            let mut xhat = vec![R::ZERO; b * dout];
            for j in 0..b {
                for f in 0..dout {
                    let idx = j * dout + f;
                    let xh = (h[idx] - mean[f]) * inv_std[f];
                    xhat[idx] = xh;
                    h[idx] = gamma[f] * xh + beta[f];
                }
            }
            batchnorm_update(st, &mean, &var);
            bn_caches.push(Some(BnCache { xhat, inv_std }));
        } else {
            bn_caches.push(None);
        }

        if l + 1 == spec.num_layers() {
            logits = h;
        } else {
            for v in &mut h {
                if *v < R::ZERO {
                    *v = R::ZERO;
                }
            }
            inputs.push(h);
        }
    }

    let targets: Vec<Vec<R>> = (0..k).map(|c| smoothed_row(c, label_smoothing, k)).collect();

    let mut probs = vec![R::ZERO; b * k];
    let mut losses = vec![0.0f64; b];
    for j in 0..b {
        let z = &logits[j * k..(j + 1) * k];
        let mut m = z[0];
        for &v in &z[1..] {
            if v > m {
                m = v;
            }
        }
        let prow = &mut probs[j * k..(j + 1) * k];
        let mut s = R::ZERO;
        for (p, &v) in prow.iter_mut().zip(z) {
            *p = (v - m).exp();
            s += *p;
        }
        let lse = m + s.ln();
        for p in prow.iter_mut() {
            *p /= s;
        }
        let t = &targets[labels[j] as usize];
        let mut lj = 0.0f64;
        for (f, &tv) in t.iter().enumerate() {
            lj += tv.to_f64() * (lse - z[f]).to_f64();
        }
        losses[j] = lj;
    }
    let loss = tree_sum(&losses) / b as f64;

    (
        loss,
        Cached {
            spec,
            values,
            segments,
            batch: b,
            inputs,
            bn: bn_caches,
            probs,
            targets,
            labels: labels.to_vec(),
        },
    )
}

fn backward_impl<R: Real>(
    cache: &Cached<R>,
    grads: &mut [R],
    mut on_segment: impl FnMut(usize, &[R]),
) {
    let spec = cache.spec;
    let segments = cache.segments;
    assert_eq!(grads.len(), cache.values.len());
    let layers = layer_seg_ids(spec);
    let b = cache.batch;
    let bf = R::from_usize(b);
    let k = spec.classes();

    // Gradient of the summed (not yet averaged) loss w.r.t. the logits. The
    // 1/B of the mean is applied once per parameter at segment write time;
    // keeping the batch reduction a pure tree sum is what lets worker
    // subtrees compose exactly.
    let mut delta = vec![R::ZERO; b * k];
    for j in 0..b {
        let t = &cache.targets[cache.labels[j] as usize];
        for f in 0..k {
            delta[j * k + f] = cache.probs[j * k + f] - t[f];
        }
    }

    for l in (0..spec.num_layers()).rev() {
        let din = spec.layer_dims[l];
        let dout = spec.layer_dims[l + 1];
        let x = &cache.inputs[l];

        // Gradient w.r.t. this layer's output, masked through relu for
        // hidden layers.
        let mut dh = delta;
        if l + 1 != spec.num_layers() {
            let act = &cache.inputs[l + 1];
            for (d, &a) in dh.iter_mut().zip(act) {
                if !(a > R::ZERO) {
                    *d = R::ZERO;
                }
            }
        }

        if let Some((gseg, bseg)) = layers[l].bn {
            let bnc = cache.bn[l].as_ref().expect("BN layer without cache");
            let gamma = &cache.values[segments[gseg].range()];
            let mut acc = TreeAccumulator::new(dout);
            let mut sum_dy = vec![R::ZERO; dout];
            acc.accumulate(0, b, &mut sum_dy, &mut |j, leaf: &mut [R]| {
                leaf.copy_from_slice(&dh[j * dout..(j + 1) * dout])
            });
            let mut sum_dy_xhat = vec![R::ZERO; dout];
            acc.accumulate(0, b, &mut sum_dy_xhat, &mut |j, leaf: &mut [R]| {
                for (f, slot) in leaf.iter_mut().enumerate() {
                    *slot = dh[j * dout + f] * bnc.xhat[j * dout + f];
                }
            });
            let mean_dy: Vec<R> = sum_dy.iter().map(|&v| v / bf).collect();
            let mean_dy_xhat: Vec<R> = sum_dy_xhat.iter().map(|&v| v / bf).collect();

            grads[segments[bseg].range()].copy_from_slice(&mean_dy);
            on_segment(bseg, &grads[segments[bseg].range()]);
            grads[segments[gseg].range()].copy_from_slice(&mean_dy_xhat);
            on_segment(gseg, &grads[segments[gseg].range()]);

            for j in 0..b {
                for f in 0..dout {
                    let idx = j * dout + f;
                    dh[idx] = gamma[f]
                        * bnc.inv_std[f]
                        * (dh[idx] - mean_dy[f] - bnc.xhat[idx] * mean_dy_xhat[f]);
                }
            }
        }

        {
            let bias_idx = layers[l].bias;
            let mut acc = TreeAccumulator::new(dout);
            let mut sum = vec![R::ZERO; dout];
            acc.accumulate(0, b, &mut sum, &mut |j, leaf: &mut [R]| {
                leaf.copy_from_slice(&dh[j * dout..(j + 1) * dout])
            });
            for (g, s) in grads[segments[bias_idx].range()].iter_mut().zip(&sum) {
                *g = *s / bf;
            }
            on_segment(bias_idx, &grads[segments[bias_idx].range()]);
        }
        {
            let widx = layers[l].weight;
            let mut acc = TreeAccumulator::new(din * dout);
            let mut sum = vec![R::ZERO; din * dout];
            acc.accumulate(0, b, &mut sum, &mut |j, leaf: &mut [R]| {
                let xrow = &x[j * din..(j + 1) * din];
                let drow = &dh[j * dout..(j + 1) * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    for (slot, &dv) in leaf[i * dout..(i + 1) * dout].iter_mut().zip(drow) {
                        *slot = xv * dv;
                    }
                }
            });
            for (g, s) in grads[segments[widx].range()].iter_mut().zip(&sum) {
                *g = *s / bf;
            }
            on_segment(widx, &grads[segments[widx].range()]);
        }

        if l > 0 {
            let w = &cache.values[segments[layers[l].weight].range()];
            let mut dx = vec![R::ZERO; b * din];
            for j in 0..b {
                let drow = &dh[j * dout..(j + 1) * dout];
                let xrow = &mut dx[j * din..(j + 1) * din];
                for (i, slot) in xrow.iter_mut().enumerate() {
                    let wrow = &w[i * dout..(i + 1) * dout];
                    let mut s = R::ZERO;
                    for (&dv, &wv) in drow.iter().zip(wrow) {
                        s += dv * wv;
                    }
                    *slot = s;
                }
            }
            delta = dx;
        } else {
            delta = dh;
        }
    }
}

fn forward_eval_impl<R: Real>(
    spec: &ModelSpec,
    values: &[R],
    segments: &[ParamSegment],
    bn_states: &[Option<BatchNormState<R>>],
    features: &[R],
    labels: &[u32],
    label_smoothing: f32,
) -> EvalResult {
    let b = labels.len();
    assert!(b >= 1, "empty batch");
    assert_eq!(features.len(), b * spec.input_dim(), "feature shape mismatch");
    let k = spec.classes();
    let layers = layer_seg_ids(spec);
    let targets: Vec<Vec<R>> = (0..k).map(|c| smoothed_row(c, label_smoothing, k)).collect();

    let mut a = features.to_vec();
    for l in 0..spec.num_layers() {
        let din = spec.layer_dims[l];
        let dout = spec.layer_dims[l + 1];
        let w = &values[segments[layers[l].weight].range()];
        let bias = &values[segments[layers[l].bias].range()];
        let mut h = linear(&a, b, din, dout, w, bias);

        if let Some((gseg, bseg)) = layers[l].bn {
            let st = bn_states[l].as_ref().expect("BN layer without state");
            let gamma = &values[segments[gseg].range()];
            let beta = &values[segments[bseg].range()];
            let inv_std: Vec<R> = st
                .running_var
                .iter()
                .map(|&v| R::ONE / (v + st.epsilon).sqrt())
                .collect();
            for j in 0..b {
                for f in 0..dout {
                    let idx = j * dout + f;
                    h[idx] = gamma[f] * (h[idx] - st.running_mean[f]) * inv_std[f] + beta[f];
                }
            }
        }

        if l + 1 != spec.num_layers() {
            for v in &mut h {
                if *v < R::ZERO {
                    *v = R::ZERO;
                }
            }
        }
        a = h;
    }

    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for j in 0..b {
        let z = &a[j * k..(j + 1) * k];
        let mut m = z[0];
        let mut arg = 0usize;
        for (f, &v) in z.iter().enumerate().skip(1) {
            if v > m {
                m = v;
                arg = f;
            }
        }
        if arg == labels[j] as usize {
            correct += 1;
        }
        let mut s = R::ZERO;
        for &v in z {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        let t = &targets[labels[j] as usize];
        for (f, &tv) in t.iter().enumerate() {
            loss_sum += tv.to_f64() * (lse - z[f]).to_f64();
        }
    }
    EvalResult {
        loss: loss_sum / b as f64,
        correct,
        total: b,
    }
}

/// Central-difference audit of the analytic gradient.
///
/// Initializes the net from `seed`, draws a random batch from a stream
/// derived from the same seed, and probes every parameter coordinate at f64
/// precision. Coordinates where either probe lands on the other side of a
/// relu kink are skipped (the loss is not differentiable there); everything
/// else must match the backward pass to relative tolerance `tol`.
///
/// Returns (checked, skipped) on success. Fails if any checked coordinate
/// disagrees, if the kink skips exceed len/10 + 4 (small nets with batchnorm
/// flip masks easily, hence the absolute floor), or if nothing was checked.
pub fn gradient_check(
    spec: &ModelSpec,
    seed: u64,
    batch: usize,
    smoothing: f32,
    h: f64,
    tol: f64,
) -> Result<(usize, usize), String> {
    use crate::model::init_params;
    use crate::rng::{DetRng, StreamKind};

    fn run<'a>(
        spec: &'a ModelSpec,
        values: &'a [f64],
        segs: &'a [ParamSegment],
        x: &[f64],
        y: &[u32],
        smoothing: f32,
    ) -> (f64, Cached<'a, f64>, Vec<Vec<bool>>) {
        let mut bn: Vec<Option<BatchNormState<f64>>> = spec
            .use_batchnorm
            .iter()
            .enumerate()
            .map(|(l, &on)| on.then(|| BatchNormState::new(spec.layer_dims[l + 1])))
            .collect();
        let (loss, cache) = forward_train_impl(spec, values, segs, &mut bn, x, y, smoothing);
        let masks: Vec<Vec<bool>> = cache
            .inputs
            .iter()
            .skip(1)
            .map(|a| a.iter().map(|&v| v > 0.0).collect())
            .collect();
        (loss, cache, masks)
    }

    let params = init_params(spec, seed);
    let mut values: Vec<f64> = params.values.iter().map(|&v| v as f64).collect();
    let segs = params.segments.clone();
    let mut rng = DetRng::new(seed ^ 0x5eed, StreamKind::Data);
    let x: Vec<f64> = (0..batch * spec.input_dim())
        .map(|_| rng.trunc_normal() as f32 as f64)
        .collect();
    let y: Vec<u32> = (0..batch)
        .map(|_| rng.below(spec.classes() as u64) as u32)
        .collect();

    let (_, cache, base_mask) = run(spec, &values, &segs, &x, &y, smoothing);
    let mut grads = vec![0.0f64; values.len()];
    backward_impl(&cache, &mut grads, |_, _| {});
    drop(cache);

    let mut checked = 0usize;
    let mut skipped = 0usize;
    for e in 0..values.len() {
        let orig = values[e];
        values[e] = orig + h;
        let (lp, _, mp) = run(spec, &values, &segs, &x, &y, smoothing);
        values[e] = orig - h;
        let (lm, _, mm) = run(spec, &values, &segs, &x, &y, smoothing);
        values[e] = orig;
        if mp != base_mask || mm != base_mask {
            skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(grads[e].abs()).max(1e-4);
        let rel = (grads[e] - fd).abs() / denom;
        if rel >= tol {
            return Err(format!(
                "param {e}: analytic {} vs fd {fd}, rel {rel}",
                grads[e]
            ));
        }
        checked += 1;
    }
    if skipped > values.len() / 10 + 4 {
        return Err(format!("too many kink skips: {skipped} of {}", values.len()));
    }
    if checked == 0 {
        return Err("no coordinate was checkable".into());
    }
    Ok((checked, skipped))
}
