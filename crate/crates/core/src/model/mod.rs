//! Model structure, parameter layout, and training data.
//!
//! All parameters of the network live in one flat f32 buffer described by a
//! segment table. Working on the fused buffer is what lets the optimizer
//! compute every layer norm in one pass and lets the communication layer
//! bucket gradients without per-layer bookkeeping.

mod data;
mod init;
mod net;

pub use data::{epoch_plan, gen_dataset, iterations_per_epoch, shard, EpochPlan};
pub use init::init_params;
pub use net::{
    backward, backward_with, batchnorm_update, forward_eval, forward_train, gradient_check,
    smooth_labels, EvalResult, Real, TrainCache,
};

/// What a parameter segment holds. Drives initialization and the LARS and
/// weight-decay skip lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

/// One named contiguous slice of the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct ParamSegment {
    pub name: String,
    /// Element offset into the flat buffer.
    pub offset: usize,
    /// Element count; equals the product of `shape`.
    pub len: usize,
    pub shape: Vec<usize>,
    pub kind: SegmentKind,
}

impl ParamSegment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Segment size on the wire and in memory.
    pub fn bytes(&self) -> usize {
        self.len * std::mem::size_of::<f32>()
    }
}

/// Checks that `segments` are sorted, non-overlapping, and exactly tile a
/// buffer of `total_len` elements.
pub fn validate_segments(segments: &[ParamSegment], total_len: usize) -> Result<(), String> {
    let mut expected = 0usize;
    for seg in segments {
        if seg.offset != expected {
            return Err(format!(
                "segment {} starts at {} but previous segments end at {}",
                seg.name, seg.offset, expected
            ));
        }
        if seg.len != seg.shape.iter().product::<usize>() {
            return Err(format!("segment {} len does not match its shape", seg.name));
        }
        expected += seg.len;
    }
    if expected != total_len {
        return Err(format!(
            "segments cover {} elements but buffer holds {}",
            expected, total_len
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Shape of the MLP classifier: `layer_dims` runs input dim, hidden dims,
/// class count. Batch normalization is a per-hidden-layer choice; the output
/// layer never has it.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub use_batchnorm: Vec<bool>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, use_batchnorm: Vec<bool>) -> Result<Self, String> {
        if layer_dims.len() < 2 {
            return Err("layer_dims needs at least an input dim and a class count".into());
        }
        if layer_dims.iter().any(|&d| d < 1) {
            return Err("all layer dims must be at least 1".into());
        }
        let classes = *layer_dims.last().unwrap();
        if classes < 2 {
            return Err("class count must be at least 2".into());
        }
        let hidden = layer_dims.len() - 2;
        if use_batchnorm.len() != hidden {
            return Err(format!(
                "use_batchnorm has {} flags but the net has {} hidden layers",
                use_batchnorm.len(),
                hidden
            ));
        }
        Ok(ModelSpec {
            layer_dims,
            use_batchnorm,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of linear layers.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// True when hidden layer `layer` normalizes its pre-activation.
    /// The output layer (index `num_layers() - 1`) reports false.
    pub fn layer_has_bn(&self, layer: usize) -> bool {
        layer < self.use_batchnorm.len() && self.use_batchnorm[layer]
    }

    /// Builds the segment table. Layout per layer: weight, bias, then
    /// bn_gamma and bn_beta when the layer is normalized.
    pub fn segments(&self) -> Vec<ParamSegment> {
        let mut segs = Vec::new();
        let mut offset = 0usize;
        let mut push = |segs: &mut Vec<ParamSegment>, name: String, shape: Vec<usize>, kind| {
            let len = shape.iter().product();
            segs.push(ParamSegment {
                name,
                offset,
                len,
                shape,
                kind,
            });
            offset += len;
        };
        for l in 0..self.num_layers() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            push(
                &mut segs,
                format!("layer{l}.weight"),
                vec![din, dout],
                SegmentKind::Weight,
            );
            push(
                &mut segs,
                format!("layer{l}.bias"),
                vec![dout],
                SegmentKind::Bias,
            );
            if self.layer_has_bn(l) {
                push(
                    &mut segs,
                    format!("layer{l}.bn_gamma"),
                    vec![dout],
                    SegmentKind::BnGamma,
                );
                push(
                    &mut segs,
                    format!("layer{l}.bn_beta"),
                    vec![dout],
                    SegmentKind::BnBeta,
                );
            }
        }
        segs
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|s| s.len).sum()
    }

    /// One state slot per hidden layer; `None` where the layer has no BN.
    pub fn fresh_bn_states(&self) -> Vec<Option<BatchNormState>> {
        (0..self.use_batchnorm.len())
            .map(|l| {
                self.use_batchnorm[l].then(|| BatchNormState::new(self.layer_dims[l + 1]))
            })
            .collect()
    }
}

/// The master copy of all parameters, single precision.
#[derive(Clone, Debug)]
pub struct FlatParams {
    pub values: Vec<f32>,
    pub segments: Vec<ParamSegment>,
}

impl FlatParams {
    pub fn zeros(segments: Vec<ParamSegment>) -> FlatParams {
        let total = segments.iter().map(|s| s.len).sum();
        validate_segments(&segments, total).expect("segment table must tile the buffer");
        FlatParams {
            values: vec![0.0; total],
            segments,
        }
    }

    pub fn segment_slice(&self, idx: usize) -> &[f32] {
        &self.values[self.segments[idx].range()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Defaults match the logged training hyperparameters.
pub const BN_DEFAULT_MOMENTUM: f32 = 0.9;
pub const BN_DEFAULT_EPSILON: f32 = 1e-5;

/// Per-feature moving averages for one batch-normalized layer.
///
/// Fresh state starts at mean 0, variance 1 so eval mode is usable before
/// any update. The moving averages are never synchronized between workers;
/// each worker maintains its own. Generic over the scalar so gradient
/// oracles can run the identical code path in f64; training uses f32.
#[derive(Clone, Debug)]
pub struct BatchNormState<R = f32> {
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub epsilon: R,
}

impl<R: Real> BatchNormState<R> {
    pub fn new(features: usize) -> BatchNormState<R> {
        Self::with_hyper(
            features,
            R::from_f32(BN_DEFAULT_MOMENTUM),
            R::from_f32(BN_DEFAULT_EPSILON),
        )
    }

    pub fn with_hyper(features: usize, momentum: R, epsilon: R) -> BatchNormState<R> {
        assert!(
            R::ZERO <= momentum && momentum <= R::ONE,
            "momentum must be in [0,1]"
        );
        assert!(epsilon > R::ZERO, "epsilon must be positive");
        BatchNormState {
            running_mean: vec![R::ZERO; features],
            running_var: vec![R::ONE; features],
            momentum,
            epsilon,
        }
    }
}

/// Labeled feature vectors, row-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Seed the set was generated from; epoch shuffles derive from it too.
    pub seed: u64,
}

impl Dataset {
    pub fn sample(&self, idx: usize) -> &[f32] {
        &self.features[idx * self.d..(idx + 1) * self.d]
    }
}
