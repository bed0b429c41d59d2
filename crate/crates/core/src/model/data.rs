//! Synthetic classification data and epoch sharding.
//!
//! Every rank derives the identical per-epoch permutation from the dataset
//! seed, then takes its own contiguous slice of each global batch. No data
//! or index exchange happens between workers, and a single worker walking
//! the whole permutation sees the global batches in exactly the same sample
//! order as P workers walking their shards.

use super::Dataset;
use crate::rng::{DetRng, StreamKind};

/// Spread of each class blob. Chosen so classes overlap enough that
/// accuracy is a meaningful signal rather than saturating at 100%.
const BLOB_NOISE: f64 = 2.0;

/// Gaussian-blob classification set: K centers, samples scatter around the
/// center of their label. Fully determined by `seed`.
pub fn gen_dataset(seed: u64, n: usize, d: usize, classes: usize) -> Dataset {
    assert!(n >= 1 && d >= 1 && classes >= 2);
    let mut rng = DetRng::new(seed, StreamKind::Data);
    let centers: Vec<f64> = (0..classes * d).map(|_| 2.0 * rng.trunc_normal()).collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(classes as u64) as usize;
        labels.push(y as u32);
        for i in 0..d {
            let v = centers[y * d + i] + BLOB_NOISE * rng.trunc_normal();
            features.push(v as f32);
        }
    }
    Dataset {
        features,
        labels,
        n,
        d,
        classes,
        seed,
    }
}

/// Per-rank shape of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    /// Iterations where every rank processes a full `batch_per_rank`.
    pub full_iters: usize,
    /// Per-rank sample count of the trailing partial iteration, 0 if the
    /// tail is dropped.
    pub extra_batch: usize,
}

impl EpochPlan {
    pub fn iterations(&self) -> usize {
        self.full_iters + (self.extra_batch > 0) as usize
    }

    /// Samples one rank touches per epoch.
    pub fn samples_per_rank(&self, batch_per_rank: usize) -> usize {
        self.full_iters * batch_per_rank + self.extra_batch
    }

    /// Per-rank batch of iteration `iter` within the epoch.
    pub fn batch_at(&self, iter: usize, batch_per_rank: usize) -> usize {
        if iter < self.full_iters {
            batch_per_rank
        } else {
            assert!(iter == self.full_iters && self.extra_batch > 0);
            self.extra_batch
        }
    }
}

/// How an epoch of `n` samples splits across `world` ranks at
/// `batch_per_rank` samples each. The tail is dropped unless it still fills
/// at least one full per-rank batch and gives every rank at least one
/// sample; a kept tail is split evenly and its own remainder dropped, so
/// all ranks always step in lockstep with equal batch sizes.
pub fn epoch_plan(n: usize, world: usize, batch_per_rank: usize) -> EpochPlan {
    assert!(world >= 1 && batch_per_rank >= 1);
    let global = world * batch_per_rank;
    let full_iters = n / global;
    let rem = n - full_iters * global;
    let extra_batch = if rem >= batch_per_rank { rem / world } else { 0 };
    EpochPlan {
        full_iters,
        extra_batch,
    }
}

/// Optimizer updates one epoch contributes.
pub fn iterations_per_epoch(n: usize, world: usize, batch_per_rank: usize) -> usize {
    epoch_plan(n, world, batch_per_rank).iterations()
}

/// Sample indices rank `rank` processes in `epoch`, concatenated over the
/// epoch's iterations. All ranks derive the same permutation locally; rank
/// r takes the r-th contiguous block of every global batch.
pub fn shard(
    dataset: &Dataset,
    epoch: u64,
    rank: usize,
    world: usize,
    batch_per_rank: usize,
) -> Vec<u32> {
    assert!(world >= 1 && rank < world, "rank {rank} outside world {world}");
    let plan = epoch_plan(dataset.n, world, batch_per_rank);
    let perm = DetRng::new(dataset.seed, StreamKind::Shuffle(epoch)).permutation(dataset.n);
    let global = world * batch_per_rank;
    let mut out = Vec::with_capacity(plan.samples_per_rank(batch_per_rank));
    for t in 0..plan.full_iters {
        let start = t * global + rank * batch_per_rank;
        out.extend_from_slice(&perm[start..start + batch_per_rank]);
    }
    if plan.extra_batch > 0 {
        let start = plan.full_iters * global + rank * plan.extra_batch;
        out.extend_from_slice(&perm[start..start + plan.extra_batch]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn imagenet_scale_update_count() {
        assert_eq!(iterations_per_epoch(1_280_000, 2048, 40), 16);
        let plan = epoch_plan(1_280_000, 2048, 40);
        assert_eq!(plan.full_iters, 15);
        assert_eq!(plan.extra_batch, 25);
        assert_eq!(16 * 90, 1440);
    }

    #[test]
    fn two_ranks_partition_eight_samples() {
        let ds = gen_dataset(5, 8, 3, 2);
        let a = shard(&ds, 0, 0, 2, 4);
        let b = shard(&ds, 0, 1, 2, 4);
        assert_eq!(a.len(), 4);
        assert_eq!(b.len(), 4);
        let union: BTreeSet<u32> = a.iter().chain(b.iter()).cloned().collect();
        assert_eq!(union, (0..8).collect());
    }

    #[test]
    fn single_rank_gets_the_full_permutation() {
        let ds = gen_dataset(5, 12, 3, 2);
        let s = shard(&ds, 3, 0, 1, 4);
        assert_eq!(s.len(), 12);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<u32>>());
    }

    #[test]
    fn tail_rules() {
        // 100 = 6 full global batches of 16 plus 4 leftovers; 4 < 8 so the
        // tail cannot fill one per-rank batch and is dropped.
        assert_eq!(
            epoch_plan(100, 2, 8),
            EpochPlan {
                full_iters: 6,
                extra_batch: 0
            }
        );
        // 100 = 16 full global batches of 6 plus 4; 4 >= 3 and splits as 2
        // per rank.
        assert_eq!(
            epoch_plan(100, 2, 3),
            EpochPlan {
                full_iters: 16,
                extra_batch: 2
            }
        );
        // Tail covers a batch for one rank but not every rank: dropped.
        assert_eq!(
            epoch_plan(21, 8, 2),
            EpochPlan {
                full_iters: 1,
                extra_batch: 0
            }
        );
        assert_eq!(epoch_plan(8, 2, 4).iterations(), 1);
    }

    #[test]
    fn shards_partition_and_are_stable() {
        for world in [1usize, 2, 3, 4] {
            for epoch in [0u64, 1, 7] {
                let ds = gen_dataset(9, 53, 4, 3);
                let bpr = 5;
                let shards: Vec<Vec<u32>> =
                    (0..world).map(|r| shard(&ds, epoch, r, world, bpr)).collect();
                let plan = epoch_plan(53, world, bpr);
                let mut seen = BTreeSet::new();
                for s in &shards {
                    assert_eq!(s.len(), plan.samples_per_rank(bpr));
                    for &i in s {
                        assert!((i as usize) < 53);
                        assert!(seen.insert(i), "index {i} assigned twice");
                    }
                }
                for (r, s) in shards.iter().enumerate() {
                    assert_eq!(&shard(&ds, epoch, r, world, bpr), s);
                }
            }
        }
    }

    #[test]
    fn epochs_reshuffle() {
        let ds = gen_dataset(9, 64, 4, 3);
        let e0 = shard(&ds, 0, 0, 1, 8);
        let e1 = shard(&ds, 1, 0, 1, 8);
        assert_ne!(e0, e1);
    }

    #[test]
    fn world_shards_tile_the_single_rank_walk() {
        // The global batch at step t is the same samples in the same order
        // whether one rank walks it whole or P ranks walk their blocks.
        // This is the sample-order half of the distributed equivalence
        // argument.
        let ds = gen_dataset(13, 96, 4, 3);
        let world = 4;
        let bpr = 8;
        let global = world * bpr;
        let solo = shard(&ds, 2, 0, 1, global);
        let shards: Vec<Vec<u32>> = (0..world).map(|r| shard(&ds, 2, r, world, bpr)).collect();
        let plan = epoch_plan(96, world, bpr);
        for t in 0..plan.iterations() {
            let mut stitched = Vec::new();
            for s in &shards {
                let b = plan.batch_at(t, bpr);
                stitched.extend_from_slice(&s[t * bpr..t * bpr + b]);
            }
            assert_eq!(&solo[t * global..t * global + stitched.len()], &stitched[..]);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let a = gen_dataset(77, 500, 6, 5);
        let b = gen_dataset(77, 500, 6, 5);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|&y| y < 5));
        assert!(a.features.iter().all(|v| v.is_finite() && v.abs() <= 8.0));
        let c = gen_dataset(78, 500, 6, 5);
        assert_ne!(a.features, c.features);

        // below() is uniform enough that no class starves.
        let mut counts = [0usize; 5];
        for &y in &a.labels {
            counts[y as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 50), "counts {counts:?}");
    }
}
