//! Canonical reduction trees.
//!
//! Floating-point addition is not associative, so a distributed sum is only
//! reproducible if every participant agrees on the exact shape of the
//! reduction tree. This module pins that shape once, and both the model's
//! batch-gradient accumulation and the ring allreduce build the same tree:
//!
//! * A block of `n` leaves splits at [`split_point`]`(n)`, the largest
//!   power of two strictly below `n` (so power-of-two blocks split in half).
//! * Every merge computes `left + right` with the lower-index block on the
//!   left.
//!
//! Because aligned power-of-two blocks nest, the tree over a global batch
//! contains, as subtrees, the trees over each worker's contiguous shard for
//! every power-of-two worker count. Summing shard partials along the same
//! tree therefore reproduces the single-worker sum bit for bit, which is
//! what makes final weights independent of world size and of gradient
//! bucket layout.

use std::ops::Add;

/// Split offset for a block of `n >= 2` leaves: the largest power of two
/// strictly less than `n`. Power-of-two blocks split exactly in half.
pub fn split_point(n: usize) -> usize {
    debug_assert!(n >= 2);
    1 << (usize::BITS - 1 - (n - 1).leading_zeros())
}

/// Whether `[start, start + len)` is a node of the canonical tree over
/// `[0, universe)`.
pub fn is_canonical_block(start: usize, len: usize, universe: usize) -> bool {
    if len == 0 || start + len > universe {
        return false;
    }
    let (mut lo, mut hi) = (0usize, universe);
    loop {
        if lo == start && hi == start + len {
            return true;
        }
        if hi - lo <= 1 {
            return false;
        }
        let mid = lo + split_point(hi - lo);
        if start + len <= mid {
            hi = mid;
        } else if start >= mid {
            lo = mid;
        } else {
            return false;
        }
    }
}

/// Canonical decomposition of the circular arc `[origin, origin + len)`
/// (mod `world`) into maximal tree blocks, ascending by start rank.
///
/// This is the exact block layout a [`BlockMerge`] holds after the arc's
/// ranks have been inserted in any order, so a receiver that knows the ring
/// schedule can reconstruct a sender's state without a wire-level table.
/// `len` must stay below `world`; a closed arc is a single root block and
/// never travels.
pub fn arc_blocks(origin: usize, len: usize, world: usize) -> Vec<(usize, usize)> {
    assert!(origin < world, "origin outside ring");
    assert!(len >= 1 && len < world, "arc length {len} of {world}");
    let mut out = Vec::new();
    let first = (world - origin).min(len);
    cover(origin, origin + first, 0, world, &mut out);
    if len > first {
        cover(0, len - first, 0, world, &mut out);
    }
    out.sort_unstable_by_key(|&(s, _)| s);
    out
}

/// Pushes the maximal canonical blocks covering `[a, b)` within the tree
/// node `[lo, hi)`.
fn cover(a: usize, b: usize, lo: usize, hi: usize, out: &mut Vec<(usize, usize)>) {
    if a == lo && b == hi {
        out.push((lo, hi - lo));
        return;
    }
    let mid = lo + split_point(hi - lo);
    if b <= mid {
        cover(a, b, lo, mid, out);
    } else if a >= mid {
        cover(a, b, mid, hi, out);
    } else {
        cover(a, mid, lo, mid, out);
        cover(mid, b, mid, hi, out);
    }
}

/// Canonical tree sum of a slice. The shape is fixed by [`split_point`];
/// element order is the slice order.
pub fn tree_sum<T: Copy + Add<Output = T> + Default>(values: &[T]) -> T {
    match values.len() {
        0 => T::default(),
        1 => values[0],
        n => {
            let mid = split_point(n);
            tree_sum(&values[..mid]) + tree_sum(&values[mid..])
        }
    }
}

/// Accumulates per-leaf vectors into their canonical tree sum without
/// materializing all leaves: `O(log n)` scratch buffers of `width` elements.
pub struct TreeAccumulator<T> {
    width: usize,
    scratch: Vec<Vec<T>>,
}

impl<T: Copy + Add<Output = T> + Default> TreeAccumulator<T> {
    pub fn new(width: usize) -> Self {
        TreeAccumulator {
            width,
            scratch: Vec::new(),
        }
    }

    /// Fills `out` with the canonical tree sum of leaves `lo..hi`, where
    /// `fill_leaf(i, buf)` writes leaf `i` (overwriting `buf` completely).
    pub fn accumulate(
        &mut self,
        lo: usize,
        hi: usize,
        out: &mut [T],
        fill_leaf: &mut impl FnMut(usize, &mut [T]),
    ) {
        assert!(hi > lo, "empty leaf range");
        assert_eq!(out.len(), self.width);
        self.node(lo, hi, 0, out, fill_leaf);
    }

    fn node(
        &mut self,
        lo: usize,
        hi: usize,
        depth: usize,
        out: &mut [T],
        fill_leaf: &mut impl FnMut(usize, &mut [T]),
    ) {
        if hi - lo == 1 {
            fill_leaf(lo, out);
            return;
        }
        let mid = lo + split_point(hi - lo);
        self.node(lo, mid, depth + 1, out, fill_leaf);
        if self.scratch.len() <= depth {
            self.scratch.resize_with(depth + 1, Vec::new);
        }
        let mut right = std::mem::take(&mut self.scratch[depth]);
        right.resize(self.width, T::default());
        self.node(mid, hi, depth + 1, &mut right, fill_leaf);
        for (o, r) in out.iter_mut().zip(right.iter()) {
            *o = *o + *r;
        }
        self.scratch[depth] = right;
    }
}

/// Partial sums over a growing arc of ranks, merged along the canonical tree
/// of `[0, world)`. The ring allreduce threads one of these through each
/// chunk's journey: every hop inserts one rank's contribution, sibling
/// blocks merge as soon as both are present, and once the arc closes the
/// state collapses to the canonical tree sum over all ranks.
pub struct BlockMerge {
    world: usize,
    width: usize,
    /// Disjoint canonical blocks sorted by start rank.
    blocks: Vec<(usize, usize, Vec<f32>)>,
}

impl BlockMerge {
    pub fn new(world: usize, width: usize) -> Self {
        BlockMerge {
            world,
            width,
            blocks: Vec::new(),
        }
    }

    /// Restores a state received from the wire. `starts_lens` must describe
    /// disjoint canonical blocks; `data` holds their buffers concatenated in
    /// ascending start order.
    pub fn from_parts(
        world: usize,
        width: usize,
        starts_lens: &[(usize, usize)],
        data: &[f32],
    ) -> Option<Self> {
        if data.len() != starts_lens.len() * width {
            return None;
        }
        let mut blocks = Vec::with_capacity(starts_lens.len());
        for (i, &(start, len)) in starts_lens.iter().enumerate() {
            if !is_canonical_block(start, len, world) {
                return None;
            }
            blocks.push((start, len, data[i * width..(i + 1) * width].to_vec()));
        }
        let mut state = BlockMerge {
            world,
            width,
            blocks,
        };
        state.settle();
        Some(state)
    }

    /// Inserts rank `r`'s contribution and merges what can be merged.
    pub fn insert(&mut self, rank: usize, buf: Vec<f32>) {
        assert_eq!(buf.len(), self.width);
        assert!(rank < self.world);
        let pos = self
            .blocks
            .iter()
            .position(|&(s, _, _)| s > rank)
            .unwrap_or(self.blocks.len());
        self.blocks.insert(pos, (rank, 1, buf));
        self.settle();
    }

    fn settle(&mut self) {
        loop {
            let mut merged = false;
            let mut i = 0;
            while i + 1 < self.blocks.len() {
                let (s0, l0, _) = self.blocks[i];
                let (s1, l1, _) = self.blocks[i + 1];
                if s0 + l0 == s1 && is_canonical_block(s0, l0 + l1, self.world) {
                    let (_, _, right) = self.blocks.remove(i + 1);
                    let left = &mut self.blocks[i];
                    for (a, b) in left.2.iter_mut().zip(right.iter()) {
                        *a += *b;
                    }
                    left.1 += l1;
                    merged = true;
                } else {
                    i += 1;
                }
            }
            if !merged {
                break;
            }
        }
    }

    /// Block descriptors in ascending start order.
    pub fn parts(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|&(s, l, _)| (s, l)).collect()
    }

    /// Buffers concatenated in ascending start order, for the wire.
    pub fn concat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.blocks.len() * self.width);
        for (_, _, buf) in &self.blocks {
            out.extend_from_slice(buf);
        }
        out
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Consumes the state once every rank has contributed, yielding the
    /// canonical tree sum.
    pub fn finish(mut self) -> Vec<f32> {
        assert_eq!(self.blocks.len(), 1, "arc not closed: {:?}", self.parts());
        assert_eq!(self.blocks[0].1, self.world);
        self.blocks.pop().unwrap().2
    }
}
