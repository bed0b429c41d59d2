//! Ring allreduce: P−1 reduce-scatter steps, then P−1 allgather steps.
//!
//! During reduce-scatter an in-flight chunk does not carry one folded sum;
//! it carries the partial sums of the canonical tree blocks covered so far
//! (at most ~2·log2(P) of them). Every receiver can reconstruct the block
//! layout from the ring schedule alone, so the wire stays a plain element
//! array. The finished chunk is the canonical tree over all ranks, making
//! the sum independent of chunk origin and bucket layout, and aligned with
//! the in-rank batch tree.
//!
//! Half-precision mode quantizes every payload before it is sent and
//! accumulates in f32 after dequantizing. The chunk owner quantizes its
//! finished chunk once and installs the dequantized copy locally, so the
//! allgather leaves bitwise-identical buffers on every rank in both modes.

use crate::comm::wire::{Dtype, Frame, GROUP_BARRIER, GROUP_FLAGS};
use crate::comm::{CommError, RingEndpoint};
use crate::optim::{dequantize_fp16, quantize_fp16, Half16};
use crate::pairwise::{arc_blocks, BlockMerge};
use std::ops::Range;

/// Elements of chunk `c` when `count` elements split across `world` ranks:
/// `[c·⌈count/world⌉, min((c+1)·⌈count/world⌉, count))`. Tail chunks may be
/// empty.
pub fn chunk_span(count: usize, world: usize, c: usize) -> Range<usize> {
    let w = count.div_ceil(world);
    let lo = (c * w).min(count);
    let hi = ((c + 1) * w).min(count);
    lo..hi
}

fn stack_frame(st: &BlockMerge, iteration: u64, group: u32, chunk: u32, dtype: Dtype) -> Frame {
    let vals = st.concat();
    match dtype {
        Dtype::F32 => Frame::from_f32(iteration, group, chunk, &vals),
        Dtype::F16 => Frame::from_f16(iteration, group, chunk, &quantize_fp16(&vals)),
    }
}

fn decode_elems(frame: &Frame) -> Vec<f32> {
    match frame.dtype {
        Dtype::F32 => frame.f32_payload(),
        Dtype::F16 => dequantize_fp16(&frame.f16_payload()),
    }
}

fn validate(
    frame: &Frame,
    iteration: u64,
    group: u32,
    chunk: u32,
    dtype: Dtype,
    count: usize,
) -> Result<(), CommError> {
    if frame.iteration != iteration
        || frame.group != group
        || frame.chunk != chunk
        || frame.dtype != dtype
        || frame.element_count() != count
    {
        return Err(CommError::Protocol(format!(
            "header mismatch: got iteration {} group {} chunk {} count {}, \
             want iteration {iteration} group {group} chunk {chunk} count {count}",
            frame.iteration,
            frame.group,
            frame.chunk,
            frame.element_count()
        )));
    }
    Ok(())
}

/// In-place sum over all ranks. Identical `buf.len()` required everywhere;
/// a count mismatch surfaces as a protocol error on the first receive so
/// the iteration can abort.
pub fn ring_allreduce(
    buf: &mut [f32],
    ep: &mut RingEndpoint,
    iteration: u64,
    group: u32,
    dtype: Dtype,
) -> Result<(), CommError> {
    let p = ep.world();
    if p == 1 {
        return Ok(());
    }
    let r = ep.rank();
    let n = buf.len();

    // Reduce-scatter. At step s this rank sends chunk (r−s) and receives
    // chunk (r−1−s), whose stack then covers ranks [recv_c, r].
    let mut current = {
        let span = chunk_span(n, p, r);
        let mut st = BlockMerge::new(p, span.len());
        st.insert(r, buf[span].to_vec());
        st
    };
    for s in 0..p - 1 {
        let send_c = (r + p - s) % p;
        ep.send_next(&stack_frame(&current, iteration, group, send_c as u32, dtype))?;
        let recv_c = (r + p - 1 - s) % p;
        let span = chunk_span(n, p, recv_c);
        let blocks = arc_blocks(recv_c, s + 1, p);
        let frame = ep.recv_prev()?;
        validate(
            &frame,
            iteration,
            group,
            recv_c as u32,
            dtype,
            blocks.len() * span.len(),
        )?;
        let data = decode_elems(&frame);
        let mut st = BlockMerge::from_parts(p, span.len(), &blocks, &data)
            .ok_or_else(|| CommError::Protocol("stack does not match the schedule".into()))?;
        st.insert(r, buf[span].to_vec());
        current = st;
    }
    let owned_c = (r + 1) % p;
    let owned = current.finish();

    // Allgather. At step s this rank forwards chunk (r+1−s) and receives
    // chunk (r−s); finished chunks travel verbatim.
    match dtype {
        Dtype::F32 => {
            buf[chunk_span(n, p, owned_c)].copy_from_slice(&owned);
            for s in 0..p - 1 {
                let send_c = (r + 1 + p - s) % p;
                let send_span = chunk_span(n, p, send_c);
                ep.send_next(&Frame::from_f32(
                    iteration,
                    group,
                    send_c as u32,
                    &buf[send_span],
                ))?;
                let recv_c = (r + p - s) % p;
                let span = chunk_span(n, p, recv_c);
                let frame = ep.recv_prev()?;
                validate(&frame, iteration, group, recv_c as u32, dtype, span.len())?;
                buf[span].copy_from_slice(&frame.f32_payload());
            }
        }
        Dtype::F16 => {
            let mut held: Vec<Option<Vec<Half16>>> = vec![None; p];
            let q = quantize_fp16(&owned);
            buf[chunk_span(n, p, owned_c)].copy_from_slice(&dequantize_fp16(&q));
            held[owned_c] = Some(q);
            for s in 0..p - 1 {
                let send_c = (r + 1 + p - s) % p;
                let bits = held[send_c].as_ref().expect("chunk not yet held");
                ep.send_next(&Frame::from_f16(iteration, group, send_c as u32, bits))?;
                let recv_c = (r + p - s) % p;
                let span = chunk_span(n, p, recv_c);
                let frame = ep.recv_prev()?;
                validate(&frame, iteration, group, recv_c as u32, dtype, span.len())?;
                let bits = frame.f16_payload();
                buf[span].copy_from_slice(&dequantize_fp16(&bits));
                held[recv_c] = Some(bits);
            }
        }
    }
    Ok(())
}

/// Full ring synchronization: a token circulates twice, so when the second
/// pass reaches a rank every other rank has entered the barrier.
pub fn barrier(ep: &mut RingEndpoint) -> Result<(), CommError> {
    if ep.world() == 1 {
        return Ok(());
    }
    for round in 0..2u32 {
        let token = Frame::from_words(GROUP_BARRIER, round, &[]);
        let check = |f: &Frame| {
            if f.group != GROUP_BARRIER || f.chunk != round {
                return Err(CommError::Protocol(format!(
                    "expected barrier round {round}, got group {:#x} chunk {}",
                    f.group, f.chunk
                )));
            }
            Ok(())
        };
        if ep.rank() == 0 {
            ep.send_next(&token)?;
            check(&ep.recv_prev()?)?;
        } else {
            check(&ep.recv_prev()?)?;
            ep.send_next(&token)?;
        }
    }
    Ok(())
}

/// OR-reduction of completion bitmasks across ranks: the measurable
/// baseline for dynamic scheduling, which pays P−1 extra messages per call.
pub fn allgather_flags(flags: &[u32], ep: &mut RingEndpoint) -> Result<Vec<u32>, CommError> {
    let p = ep.world();
    let mut acc = flags.to_vec();
    for _ in 0..p.saturating_sub(1) {
        ep.send_next(&Frame::from_words(GROUP_FLAGS, 0, &acc))?;
        let frame = ep.recv_prev()?;
        if frame.group != GROUP_FLAGS || frame.element_count() != flags.len() {
            return Err(CommError::Protocol("bad flags frame".into()));
        }
        for (a, w) in acc.iter_mut().zip(frame.words()) {
            *a |= w;
        }
    }
    Ok(acc)
}
