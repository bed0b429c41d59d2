//! Frame codec.
//!
//! Every message is one frame: a 30-byte little-endian header
//! (magic "YASG", version, iteration id, group id, chunk index, dtype,
//! element count) followed by exactly `count * dtype_width` payload bytes.
//! Group ids at the top of the u32 range are reserved for control traffic
//! (barrier tokens, completion flags, bootstrap handshakes); gradient
//! groups stay far below them.

use crate::comm::CommError;
use crate::optim::Half16;
use std::io::Read;

pub const MAGIC: [u8; 4] = *b"YASG";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;

pub const GROUP_BARRIER: u32 = 0xffff_ffff;
pub const GROUP_FLAGS: u32 = 0xffff_fffe;
pub const GROUP_HELLO: u32 = 0xffff_fffd;
pub const GROUP_MAP: u32 = 0xffff_fffc;
pub const GROUP_REJECT: u32 = 0xffff_fffb;
pub const GROUP_RING: u32 = 0xffff_fffa;
/// Lowest reserved group id; data groups must stay below it.
pub const GROUP_RESERVED_MIN: u32 = GROUP_RING;

/// Refuses absurd element counts before allocating for the payload.
const MAX_PAYLOAD_BYTES: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F16 = 1,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Dtype> {
        match b {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }
}

/// One wire message. `payload.len()` is always `count * dtype.width()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub iteration: u64,
    pub group: u32,
    pub chunk: u32,
    pub dtype: Dtype,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn from_f32(iteration: u64, group: u32, chunk: u32, values: &[f32]) -> Frame {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Frame {
            iteration,
            group,
            chunk,
            dtype: Dtype::F32,
            payload,
        }
    }

    pub fn from_f16(iteration: u64, group: u32, chunk: u32, values: &[Half16]) -> Frame {
        let mut payload = Vec::with_capacity(values.len() * 2);
        for v in values {
            payload.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        Frame {
            iteration,
            group,
            chunk,
            dtype: Dtype::F16,
            payload,
        }
    }

    /// Control payloads are u32 words carried under the f32 dtype; the
    /// receiver reads them back as words, never as numbers.
    pub fn from_words(group: u32, chunk: u32, words: &[u32]) -> Frame {
        assert!(group >= GROUP_RESERVED_MIN, "control frame with data group id");
        let mut payload = Vec::with_capacity(words.len() * 4);
        for w in words {
            payload.extend_from_slice(&w.to_le_bytes());
        }
        Frame {
            iteration: 0,
            group,
            chunk,
            dtype: Dtype::F32,
            payload,
        }
    }

    pub fn element_count(&self) -> usize {
        self.payload.len() / self.dtype.width()
    }

    pub fn is_control(&self) -> bool {
        self.group >= GROUP_RESERVED_MIN
    }

    pub fn f32_payload(&self) -> Vec<f32> {
        assert_eq!(self.dtype, Dtype::F32);
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn f16_payload(&self) -> Vec<Half16> {
        assert_eq!(self.dtype, Dtype::F16);
        self.payload
            .chunks_exact(2)
            .map(|c| Half16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
            .collect()
    }

    pub fn words(&self) -> Vec<u32> {
        self.payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        debug_assert_eq!(self.payload.len() % self.dtype.width(), 0);
        let count = (self.payload.len() / self.dtype.width()) as u64;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.group.to_le_bytes());
        out.extend_from_slice(&self.chunk.to_le_bytes());
        out.push(self.dtype as u8);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Reads one frame from a stream. The header is validated before the
    /// payload is trusted.
    pub fn decode(reader: &mut impl Read) -> Result<Frame, CommError> {
        let mut head = [0u8; HEADER_LEN];
        reader.read_exact(&mut head)?;
        if head[..4] != MAGIC {
            return Err(CommError::BadMagic(head[..4].try_into().unwrap()));
        }
        if head[4] != VERSION {
            return Err(CommError::BadVersion(head[4]));
        }
        let iteration = u64::from_le_bytes(head[5..13].try_into().unwrap());
        let group = u32::from_le_bytes(head[13..17].try_into().unwrap());
        let chunk = u32::from_le_bytes(head[17..21].try_into().unwrap());
        let dtype = Dtype::from_byte(head[21])
            .ok_or_else(|| CommError::BadFrame(format!("dtype byte {}", head[21])))?;
        let count = u64::from_le_bytes(head[22..30].try_into().unwrap());
        let bytes = count.checked_mul(dtype.width() as u64).unwrap_or(u64::MAX);
        if bytes > MAX_PAYLOAD_BYTES {
            return Err(CommError::BadFrame(format!("payload of {count} elements")));
        }
        let mut payload = vec![0u8; bytes as usize];
        reader.read_exact(&mut payload)?;
        Ok(Frame {
            iteration,
            group,
            chunk,
            dtype,
            payload,
        })
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Frame, CommError> {
        let mut cursor = bytes;
        let frame = Frame::decode(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(CommError::BadFrame(format!(
                "{} trailing bytes",
                cursor.len()
            )));
        }
        Ok(frame)
    }
}
