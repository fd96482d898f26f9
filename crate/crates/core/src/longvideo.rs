//! Autoregressive long-video planning.
//!
//! Each chunk after the first re-uses the last [`OVERLAP_FRAMES`] frames of
//! its predecessor as conditioning. Those frames compress to two latent
//! frames; the rest of the chunk's latents are generated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::TEMPORAL_STRIDE;
use crate::error::{config_err, Result};

/// Pixel frames shared between consecutive chunks.
pub const OVERLAP_FRAMES: usize = 5;
/// Smallest chunk that holds the overlap plus one new frame.
pub const MIN_CHUNK_LEN: usize = OVERLAP_FRAMES + 1;

/// Latent frames produced from `pixel_frames` frames: the first frame is
/// coded alone, the rest are compressed `stride`-fold.
pub fn latent_frames_with_stride(pixel_frames: usize, stride: usize) -> usize {
    assert!(stride > 0, "temporal stride must be positive");
    if pixel_frames == 0 {
        0
    } else {
        1 + (pixel_frames - 1).div_ceil(stride)
    }
}

/// [`latent_frames_with_stride`] at the default 4× compression.
pub fn latent_arithmetic(pixel_frames: usize) -> usize {
    latent_frames_with_stride(pixel_frames, TEMPORAL_STRIDE)
}

/// Inclusive, 1-indexed frame window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total_frames: usize,
    pub chunk_len: usize,
    pub chunks: Vec<Chunk>,
}

impl ChunkPlan {
    pub fn overlap(&self) -> usize {
        OVERLAP_FRAMES
    }

    /// Overlap of chunk `index` with its predecessor (0 for the first chunk).
    pub fn overlap_of(&self, index: usize) -> usize {
        if index == 0 {
            0
        } else {
            OVERLAP_FRAMES
        }
    }

    /// Every frame in order, dropping the re-generated overlap of each
    /// non-initial chunk.
    pub fn stitched_frames(&self) -> Vec<usize> {
        self.chunks
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (c.start + self.overlap_of(i))..=c.end)
            .collect()
    }

    /// One chunk per line: `index start end overlap`.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# chunk-plan v1 total={} chunk_len={} overlap={}\n# index start end overlap\n",
            self.total_frames, self.chunk_len, OVERLAP_FRAMES
        );
        for (i, c) in self.chunks.iter().enumerate() {
            writeln!(s, "{i} {} {} {}", c.start, c.end, self.overlap_of(i)).unwrap();
        }
        s
    }
}

/// Windows of `chunk_len` frames overlapping by five; the last window is
/// truncated at `total_frames`.
pub fn plan_chunks(total_frames: usize, chunk_len: usize) -> Result<ChunkPlan> {
    if chunk_len < MIN_CHUNK_LEN {
        return config_err(format!("chunk length {chunk_len} is below the minimum of {MIN_CHUNK_LEN}"));
    }
    if total_frames == 0 {
        return config_err("total frame count must be positive");
    }
    let mut chunks = vec![Chunk {
        start: 1,
        end: chunk_len.min(total_frames),
    }];
    while let Some(&last) = chunks.last() {
        if last.end >= total_frames {
            break;
        }
        let start = last.end + 1 - OVERLAP_FRAMES;
        chunks.push(Chunk {
            start,
            end: (start + chunk_len - 1).min(total_frames),
        });
    }
    Ok(ChunkPlan {
        total_frames,
        chunk_len,
        chunks,
    })
}

/// Latent layout of one chunk: conditioning slots first, then generated slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLatents {
    pub condition_frames: usize,
    pub total_frames: usize,
    /// 1 for conditioning latent frames, 0 for frames to generate.
    pub mask: Vec<u8>,
}

impl ConditionLatents {
    /// `u32` total latent frames, `u32` condition frames (both little-endian),
    /// then one mask byte per latent frame.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.mask.len());
        out.extend_from_slice(&(self.total_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.condition_frames as u32).to_le_bytes());
        out.extend_from_slice(&self.mask);
        out
    }
}

/// Mask for a continuation chunk: the five overlap frames occupy the first
/// two latent frames.
pub fn build_condition(chunk_len: usize) -> Result<ConditionLatents> {
    if chunk_len < MIN_CHUNK_LEN {
        return config_err(format!("chunk length {chunk_len} is below the minimum of {MIN_CHUNK_LEN}"));
    }
    Ok(condition_with(chunk_len, latent_arithmetic(OVERLAP_FRAMES)))
}

/// Mask for the opening chunk, conditioned on the reference image alone.
pub fn build_initial_condition(chunk_len: usize) -> Result<ConditionLatents> {
    if chunk_len == 0 {
        return config_err("chunk length must be positive");
    }
    Ok(condition_with(chunk_len, 1))
}

fn condition_with(chunk_len: usize, condition_frames: usize) -> ConditionLatents {
    let total = latent_arithmetic(chunk_len);
    let mask = (0..total).map(|i| u8::from(i < condition_frames)).collect();
    ConditionLatents {
        condition_frames,
        total_frames: total,
        mask,
    }
}
