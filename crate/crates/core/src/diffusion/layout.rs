use std::ops::Range;

use crate::error::{Error, Result};

/// Partition of the token axis into frame-aligned chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub n: usize,
    pub n_s: usize,
    pub n_local: usize,
    pub tokens_per_frame: usize,
    pub chunks: Vec<Range<usize>>,
}

impl ChunkLayout {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Local-context rows of chunk `i`: the tail of chunk `i−1`, empty for chunk 0.
    pub fn local(&self, i: usize) -> Range<usize> {
        if i == 0 {
            return 0..0;
        }
        let s = self.chunks[i].start;
        s - self.n_local..s
    }

    /// Overlap width in frames.
    pub fn local_frames(&self) -> usize {
        self.n_local / self.tokens_per_frame
    }

    /// First frame index of every chunk after the first.
    pub fn boundary_frames(&self) -> Vec<usize> {
        self.chunks[1..].iter().map(|c| c.start / self.tokens_per_frame).collect()
    }
}

/// `ceil(N/N_s)` chunks of `N_s` tokens, the last possibly shorter.
pub fn make_chunk_layout(n: usize, n_s: usize, n_local: usize, tokens_per_frame: usize) -> Result<ChunkLayout> {
    if tokens_per_frame == 0 || n_s == 0 || n == 0 {
        return Err(Error::Config("token counts must be positive".into()));
    }
    for (name, v) in [("N", n), ("N_s", n_s), ("N_local", n_local)] {
        if v % tokens_per_frame != 0 {
            return Err(Error::Config(format!(
                "{name}={v} is not a multiple of {tokens_per_frame} tokens per frame"
            )));
        }
    }
    if n_local > n_s {
        return Err(Error::Config(format!("N_local={n_local} exceeds N_s={n_s}")));
    }
    let chunks = (0..n.div_ceil(n_s))
        .map(|i| i * n_s..((i + 1) * n_s).min(n))
        .collect();
    Ok(ChunkLayout {
        n,
        n_s,
        n_local,
        tokens_per_frame,
        chunks,
    })
}
