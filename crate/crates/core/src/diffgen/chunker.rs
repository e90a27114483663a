//! Content-defined chunking with a polynomial rolling hash.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fstree::{hash_content, Digest};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkSpecError {
    #[error("window must be at least 1 byte")]
    Window,
    #[error("boundary mask must use between 1 and 63 bits")]
    MaskBits,
    #[error("chunk bounds must satisfy 0 < min ({min}) <= max ({max})")]
    Bounds { min: u32, max: u32 },
    #[error("expected `window,maskbits,min,max`, got {0:?}")]
    Syntax(String),
}

/// Chunking parameters. Travels in every package header so both ends cut
/// identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkBoundarySpec {
    pub window_bytes: u32,
    pub boundary_mask_bits: u32,
    pub min_chunk_bytes: u32,
    pub max_chunk_bytes: u32,
}

impl Default for ChunkBoundarySpec {
    fn default() -> Self {
        ChunkBoundarySpec {
            window_bytes: 48,
            boundary_mask_bits: 11,
            min_chunk_bytes: 256,
            max_chunk_bytes: 16 * 1024,
        }
    }
}

impl ChunkBoundarySpec {
    pub fn new(window: u32, mask_bits: u32, min: u32, max: u32) -> Result<Self, ChunkSpecError> {
        let spec = ChunkBoundarySpec {
            window_bytes: window,
            boundary_mask_bits: mask_bits,
            min_chunk_bytes: min,
            max_chunk_bytes: max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ChunkSpecError> {
        if self.window_bytes == 0 {
            return Err(ChunkSpecError::Window);
        }
        if self.boundary_mask_bits == 0 || self.boundary_mask_bits > 63 {
            return Err(ChunkSpecError::MaskBits);
        }
        if self.min_chunk_bytes == 0 || self.min_chunk_bytes > self.max_chunk_bytes {
            return Err(ChunkSpecError::Bounds {
                min: self.min_chunk_bytes,
                max: self.max_chunk_bytes,
            });
        }
        Ok(())
    }

    /// Parses `window,maskbits,min,max`.
    pub fn parse(s: &str) -> Result<Self, ChunkSpecError> {
        let fields: Vec<u32> = s
            .split(',')
            .map(|f| f.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ChunkSpecError::Syntax(s.to_owned()))?;
        match fields[..] {
            [w, b, lo, hi] => Self::new(w, b, lo, hi),
            _ => Err(ChunkSpecError::Syntax(s.to_owned())),
        }
    }

    fn mask(&self) -> u64 {
        (1u64 << self.boundary_mask_bits) - 1
    }
}

impl std::fmt::Display for ChunkBoundarySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.window_bytes, self.boundary_mask_bits, self.min_chunk_bytes, self.max_chunk_bytes
        )
    }
}

/// Multiplier of the rolling polynomial.
const POLY_BASE: u64 = 0x0000_0100_0000_01B3;

/// Per-byte substitution table: splitmix64 outputs seeded at zero. Part of
/// the wire contract, since boundaries must agree across implementations.
const BYTE_TABLE: [u64; 256] = {
    let mut table = [0u64; 256];
    let mut state: u64 = 0;
    let mut i = 0;
    while i < 256 {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        table[i] = z ^ (z >> 31);
        i += 1;
    }
    table
};

/// Rabin-Karp style hash over the last `window` bytes, modulo 2^64:
/// `sum(T[b_i] * BASE^(window-1-i))`.
pub struct RollingHash {
    window: usize,
    out_factor: u64,
    hash: u64,
}

impl RollingHash {
    pub fn new(window: usize) -> Self {
        let mut out_factor = 1u64;
        for _ in 0..window {
            out_factor = out_factor.wrapping_mul(POLY_BASE);
        }
        RollingHash {
            window,
            out_factor,
            hash: 0,
        }
    }

    /// Slides the window one byte; `leaving` is the byte that falls out, if
    /// the window was already full.
    #[inline]
    pub fn roll(&mut self, entering: u8, leaving: Option<u8>) {
        self.hash = self
            .hash
            .wrapping_mul(POLY_BASE)
            .wrapping_add(BYTE_TABLE[entering as usize]);
        if let Some(b) = leaving {
            self.hash = self
                .hash
                .wrapping_sub(BYTE_TABLE[b as usize].wrapping_mul(self.out_factor));
        }
    }

    pub fn value(&self) -> u64 {
        self.hash
    }

    /// Hash of `bytes` from scratch, using only the trailing window.
    pub fn of(bytes: &[u8], window: usize) -> u64 {
        let start = bytes.len().saturating_sub(window);
        bytes[start..].iter().fold(0u64, |h, &b| {
            h.wrapping_mul(POLY_BASE)
                .wrapping_add(BYTE_TABLE[b as usize])
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

/// One content-defined chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk<'a> {
    pub offset: usize,
    pub bytes: &'a [u8],
    pub hash: Digest,
}

impl Chunk<'_> {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Cut positions (exclusive chunk ends) for `content`.
///
/// The rolling hash runs over the whole stream and is never reset at a cut,
/// so whether a position qualifies depends only on the `window` bytes before
/// it. A cut is taken at the first qualifying end at least `min` bytes into
/// the chunk, or forcibly at `max`.
pub fn cut_points(content: &[u8], spec: &ChunkBoundarySpec) -> Vec<usize> {
    let window = spec.window_bytes as usize;
    let min = spec.min_chunk_bytes as usize;
    let max = spec.max_chunk_bytes as usize;
    let mask = spec.mask();

    let mut cuts = Vec::new();
    let mut rh = RollingHash::new(window);
    let mut start = 0usize;
    for (i, &b) in content.iter().enumerate() {
        let leaving = (i >= window).then(|| content[i - window]);
        rh.roll(b, leaving);
        let end = i + 1;
        let len = end - start;
        if len >= max || (len >= min && rh.value() & mask == 0) {
            cuts.push(end);
            start = end;
        }
    }
    if start < content.len() {
        cuts.push(content.len());
    }
    cuts
}

/// Splits `content` into content-defined chunks, each with its SHA-256.
pub fn chunkify<'a>(content: &'a [u8], spec: &ChunkBoundarySpec) -> Vec<Chunk<'a>> {
    let mut start = 0;
    cut_points(content, spec)
        .into_iter()
        .map(|end| {
            let bytes = &content[start..end];
            let chunk = Chunk {
                offset: start,
                bytes,
                hash: hash_content(bytes),
            };
            start = end;
            chunk
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(seed: u64, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    #[test]
    fn rolling_matches_recomputation() {
        let data = blob(1, 500);
        let mut rh = RollingHash::new(48);
        for i in 0..data.len() {
            rh.roll(data[i], (i >= 48).then(|| data[i - 48]));
            assert_eq!(rh.value(), RollingHash::of(&data[..=i], 48), "at {i}");
        }
    }

    #[test]
    fn empty_and_short_inputs() {
        let spec = ChunkBoundarySpec::default();
        assert!(chunkify(b"", &spec).is_empty());
        let short = blob(2, 200);
        let chunks = chunkify(&short, &spec);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].bytes, &short[..]);
    }

    #[test]
    fn chunks_cover_content_within_bounds() {
        let spec = ChunkBoundarySpec::default();
        let data = blob(3, 300_000);
        let chunks = chunkify(&data, &spec);
        let joined: Vec<u8> = chunks
            .iter()
            .flat_map(|c| c.bytes.iter().copied())
            .collect();
        assert_eq!(joined, data);
        for c in &chunks[..chunks.len() - 1] {
            assert!(c.len() >= 256 && c.len() <= 16 * 1024, "len {}", c.len());
        }
        // Expected average is about 2 KiB plus the minimum.
        let avg = data.len() / chunks.len();
        assert!((1200..4000).contains(&avg), "avg {avg}");
    }

    #[test]
    fn zero_runs_hit_max_or_regular_cuts() {
        let spec = ChunkBoundarySpec::default();
        let data = vec![0u8; 100_000];
        let chunks = chunkify(&data, &spec);
        assert!(chunks.iter().all(|c| c.len() <= 16 * 1024));
        assert_eq!(chunks.iter().map(|c| c.len()).sum::<usize>(), data.len());
    }

    #[test]
    fn appending_a_byte_keeps_all_but_last_chunk() {
        let spec = ChunkBoundarySpec::default();
        let data = blob(4, 1 << 20);
        let mut ext = data.clone();
        ext.push(0x5A);
        let a: Vec<_> = chunkify(&data, &spec).into_iter().map(|c| c.hash).collect();
        let b: Vec<_> = chunkify(&ext, &spec).into_iter().map(|c| c.hash).collect();
        assert!(a.len() > 2);
        assert_eq!(a[..a.len() - 1], b[..a.len() - 1]);
    }

    #[test]
    fn spec_parsing_and_validation() {
        assert_eq!(
            ChunkBoundarySpec::parse("48,11,256,16384").unwrap(),
            ChunkBoundarySpec::default()
        );
        assert_eq!(ChunkBoundarySpec::default().to_string(), "48,11,256,16384");
        assert!(matches!(
            ChunkBoundarySpec::parse("1,2,3"),
            Err(ChunkSpecError::Syntax(_))
        ));
        assert_eq!(
            ChunkBoundarySpec::parse("0,11,1,2"),
            Err(ChunkSpecError::Window)
        );
        assert_eq!(
            ChunkBoundarySpec::parse("4,0,1,2"),
            Err(ChunkSpecError::MaskBits)
        );
        assert!(matches!(
            ChunkBoundarySpec::parse("4,8,9,2"),
            Err(ChunkSpecError::Bounds { .. })
        ));
    }
}
