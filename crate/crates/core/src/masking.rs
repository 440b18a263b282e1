//! Attention masks that switch the shared encoder between streaming and
//! full-context modes, plus the dynamic chunk sampler used during training.
//!
//! Chunking is defined on post-subsampling frames: frame `i` may attend every
//! frame in its own chunk and all earlier chunks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the streaming branch picks its chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChunkPolicy {
    /// Unrestricted self-attention.
    Full,
    /// A fixed chunk size.
    Fixed(usize),
    /// Per-batch draw: full context with probability `p_full`, otherwise a
    /// uniform chunk size in `[1, c_max]`.
    Dynamic { c_max: usize, p_full: f64 },
}

impl ChunkPolicy {
    /// The default training draw: uniform in [1, 25], never full context
    /// (the joint loop always runs a separate full-context branch).
    pub fn dynamic_default() -> Self {
        ChunkPolicy::Dynamic { c_max: 25, p_full: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ChunkPolicy::Full => Ok(()),
            ChunkPolicy::Fixed(c) if c >= 1 => Ok(()),
            ChunkPolicy::Fixed(c) => Err(Error::invalid(format!("chunk size {c} must be >= 1"))),
            ChunkPolicy::Dynamic { c_max, p_full } => {
                if c_max < 1 {
                    return Err(Error::invalid("c_max must be >= 1"));
                }
                if !(0.0..=1.0).contains(&p_full) {
                    return Err(Error::invalid("p_full must be in [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

/// Result of one per-batch chunk draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkSelection {
    Full,
    Chunk(usize),
}

impl std::fmt::Display for ChunkSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChunkSelection::Full => write!(f, "full"),
            ChunkSelection::Chunk(c) => write!(f, "{c}"),
        }
    }
}

/// Draw the effective context for one batch.
pub fn sample_chunk<R: Rng>(policy: &ChunkPolicy, rng: &mut R) -> Result<ChunkSelection> {
    policy.validate()?;
    Ok(match *policy {
        ChunkPolicy::Full => ChunkSelection::Full,
        ChunkPolicy::Fixed(c) => ChunkSelection::Chunk(c),
        ChunkPolicy::Dynamic { c_max, p_full } => {
            if rng.random_range(0.0..1.0) < p_full {
                ChunkSelection::Full
            } else {
                ChunkSelection::Chunk(rng.random_range(1..=c_max))
            }
        }
    })
}

/// Boolean `t x t` matrix; entry `(i, j)` true means query frame `i` may
/// attend key frame `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn full(t: usize) -> Self {
        AttentionMask { t, bits: vec![true; t * t] }
    }

    pub fn size(&self) -> usize {
        self.t
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.t + j]
    }

    /// Flat row-major boolean buffer, as consumed by masked softmax.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// AND a per-key validity vector (true = real frame) into every row.
    pub fn and_key_padding(&self, valid: &[bool]) -> Result<AttentionMask> {
        if valid.len() != self.t {
            return Err(Error::shape("and_key_padding", format!("{} keys vs {}", valid.len(), self.t)));
        }
        let mut bits = self.bits.clone();
        for i in 0..self.t {
            for j in 0..self.t {
                bits[i * self.t + j] &= valid[j];
            }
        }
        Ok(AttentionMask { t: self.t, bits })
    }

    /// Entrywise subset test.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.t == other.t && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Chunk-restricted mask: `(i, j)` true iff `floor(j/c) <= floor(i/c)`.
/// `c >= t` degenerates to the all-true mask.
pub fn chunk_mask(t: usize, c: usize) -> AttentionMask {
    assert!(t >= 1 && c >= 1, "chunk_mask requires t >= 1 and c >= 1");
    let mut bits = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            bits[i * t + j] = j / c <= i / c;
        }
    }
    AttentionMask { t, bits }
}

/// Mask for a [`ChunkSelection`].
pub fn selection_mask(t: usize, sel: ChunkSelection) -> AttentionMask {
    match sel {
        ChunkSelection::Full => AttentionMask::full(t),
        ChunkSelection::Chunk(c) => chunk_mask(t, c),
    }
}

/// Per-utterance key validity vectors for a padded batch: true for real
/// frames, false for pad frames.
pub fn padding_mask(lengths: &[usize], t_max: usize) -> Result<Vec<Vec<bool>>> {
    lengths
        .iter()
        .map(|&len| {
            if len > t_max {
                return Err(Error::invalid(format!("length {len} exceeds padded size {t_max}")));
            }
            Ok((0..t_max).map(|j| j < len).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn chunk_mask_blocks_of_two() {
        let m = chunk_mask(4, 2);
        for i in 0..2 {
            assert!(m.allowed(i, 0) && m.allowed(i, 1));
            assert!(!m.allowed(i, 2) && !m.allowed(i, 3));
        }
        for i in 2..4 {
            for j in 0..4 {
                assert!(m.allowed(i, j));
            }
        }
    }

    #[test]
    fn chunk_of_one_is_causal() {
        let m = chunk_mask(5, 1);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn huge_chunk_equals_full() {
        assert_eq!(chunk_mask(3, 16), AttentionMask::full(3));
        assert_eq!(chunk_mask(7, 7), AttentionMask::full(7));
    }

    #[test]
    fn chunk_masks_are_monotone_in_c() {
        for t in 1..10 {
            for c1 in 1..8 {
                for c2 in c1..8 {
                    assert!(
                        chunk_mask(t, c1).is_subset_of(&chunk_mask(t, c2)),
                        "t={t} c1={c1} c2={c2}"
                    );
                }
            }
        }
    }

    #[test]
    fn diagonal_always_true() {
        for t in 1..12 {
            for c in 1..6 {
                let m = chunk_mask(t, c);
                for i in 0..t {
                    assert!(m.allowed(i, i));
                }
            }
        }
    }

    #[test]
    fn fixed_and_degenerate_dynamic_draws() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(
                sample_chunk(&ChunkPolicy::Fixed(8), &mut rng).unwrap(),
                ChunkSelection::Chunk(8)
            );
            assert_eq!(
                sample_chunk(&ChunkPolicy::Dynamic { c_max: 25, p_full: 1.0 }, &mut rng).unwrap(),
                ChunkSelection::Full
            );
        }
    }

    #[test]
    fn dynamic_draw_statistics() {
        // 10000 draws: P(full) close to 0.5, conditional chunk histogram
        // uniform on [1, 25] by chi-squared at p > 0.01 (24 dof -> 42.98).
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let policy = ChunkPolicy::Dynamic { c_max: 25, p_full: 0.5 };
        let n = 10_000;
        let mut fulls = 0usize;
        let mut hist = vec![0usize; 25];
        for _ in 0..n {
            match sample_chunk(&policy, &mut rng).unwrap() {
                ChunkSelection::Full => fulls += 1,
                ChunkSelection::Chunk(c) => hist[c - 1] += 1,
            }
        }
        let p_full = fulls as f64 / n as f64;
        assert!((0.47..=0.53).contains(&p_full), "empirical P(full) = {p_full}");

        let chunk_draws: usize = hist.iter().sum();
        let expected = chunk_draws as f64 / 25.0;
        let chi2: f64 = hist
            .iter()
            .map(|&h| {
                let d = h as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 42.98, "chi-squared {chi2} exceeds the p=0.01 critical value");
    }

    #[test]
    fn padding_masks() {
        assert_eq!(padding_mask(&[3], 3).unwrap()[0], vec![true, true, true]);
        assert_eq!(padding_mask(&[2], 4).unwrap()[0], vec![true, true, false, false]);
        assert!(padding_mask(&[5], 4).is_err());
    }

    #[test]
    fn padding_and_chunk_combination() {
        let m = chunk_mask(4, 2);
        let valid = padding_mask(&[2], 4).unwrap().remove(0);
        let combined = m.and_key_padding(&valid).unwrap();
        for i in 0..4 {
            assert!(!combined.allowed(i, 2) && !combined.allowed(i, 3));
        }
        assert!(combined.allowed(0, 0) && combined.allowed(3, 1));
    }
}
