//! Synthetic corpus generation, feature-file ingestion, and simplified
//! SpecAugment.
//!
//! The toy task: every vocabulary token owns a fixed unit-norm template
//! vector in feature space; an utterance emits each of its tokens for 4-8
//! consecutive frames of that template plus Gaussian noise. Small enough to
//! train in minutes, hard enough (with noise) that restricted-context
//! decoding makes real errors.
//!
//! Corpus file format: one JSON object per line with fields `id` (string),
//! `tokens` (int array) and `frames` (array of F-length float arrays).
//! The same format ingests externally computed feature frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sub_len;
use crate::tensor::Tensor;

/// Vocabulary layout. Token IDs live in `[0, size)`; the CTC blank is the
/// reserved ID `size` (so the CTC head emits `size + 1` classes) and the
/// decoder's shared sos/eos symbol is `size + 1` (decoder space has
/// `size + 2` classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
}

impl VocabSpec {
    pub fn new(size: usize) -> Self {
        VocabSpec { size }
    }

    pub fn blank_id(&self) -> usize {
        self.size
    }

    pub fn sos_eos_id(&self) -> usize {
        self.size + 1
    }

    /// Number of CTC output classes (tokens + blank).
    pub fn ctc_classes(&self) -> usize {
        self.size + 1
    }

    /// Number of decoder output classes (tokens + blank slot + sos/eos).
    pub fn decoder_classes(&self) -> usize {
        self.size + 2
    }
}

/// One training/decoding unit: `T x F` feature frames plus a transcript of
/// token IDs (never blank, never sos/eos).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Tensor<f32>,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Number of adjacent equal-token pairs; each one costs an extra CTC
    /// frame for the separating blank.
    pub fn adjacent_repeats(&self) -> usize {
        self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Structural invariants: minimum length for the two-stage subsampling
    /// and CTC feasibility of the transcript at the post-subsampling length.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_frames();
        let t_sub = sub_len(t)?;
        if self.tokens.is_empty() {
            return Err(Error::invalid(format!("utterance {}: empty transcript", self.id)));
        }
        let needed = self.tokens.len() + self.adjacent_repeats();
        if needed > t_sub {
            return Err(Error::CtcInfeasible { needed, got: t_sub });
        }
        Ok(())
    }

    /// Checks token IDs against a vocabulary (reserved IDs never appear).
    pub fn validate_vocab(&self, vocab: &VocabSpec) -> Result<()> {
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.size) {
            return Err(Error::invalid(format!(
                "utterance {}: token {bad} outside vocabulary of {}",
                self.id, vocab.size
            )));
        }
        Ok(())
    }
}

/// Simplified SpecAugment: zero out whole time rows and frequency columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub num_time_masks: usize,
    pub max_time_mask_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_mask_width: usize,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            num_time_masks: 0,
            max_time_mask_width: 0,
            num_freq_masks: 0,
            max_freq_mask_width: 0,
        }
    }
}

/// Token templates: one fixed unit-norm vector per vocabulary entry, drawn
/// once per seed.
pub fn token_templates(rng: &mut ChaCha12Rng, vocab: &VocabSpec, feat_dim: usize) -> Vec<Vec<f32>> {
    (0..vocab.size)
        .map(|_| {
            let mut v: Vec<f32> = (0..feat_dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect()
}

/// Emit the frame matrix for a transcript with explicit per-token durations.
pub fn emit_frames(
    templates: &[Vec<f32>],
    tokens: &[usize],
    durations: &[usize],
    noise_sigma: f32,
    rng: &mut ChaCha12Rng,
) -> Tensor<f32> {
    let feat_dim = templates[0].len();
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * feat_dim);
    for (&tok, &dur) in tokens.iter().zip(durations) {
        for _ in 0..dur {
            for &x in &templates[tok] {
                let n: f32 = StandardNormal.sample(rng);
                data.push(x + noise_sigma * n);
            }
        }
    }
    Tensor::new(vec![total, feat_dim], data).expect("emit shape")
}

/// Generate a deterministic toy corpus: `n_utts` utterances of 3-10 tokens,
/// each token emitting 4-8 frames of its template plus noise of sd
/// `noise_sigma`. Utterances violating CTC feasibility at the subsampled
/// length are redrawn, so every produced utterance passes
/// [`Utterance::validate`].
pub fn gen_corpus(
    seed: u64,
    n_utts: usize,
    vocab: &VocabSpec,
    feat_dim: usize,
    noise_sigma: f32,
) -> Result<Vec<Utterance>> {
    if n_utts < 1 {
        return Err(Error::invalid("n_utts must be >= 1"));
    }
    if feat_dim < 2 {
        return Err(Error::invalid("feature dim must be >= 2"));
    }
    if vocab.size < 1 {
        return Err(Error::invalid("vocabulary must be non-empty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let templates = token_templates(&mut rng, vocab, feat_dim);

    let mut utts = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let (tokens, durations) = loop {
            let n_tokens = rng.random_range(3..=10usize);
            let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(0..vocab.size)).collect();
            let durations: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(4..=8usize)).collect();
            let total: usize = durations.iter().sum();
            let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
            if let Ok(t_sub) = sub_len(total) {
                if tokens.len() + repeats <= t_sub {
                    break (tokens, durations);
                }
            }
        };
        let frames = emit_frames(&templates, &tokens, &durations, noise_sigma, &mut rng);
        utts.push(Utterance {
            id: format!("utt-{i:05}"),
            frames,
            tokens,
        });
    }
    Ok(utts)
}

/// Generate train and test corpora from one stream so both share the same
/// token templates (the same "language").
pub fn gen_split(
    seed: u64,
    n_train: usize,
    n_test: usize,
    vocab: &VocabSpec,
    feat_dim: usize,
    noise_sigma: f32,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut all = gen_corpus(seed, n_train + n_test, vocab, feat_dim, noise_sigma)?;
    let test = all.split_off(n_train);
    Ok((all, test))
}

/// Apply SpecAugment-style zero masks. Time masks zero whole rows, frequency
/// masks zero whole columns; widths are sampled uniformly in `[0, max]` and
/// placements keep every mask fully inside the matrix. Tokens are untouched.
pub fn spec_augment<R: Rng>(u: &Utterance, policy: &AugmentPolicy, rng: &mut R) -> Result<Utterance> {
    let (t, f) = (u.num_frames(), u.feat_dim());
    if policy.num_time_masks > 0 && policy.max_time_mask_width >= t {
        return Err(Error::invalid(format!(
            "time mask width {} must be < T={t}",
            policy.max_time_mask_width
        )));
    }
    if policy.num_freq_masks > 0 && policy.max_freq_mask_width >= f {
        return Err(Error::invalid(format!(
            "freq mask width {} must be < F={f}",
            policy.max_freq_mask_width
        )));
    }
    let mut out = u.clone();
    let data = out.frames.data_mut();
    for _ in 0..policy.num_time_masks {
        let w = rng.random_range(0..=policy.max_time_mask_width);
        if w == 0 {
            continue;
        }
        let t0 = rng.random_range(0..=t - w);
        for row in t0..t0 + w {
            for col in 0..f {
                data[row * f + col] = 0.0;
            }
        }
    }
    for _ in 0..policy.num_freq_masks {
        let w = rng.random_range(0..=policy.max_freq_mask_width);
        if w == 0 {
            continue;
        }
        let f0 = rng.random_range(0..=f - w);
        for row in 0..t {
            for col in f0..f0 + w {
                data[row * f + col] = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct UttRecord {
    id: String,
    tokens: Vec<usize>,
    frames: Vec<Vec<f32>>,
}

/// Write a corpus as JSONL. Floats round-trip exactly (shortest
/// representation that parses back to the same bits).
pub fn save_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in corpus {
        let f = u.feat_dim();
        let rec = UttRecord {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            frames: (0..u.num_frames()).map(|i| u.frames.data()[i * f..(i + 1) * f].to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL corpus. Structural errors carry the offending line number;
/// the feature dimension must agree across the whole file. Every utterance
/// is validated against the structural invariants.
pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    let mut feat_dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UttRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.frames.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "utterance has no frames".into(),
            });
        }
        let f = rec.frames[0].len();
        if rec.frames.iter().any(|row| row.len() != f) {
            return Err(Error::Parse {
                line: lineno,
                msg: "ragged frame rows".into(),
            });
        }
        match feat_dim {
            None => feat_dim = Some(f),
            Some(expect) if expect != f => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("feature dim {f} differs from {expect} earlier in the file"),
                })
            }
            _ => {}
        }
        let t = rec.frames.len();
        let u = Utterance {
            id: rec.id,
            frames: Tensor::new(vec![t, f], rec.frames.into_iter().flatten().collect())
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?,
            tokens: rec.tokens,
        };
        u.validate().map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        corpus.push(u);
    }
    Ok(corpus)
}
