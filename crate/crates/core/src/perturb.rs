//! Prompt tokenization and perturbation sampling.
//!
//! A prompt is split into whitespace-delimited words. Each perturbation is a
//! binary inclusion mask over those words; the masked prompt keeps the
//! included words in their original order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest token count for which exhaustive enumeration is allowed.
pub const MAX_EXHAUSTIVE_TOKENS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PerturbError {
    #[error("prompt has no non-whitespace content")]
    EmptyPrompt,
    #[error("exhaustive enumeration needs m <= {MAX_EXHAUSTIVE_TOKENS}, got m = {0}")]
    ExhaustiveTooLarge(usize),
    #[error("mask has {mask} bits but the sequence has {tokens} tokens")]
    LengthMismatch { tokens: usize, mask: usize },
    #[error("mask excludes every token")]
    EmptyMask,
    #[error("token count and perturbation count must both be at least 1")]
    ZeroCount,
}

/// Word-level tokens of a prompt together with their byte spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    spans: Vec<(usize, usize)>,
    original: String,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Byte offsets `(start, end)` of every token in [`Self::original`].
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn original(&self) -> &str {
        &self.original
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Splits `prompt` on Unicode whitespace. Punctuation stays attached to
/// the word it touches.
pub fn tokenize(prompt: &str) -> Result<TokenSequence, PerturbError> {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (idx, ch) in prompt.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(prompt[s..idx].to_string());
                spans.push((s, idx));
                start = None;
            }
            (false, None) => start = Some(idx),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(prompt[s..].to_string());
        spans.push((s, prompt.len()));
    }
    if tokens.is_empty() {
        return Err(PerturbError::EmptyPrompt);
    }
    Ok(TokenSequence {
        tokens,
        spans,
        original: prompt.to_string(),
    })
}

/// How the perturbation set is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Independent fair coin per token, all-zero draws rejected.
    #[default]
    Bernoulli,
    /// Every non-empty mask, once.
    Exhaustive,
}

/// Inclusion pattern for one perturbation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub index: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn all_ones(m: usize) -> Self {
        Self {
            index: 0,
            bits: vec![1; m],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    pub fn includes(&self, i: usize) -> bool {
        self.bits[i] == 1
    }
}

/// Binary feature vector `z` consumed by the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Generates the perturbation masks for `m` tokens.
///
/// Record 0 is always the all-ones mask. Bernoulli sampling yields exactly
/// `count` masks (repeats allowed); exhaustive enumeration ignores `count`
/// and yields all `2^m - 1` non-empty masks, the rest in ascending binary
/// order with the first token as the most significant bit.
pub fn sample_masks(
    m: usize,
    count: usize,
    seed: u64,
    strategy: SamplingStrategy,
) -> Result<Vec<Mask>, PerturbError> {
    if m == 0 {
        return Err(PerturbError::ZeroCount);
    }
    match strategy {
        SamplingStrategy::Exhaustive => {
            if m > MAX_EXHAUSTIVE_TOKENS {
                return Err(PerturbError::ExhaustiveTooLarge(m));
            }
            let full = (1u32 << m) - 1;
            let mut masks = Vec::with_capacity(full as usize);
            masks.push(Mask::all_ones(m));
            for code in 1..full {
                let bits = (0..m)
                    .map(|i| ((code >> (m - 1 - i)) & 1) as u8)
                    .collect();
                masks.push(Mask {
                    index: masks.len(),
                    bits,
                });
            }
            Ok(masks)
        }
        SamplingStrategy::Bernoulli => {
            if count == 0 {
                return Err(PerturbError::ZeroCount);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut masks = Vec::with_capacity(count);
            masks.push(Mask::all_ones(m));
            while masks.len() < count {
                let bits: Vec<u8> = (0..m).map(|_| u8::from(rng.gen_bool(0.5))).collect();
                if bits.iter().all(|&b| b == 0) {
                    continue;
                }
                masks.push(Mask {
                    index: masks.len(),
                    bits,
                });
            }
            Ok(masks)
        }
    }
}

/// Joins the included tokens with single spaces.
pub fn apply_mask(tokens: &TokenSequence, mask: &Mask) -> Result<String, PerturbError> {
    Ok(masked_tokens(tokens, mask)?.join(" "))
}

/// Included tokens in original order.
pub fn masked_tokens<'a>(
    tokens: &'a TokenSequence,
    mask: &Mask,
) -> Result<Vec<&'a str>, PerturbError> {
    if tokens.len() != mask.len() {
        return Err(PerturbError::LengthMismatch {
            tokens: tokens.len(),
            mask: mask.len(),
        });
    }
    let kept: Vec<&str> = tokens
        .tokens
        .iter()
        .zip(&mask.bits)
        .filter(|(_, &b)| b == 1)
        .map(|(t, _)| t.as_str())
        .collect();
    if kept.is_empty() {
        return Err(PerturbError::EmptyMask);
    }
    Ok(kept)
}

pub fn mask_to_features(mask: &Mask) -> FeatureVector {
    FeatureVector(mask.bits.iter().map(|&b| f64::from(b)).collect())
}
