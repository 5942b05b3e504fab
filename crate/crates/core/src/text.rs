//! Word-level tokenization, toy text embeddings, and region-annotated prompts.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::RegionKey;
use crate::error::{Error, Result};

/// One token per word. Positions are 1-indexed in spans; `words[0]` is word 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u64>,
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Words covered by an inclusive 1-indexed span.
    pub fn slice(&self, span: WordSpan) -> &[String] {
        &self.words[span.begin - 1..span.end]
    }
}

/// Row `i` is the embedding of word `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingMatrix(pub Array2<f32>);

impl TextEmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    /// Mean of all rows.
    pub fn mean_row(&self) -> Vec<f32> {
        let n = self.rows().max(1) as f32;
        (0..self.dim())
            .map(|c| self.0.column(c).iter().sum::<f32>() / n)
            .collect()
    }
}

/// Inclusive 1-indexed word range `[begin, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordSpan {
    pub begin: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn new(begin: usize, end: usize) -> Self {
        Self { begin, end }
    }

    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.begin)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, word: usize) -> bool {
        self.begin <= word && word <= self.end
    }
}

impl fmt::Display for WordSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.begin, self.end)
    }
}

/// Character regions an adapter can be bound to.
///
/// `Face`, `Upper` and `Lower` come from prompt annotations. `Body` (upper
/// and lower together) and `Whole` (the entire reference, unmasked) only
/// appear in derived region plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegionLabel {
    Face,
    Upper,
    Lower,
    Body,
    Whole,
}

impl RegionLabel {
    pub const ANNOTATED: [RegionLabel; 3] = [RegionLabel::Face, RegionLabel::Upper, RegionLabel::Lower];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::Face => "face",
            RegionLabel::Upper => "upper",
            RegionLabel::Lower => "lower",
            RegionLabel::Body => "body",
            RegionLabel::Whole => "whole",
        }
    }

    /// Stable small integer used to derive per-region weight seeds.
    pub fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "face" => Ok(RegionLabel::Face),
            "upper" => Ok(RegionLabel::Upper),
            "lower" => Ok(RegionLabel::Lower),
            "body" => Ok(RegionLabel::Body),
            "whole" => Ok(RegionLabel::Whole),
            other => Err(Error::InvalidParameter(format!("unknown region label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPrompt {
    pub label: RegionLabel,
    pub sub_prompt: String,
    pub span: WordSpan,
}

/// A prompt with the region sub-prompts of one character located in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub full_text: String,
    pub tokens: TokenSequence,
    pub regions: Vec<RegionPrompt>,
    /// 1-based character index.
    pub character: usize,
}

impl PromptSpec {
    pub fn region(&self, label: RegionLabel) -> Option<&RegionPrompt> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn with_character(mut self, character: usize) -> Self {
        self.character = character;
        self
    }

    /// One query per annotated region, in annotation order.
    pub fn queries(&self) -> Vec<RegionQuery> {
        self.regions
            .iter()
            .map(|r| RegionQuery {
                key: RegionKey::new(self.character, r.label),
                spans: vec![r.span],
            })
            .collect()
    }
}

/// A region to localize: its key and the word spans whose maps it combines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionQuery {
    pub key: RegionKey,
    pub spans: Vec<WordSpan>,
}

/// Lowercases, strips non-alphanumeric characters and splits on whitespace.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let words: Vec<String> = text
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let tokens = words.iter().map(|w| token_id(w)).collect();
    Ok(TokenSequence { tokens, words })
}

/// 64-bit FNV-1a of the word bytes.
fn token_id(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination.
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic unit-norm embedding per token.
pub fn encode_tokens(tokens: &TokenSequence, dim: usize, seed: u64) -> TextEmbeddingMatrix {
    let mut out = Array2::<f32>::zeros((tokens.len(), dim));
    for (i, &tok) in tokens.tokens.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tok, seed));
        let row: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (c, v) in row.into_iter().enumerate() {
            out[[i, c]] = v / norm;
        }
    }
    TextEmbeddingMatrix(out)
}

/// Locates each annotated sub-prompt in `full_text` by first contiguous match.
pub fn parse_region_prompts(full_text: &str, annotations: &[(RegionLabel, String)]) -> Result<PromptSpec> {
    let tokens = tokenize(full_text)?;
    let mut regions: Vec<RegionPrompt> = Vec::with_capacity(annotations.len());
    for (label, sub_prompt) in annotations {
        if regions.iter().any(|r| r.label == *label) {
            return Err(Error::DuplicateRegion {
                character: 1,
                label: label.to_string(),
            });
        }
        let needle = tokenize(sub_prompt).map_err(|_| Error::SubPromptNotFound(sub_prompt.clone()))?;
        let span = find_first(&tokens.words, &needle.words).ok_or_else(|| Error::SubPromptNotFound(sub_prompt.clone()))?;
        if let Some(other) = regions.iter().find(|r| r.span.begin <= span.end && span.begin <= r.span.end) {
            return Err(Error::OverlappingSpans {
                character: 1,
                first: other.label.to_string(),
                second: label.to_string(),
                word: span.begin.max(other.span.begin),
            });
        }
        regions.push(RegionPrompt {
            label: *label,
            sub_prompt: sub_prompt.clone(),
            span,
        });
    }
    Ok(PromptSpec {
        full_text: full_text.to_string(),
        tokens,
        regions,
        character: 1,
    })
}

fn find_first(haystack: &[String], needle: &[String]) -> Option<WordSpan> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|i| WordSpan::new(i + 1, i + needle.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: &str = "a boy standing in a library, wearing green jacket and blue pants";

    #[test]
    fn tokenize_counts_words() {
        assert_eq!(tokenize("a boy").unwrap().words, vec!["a", "boy"]);
        let t = tokenize(EXAMPLE).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(t.words[5], "library");
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(matches!(tokenize(""), Err(Error::EmptyPrompt)));
        assert!(matches!(tokenize("  ,, ! "), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let t = tokenize("boy boy girl").unwrap();
        let e = encode_tokens(&t, 16, 3);
        assert_eq!(e.0.row(0), e.0.row(1));
        for row in e.0.rows() {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(e, encode_tokens(&t, 16, 3));
    }

    #[test]
    fn seeds_change_embeddings() {
        let t = tokenize("a boy").unwrap();
        let a = encode_tokens(&t, 8, 1);
        let b = encode_tokens(&t, 8, 2);
        assert!(a.0.iter().zip(b.0.iter()).any(|(x, y)| x != y));
    }

    /// Exhaustive scan over every (start, length) pair.
    fn brute_force_span(words: &[String], sub: &[String]) -> Option<(usize, usize)> {
        for start in 0..words.len() {
            for end in start..words.len() {
                if words[start..=end] == *sub {
                    return Some((start + 1, end + 1));
                }
            }
        }
        None
    }

    #[test]
    fn region_spans_follow_example() {
        let spec = parse_region_prompts(
            EXAMPLE,
            &[
                (RegionLabel::Face, "a boy".into()),
                (RegionLabel::Upper, "green jacket".into()),
                (RegionLabel::Lower, "blue pants".into()),
            ],
        )
        .unwrap();
        assert_eq!(spec.region(RegionLabel::Face).unwrap().span, WordSpan::new(1, 2));
        let upper = spec.region(RegionLabel::Upper).unwrap().span;
        assert_eq!(upper, WordSpan::new(8, 9));
        let sub = tokenize("green jacket").unwrap().words;
        assert_eq!(brute_force_span(&spec.tokens.words, &sub), Some((8, 9)));
        assert_eq!(spec.region(RegionLabel::Lower).unwrap().span, WordSpan::new(11, 12));
    }

    #[test]
    fn missing_sub_prompt() {
        let err = parse_region_prompts(EXAMPLE, &[(RegionLabel::Upper, "red hat".into())]).unwrap_err();
        assert!(matches!(err, Error::SubPromptNotFound(_)));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let err = parse_region_prompts(
            EXAMPLE,
            &[
                (RegionLabel::Face, "a boy standing".into()),
                (RegionLabel::Upper, "standing in".into()),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::OverlappingSpans { word: 3, .. }));
    }

    #[test]
    fn first_match_wins_for_repeats() {
        let spec = parse_region_prompts("a cat and a cat", &[(RegionLabel::Face, "a cat".into())]).unwrap();
        assert_eq!(spec.regions[0].span, WordSpan::new(1, 2));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(words in prop::collection::vec("[a-zA-Z0-9,.!]{1,8}", 1..12)) {
            let text = words.join(" ");
            if let Ok(t) = tokenize(&text) {
                let again = tokenize(&t.words.join(" ")).unwrap();
                prop_assert_eq!(again, t);
            }
        }

        #[test]
        fn spans_round_trip(words in prop::collection::vec("[a-e]{1,2}", 2..14), start in 0usize..14, len in 1usize..4) {
            let start = start % words.len();
            let end = (start + len).min(words.len());
            let text = words.join(" ");
            let sub = words[start..end].join(" ");
            let spec = parse_region_prompts(&text, &[(RegionLabel::Face, sub.clone())]).unwrap();
            let span = spec.regions[0].span;
            prop_assert_eq!(spec.tokens.slice(span).to_vec(), tokenize(&sub).unwrap().words);
            // first-match: no earlier occurrence exists
            let expected = brute_force_span(&spec.tokens.words, &tokenize(&sub).unwrap().words).unwrap();
            prop_assert_eq!((span.begin, span.end), expected);
        }
    }
}
