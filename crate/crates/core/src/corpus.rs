//! Byte-level tokenizer and the bundled synthetic text corpus.
//!
//! The corpus is generated from a small stochastic grammar with Zipf-like
//! word frequencies, so it has enough structure for a tiny model to learn
//! while staying fully reproducible from a seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlimError};
use crate::model::Token;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Inverse of [`encode`]; special tokens are dropped and invalid UTF-8 is
/// replaced.
pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl", "gr", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "m", "k"];

/// A lexicon of `n` distinct pseudo-words of one to three syllables.
fn lexicon<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("nonempty"));
            w.push_str(VOWELS.choose(rng).expect("nonempty"));
        }
        w.push_str(CODAS.choose(rng).expect("nonempty"));
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Sampler over `n` ranks with `P(i) ∝ (i+1)^(-s)`.
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|i| {
                acc += (i as f64).powf(-s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Zipf { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let x: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < x).min(self.cdf.len() - 1)
    }
}

struct Grammar {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    noun_freq: Zipf,
    verb_freq: Zipf,
    adj_freq: Zipf,
}

const DETERMINERS: &[&str] = &["the", "a", "my", "this", "every"];
const PREPOSITIONS: &[&str] = &["in", "near", "under", "with", "from", "behind"];
const CONNECTIVES: &[&str] = &["and", "but", "so", "because", "while"];

impl Grammar {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut words = lexicon(rng, 560);
        let adjectives = words.split_off(480);
        let verbs = words.split_off(320);
        Grammar {
            noun_freq: Zipf::new(words.len(), 1.1),
            verb_freq: Zipf::new(verbs.len(), 1.1),
            adj_freq: Zipf::new(adjectives.len(), 1.1),
            nouns: words,
            verbs,
            adjectives,
        }
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, out: &mut String) {
        out.push_str(DETERMINERS.choose(rng).expect("nonempty"));
        out.push(' ');
        if rng.gen_bool(0.4) {
            out.push_str(&self.adjectives[self.adj_freq.sample(rng)]);
            out.push(' ');
        }
        out.push_str(&self.nouns[self.noun_freq.sample(rng)]);
    }

    fn clause<R: Rng>(&self, rng: &mut R, out: &mut String) {
        self.noun_phrase(rng, out);
        out.push(' ');
        out.push_str(&self.verbs[self.verb_freq.sample(rng)]);
        out.push_str("s ");
        self.noun_phrase(rng, out);
        if rng.gen_bool(0.3) {
            out.push(' ');
            out.push_str(PREPOSITIONS.choose(rng).expect("nonempty"));
            out.push(' ');
            self.noun_phrase(rng, out);
        }
    }
}

/// Roughly `n_chars` of text, one sentence per line.
///
/// Sentences are clauses over a fixed pseudo-word lexicon whose word
/// frequencies follow a Zipf law, so a few words are common and most are rare.
pub fn synthetic_text(seed: u64, n_chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = Grammar::new(&mut rng);
    let mut out = String::with_capacity(n_chars + 256);
    while out.len() < n_chars {
        grammar.clause(&mut rng, &mut out);
        if rng.gen_bool(0.3) {
            out.push(' ');
            out.push_str(CONNECTIVES.choose(&mut rng).expect("nonempty"));
            out.push(' ');
            grammar.clause(&mut rng, &mut out);
        }
        out.push_str(".\n");
    }
    out
}

pub const DEFAULT_CORPUS_SEED: u64 = 20240601;
pub const DEFAULT_CORPUS_CHARS: usize = 160_000;

/// Disjoint train / calibration / evaluation token streams.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<Token>,
    pub calib: Vec<Token>,
    pub eval: Vec<Token>,
}

impl CorpusSplits {
    /// 70% train, 20% calibration, 10% evaluation, in stream order.
    pub fn from_tokens(tokens: &[Token]) -> Result<Self> {
        if tokens.len() < 100 {
            return Err(SlimError::input(format!(
                "corpus of {} tokens is too small to split",
                tokens.len()
            )));
        }
        let a = tokens.len() * 7 / 10;
        let b = tokens.len() * 9 / 10;
        Ok(CorpusSplits {
            train: tokens[..a].to_vec(),
            calib: tokens[a..b].to_vec(),
            eval: tokens[b..].to_vec(),
        })
    }

    pub fn bundled() -> Self {
        let tokens = encode(&synthetic_text(DEFAULT_CORPUS_SEED, DEFAULT_CORPUS_CHARS));
        CorpusSplits::from_tokens(&tokens).expect("bundled corpus is large enough")
    }

    /// The calibration stream cut into two disjoint halves.
    pub fn calib_halves(&self) -> (&[Token], &[Token]) {
        self.calib.split_at(self.calib.len() / 2)
    }
}

/// `count` windows of `len` tokens at seeded random offsets of `stream`,
/// each prefixed by [`BOS`] (so a window holds `len - 1` corpus tokens).
pub fn sample_sequences(stream: &[Token], count: usize, len: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
    if count == 0 || len < 2 {
        return Err(SlimError::config("need at least one sequence of length ≥ 2"));
    }
    if stream.len() < len - 1 {
        return Err(SlimError::input(format!(
            "stream of {} tokens is shorter than a window of {}",
            stream.len(),
            len - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let start = rng.gen_range(0..=stream.len() - (len - 1));
            let mut seq = Vec::with_capacity(len);
            seq.push(BOS);
            seq.extend_from_slice(&stream[start..start + len - 1]);
            seq
        })
        .collect())
}
