use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::LanguageId;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES: usize = 70;
/// Largest latent vocabulary the two-syllable lexicon can spell uniquely.
pub const MAX_LATENT_VOCAB: usize = SYLLABLES * SYLLABLES;
pub const MAX_SENTENCE_LEN: usize = 40;

fn syllable(i: usize) -> [char; 2] {
    [
        CONSONANTS[i / VOWELS.len()] as char,
        VOWELS[i % VOWELS.len()] as char,
    ]
}

/// Surface form of latent token `k`: two consonant-vowel syllables.
pub fn latent_word(k: usize) -> String {
    let a = syllable(k % SYLLABLES);
    let b = syllable((k / SYLLABLES + k % 7) % SYLLABLES);
    [a[0], a[1], b[0], b[1]].iter().collect()
}

/// How one synthetic language renders a latent sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    SubstitutionCipher { seed: u64 },
    TokenReversal,
    SuffixMarking { marker: String },
}

/// One language of a synthetic corpus. In config files this is a flat table:
/// `language`, `kind`, plus `seed` or `marker` where the kind needs one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecTable", into = "SpecTable")]
pub struct SyntheticLanguageSpec {
    pub language: LanguageId,
    pub transform: Transform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecTable {
    language: LanguageId,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marker: Option<String>,
}

impl TryFrom<SpecTable> for SyntheticLanguageSpec {
    type Error = Error;

    fn try_from(t: SpecTable) -> Result<Self> {
        let transform = match (t.kind.as_str(), t.seed, t.marker) {
            ("identity", None, None) => Transform::Identity,
            ("token-reversal", None, None) => Transform::TokenReversal,
            ("substitution-cipher", Some(seed), None) => Transform::SubstitutionCipher { seed },
            ("suffix-marking", None, Some(marker)) => Transform::SuffixMarking { marker },
            (kind, ..) => {
                return Err(Error::Config(format!(
                    "language `{}`: transform `{kind}` with the given fields is not valid; expected identity, token-reversal, substitution-cipher (seed) or suffix-marking (marker)",
                    t.language
                )))
            }
        };
        Ok(SyntheticLanguageSpec {
            language: t.language,
            transform,
        })
    }
}

impl From<SyntheticLanguageSpec> for SpecTable {
    fn from(s: SyntheticLanguageSpec) -> Self {
        let (kind, seed, marker) = match s.transform {
            Transform::Identity => ("identity", None, None),
            Transform::TokenReversal => ("token-reversal", None, None),
            Transform::SubstitutionCipher { seed } => ("substitution-cipher", Some(seed), None),
            Transform::SuffixMarking { marker } => ("suffix-marking", None, Some(marker)),
        };
        SpecTable {
            language: s.language,
            kind: kind.to_string(),
            seed,
            marker,
        }
    }
}

/// A transform bound to a latent vocabulary, ready to render and parse.
#[derive(Clone, Debug)]
pub struct Renderer {
    transform: Transform,
    permutation: Vec<usize>,
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Renderer {
    pub fn new(transform: &Transform, latent_vocab: usize) -> Result<Self> {
        check_latent_vocab(latent_vocab)?;
        let mut permutation: Vec<usize> = (0..latent_vocab).collect();
        match transform {
            Transform::SubstitutionCipher { seed } => {
                permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            }
            Transform::SuffixMarking { marker } => {
                if marker.is_empty() || !marker.chars().all(|c| c.is_ascii_lowercase()) {
                    return Err(Error::Config(format!(
                        "suffix marker `{marker}` must be non-empty lowercase ascii"
                    )));
                }
            }
            Transform::Identity | Transform::TokenReversal => {}
        }
        let words: Vec<String> = (0..latent_vocab).map(latent_word).collect();
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Renderer {
            transform: transform.clone(),
            permutation,
            words,
            lookup,
        })
    }

    pub fn render(&self, latent: &[usize]) -> String {
        let mut tokens: Vec<String> = latent
            .iter()
            .map(|&k| self.words[self.permutation[k]].clone())
            .collect();
        match &self.transform {
            Transform::TokenReversal => tokens.reverse(),
            Transform::SuffixMarking { marker } => {
                for t in &mut tokens {
                    t.push_str(marker);
                }
            }
            _ => {}
        }
        tokens.join(" ")
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut inverse = vec![0; self.permutation.len()];
        for (k, &p) in self.permutation.iter().enumerate() {
            inverse[p] = k;
        }
        let mut latent = sentence
            .split_whitespace()
            .map(|tok| {
                let word = match &self.transform {
                    Transform::SuffixMarking { marker } => tok.strip_suffix(marker.as_str()),
                    _ => Some(tok),
                };
                word.and_then(|w| self.lookup.get(w))
                    .map(|&i| inverse[i])
                    .ok_or_else(|| Error::Data(format!("`{tok}` is not a word of this language")))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.transform == Transform::TokenReversal {
            latent.reverse();
        }
        Ok(latent)
    }
}

fn check_latent_vocab(latent_vocab: usize) -> Result<()> {
    if !(10..=MAX_LATENT_VOCAB).contains(&latent_vocab) {
        return Err(Error::Config(format!(
            "latent vocabulary must be in [10, {MAX_LATENT_VOCAB}], got {latent_vocab}"
        )));
    }
    Ok(())
}

/// Mutually parallel sentences for every requested language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub latent: Vec<Vec<usize>>,
    pub languages: Vec<(LanguageId, Vec<String>)>,
}

impl SyntheticCorpus {
    pub fn sentences(&self, lang: &LanguageId) -> Option<&[String]> {
        self.languages
            .iter()
            .find(|(l, _)| l == lang)
            .map(|(_, s)| s.as_slice())
    }
}

pub fn generate_synthetic(
    specs: &[SyntheticLanguageSpec],
    n_sentences: usize,
    latent_vocab: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<SyntheticCorpus> {
    check_latent_vocab(latent_vocab)?;
    let (lo, hi) = len_range;
    if lo < 1 || hi > MAX_SENTENCE_LEN || lo > hi {
        return Err(Error::Config(format!(
            "sentence length range [{lo}, {hi}] must lie within [1, {MAX_SENTENCE_LEN}]"
        )));
    }
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(&s.language) {
            return Err(Error::Config(format!(
                "language `{}` specified twice",
                s.language
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<usize>> = (0..n_sentences)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| rng.random_range(0..latent_vocab)).collect()
        })
        .collect();
    let languages = specs
        .iter()
        .map(|s| {
            let r = Renderer::new(&s.transform, latent_vocab)?;
            Ok((s.language.clone(), latent.iter().map(|l| r.render(l)).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { latent, languages })
}

/// Which part of a corpus a sentence index belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Valid,
}

/// Index ranges of the fixed split: the last 5% of sentences are validation,
/// the 5% before them are test, everything earlier is training.
pub fn split_ranges(n: usize) -> [(Split, std::ops::Range<usize>); 3] {
    let held = n / 20;
    [
        (Split::Train, 0..n - 2 * held),
        (Split::Test, n - 2 * held..n - held),
        (Split::Valid, n - held..n),
    ]
}

pub fn split_range(n: usize, split: Split) -> std::ops::Range<usize> {
    split_ranges(n)
        .into_iter()
        .find(|(s, _)| *s == split)
        .map(|(_, r)| r)
        .unwrap()
}
