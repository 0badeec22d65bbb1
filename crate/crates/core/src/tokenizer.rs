//! Per-language byte pair encoding.
//!
//! Text is split on whitespace and punctuation is detached into its own
//! pre-token. A pre-token followed by whitespace (or the end of the sentence)
//! carries the end-of-word marker on its last symbol; a pre-token glued to the
//! next one does not, which keeps `decode(encode(s)) == s` for single-spaced
//! text.
//!
//! Merges are learned greedily by pair frequency. Equal counts are broken by
//! the lexicographically smallest `(left, right)` pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const END_OF_WORD: &str = "</w>";
/// What an unknown token decodes to.
pub const UNK_TEXT: &str = "⟨unk⟩";

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];
const FORMAT_TAG: &str = "bpe-v1";

/// Learned merge table and vocabulary for one language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    language: String,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    extra_specials: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits text into pre-tokens as initial symbol sequences.
fn pre_tokenize(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut pieces: Vec<Vec<char>> = Vec::new();
        let mut current: Vec<char> = Vec::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !current.is_empty() {
                    pieces.push(std::mem::take(&mut current));
                }
                pieces.push(vec![c]);
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            pieces.push(current);
        }
        let last = pieces.len() - 1;
        for (i, piece) in pieces.into_iter().enumerate() {
            let mut syms: Vec<String> = piece.iter().map(|c| c.to_string()).collect();
            if i == last {
                syms.last_mut().unwrap().push_str(END_OF_WORD);
            }
            out.push(syms);
        }
    }
    out
}

fn apply_merge(word: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

fn is_base_symbol(tok: &str) -> bool {
    let body = tok.strip_suffix(END_OF_WORD).unwrap_or(tok);
    body.chars().count() == 1
}

/// Segmentation of one distinct pre-token before and after learning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnedSegment {
    pub initial: Vec<String>,
    pub learned: Vec<String>,
    pub count: usize,
}

/// Learns a model for `language` from `corpus`. See [`learn_bpe_traced`].
pub fn learn_bpe(language: &str, corpus: &[String], target_vocab: usize) -> Result<BpeModel> {
    learn_bpe_traced(language, corpus, target_vocab, &[]).map(|(m, _)| m)
}

/// Learns merges until the vocabulary reaches `target_vocab` or no adjacent
/// pair occurs at least twice. `extra_specials` (e.g. target-language tags)
/// receive the ids directly after the four reserved ones. Also returns the
/// learning-time segmentation of every distinct pre-token.
pub fn learn_bpe_traced(
    language: &str,
    corpus: &[String],
    target_vocab: usize,
    extra_specials: &[String],
) -> Result<(BpeModel, Vec<LearnedSegment>)> {
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for sentence in corpus {
        for word in pre_tokenize(sentence) {
            *counts.entry(word).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config(format!(
            "cannot learn BPE for `{language}` from an empty corpus"
        )));
    }
    let chars: BTreeSet<char> = counts
        .keys()
        .flatten()
        .flat_map(|s| s.strip_suffix(END_OF_WORD).unwrap_or(s).chars())
        .collect();

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for s in extra_specials {
        if tokens.contains(s) || is_base_symbol(s) {
            return Err(Error::Config(format!("invalid extra special token `{s}`")));
        }
        tokens.push(s.clone());
    }
    for c in &chars {
        tokens.push(c.to_string());
        tokens.push(format!("{c}{END_OF_WORD}"));
    }
    if target_vocab <= tokens.len() {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab} must exceed the {} reserved and character symbols of `{language}`",
            tokens.len()
        )));
    }
    let mut ids: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<String>, Vec<String>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.clone(), w, c))
        .collect();
    let mut merges = Vec::new();
    while tokens.len() < target_vocab {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (_, w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), freq)) = best else { break };
        if freq < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        for (_, w, _) in &mut words {
            if w.len() > 1 {
                *w = apply_merge(w, &l, &r);
            }
        }
        let merged = format!("{l}{r}");
        if !ids.contains_key(&merged) {
            ids.insert(merged.clone(), tokens.len() as u32);
            tokens.push(merged);
        }
        merges.push((l, r));
    }

    let model = BpeModel::assemble(language.to_string(), merges, tokens, extra_specials.len());
    let trace = words
        .into_iter()
        .map(|(initial, learned, count)| LearnedSegment {
            initial,
            learned,
            count,
        })
        .collect();
    Ok((model, trace))
}

impl BpeModel {
    fn assemble(
        language: String,
        merges: Vec<(String, String)>,
        tokens: Vec<String>,
        extra_specials: usize,
    ) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        BpeModel {
            language,
            merges,
            ranks,
            tokens,
            ids,
            extra_specials,
        }
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Extra special tokens, in id order.
    pub fn extra_specials(&self) -> &[String] {
        &self.tokens[4..4 + self.extra_specials]
    }

    fn is_special(&self, id: u32) -> bool {
        (id as usize) < 4 + self.extra_specials
    }

    /// Applies the merge table in priority order to one pre-token.
    pub fn segment_symbols(&self, initial: &[String]) -> Vec<String> {
        let mut word = initial.to_vec();
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (l, r) = &self.merges[rank];
            word = apply_merge(&word, l, r);
        }
        word
    }

    /// Token ids of `text` wrapped in begin/end markers. Characters never seen
    /// during learning map to the unknown id.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        for word in pre_tokenize(text) {
            for sym in self.segment_symbols(&word) {
                out.push(self.ids.get(&sym).copied().unwrap_or(UNK));
            }
        }
        out.push(EOS);
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Index(format!(
                    "token id {id} outside vocabulary of {} for `{}`",
                    self.vocab_size(),
                    self.language
                ))
            })?;
            if id == UNK {
                out.push_str(UNK_TEXT);
            } else if self.is_special(id) {
                continue;
            } else if let Some(body) = tok.strip_suffix(END_OF_WORD) {
                out.push_str(body);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    /// Merge table: header `bpe-v1 <language> <vocab_size>`, then one
    /// `left right` line per merge.
    pub fn merges_text(&self) -> String {
        let mut s = format!("{FORMAT_TAG} {} {}\n", self.language, self.vocab_size());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    /// Vocabulary: one `token<TAB>id` line per entry in id order.
    pub fn vocab_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_texts(merges_text: &str, vocab_text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("malformed BPE files: {msg}"));
        let mut lines = merges_text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != FORMAT_TAG {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let language = parts[1].to_string();
        let declared: usize = parts[2]
            .parse()
            .map_err(|_| bad(format!("bad vocabulary size `{}`", parts[2])))?;
        let merges = lines
            .map(|l| {
                l.split_once(' ')
                    .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains(' '))
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| bad(format!("bad merge line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tokens = Vec::new();
        for (i, line) in vocab_text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(format!("bad vocabulary line `{line}`")))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(format!("vocabulary ids must be contiguous, line {}", i + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() != declared {
            return Err(bad(format!(
                "header declares {declared} tokens, vocabulary lists {}",
                tokens.len()
            )));
        }
        if tokens.len() < 4 || tokens[..4] != SPECIAL_TOKENS {
            return Err(bad("reserved ids 0-3 missing".into()));
        }
        let extra = tokens[4..].iter().take_while(|t| !is_base_symbol(t)).count();
        Ok(Self::assemble(language, merges, tokens, extra))
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        std::fs::write(merges_path, self.merges_text())
            .map_err(|e| Error::io(format!("writing {}", merges_path.display()), e))?;
        std::fs::write(vocab_path, self.vocab_text())
            .map_err(|e| Error::io(format!("writing {}", vocab_path.display()), e))
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
        };
        Self::from_texts(&read(merges_path)?, &read(vocab_path)?)
    }
}
