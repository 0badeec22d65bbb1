//! BLEU and token accuracy, translation through any encoder/decoder pair,
//! and the full direction matrix.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{Direction, LanguageId};
use crate::registry::Registry;
use crate::transformer::greedy_translate;

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("scoring needs at least one sentence pair".into()));
    }
    Ok(())
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Corpus-level clipped n-gram counts for n = 1..=4.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(hyps: &[String], refs: &[String]) -> Result<Self> {
        check_lengths(hyps, refs)?;
        let mut s = BleuStats::default();
        for (h, r) in hyps.iter().zip(refs) {
            let (h, r) = (words(h), words(r));
            s.hyp_len += h.len();
            s.ref_len += r.len();
            for n in 1..=4 {
                if h.len() < n {
                    continue;
                }
                let mut ref_counts: HashMap<&[&str], usize> = HashMap::new();
                for g in r.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
                let mut hyp_counts: HashMap<&[&str], usize> = HashMap::new();
                for g in h.windows(n) {
                    *hyp_counts.entry(g).or_default() += 1;
                }
                s.totals[n - 1] += h.len() + 1 - n;
                s.matches[n - 1] += hyp_counts
                    .iter()
                    .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
                    .sum::<usize>();
            }
        }
        Ok(s)
    }

    /// Modified precision of order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn score(&self, smoothing: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let (m, t) = if smoothing && n > 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / 4.0).exp()).clamp(0.0, 100.0)
    }
}

/// Corpus BLEU-4 on whitespace tokens, in [0, 100]. With `smoothing`,
/// orders two to four add one to matches and totals.
pub fn bleu(hyps: &[String], refs: &[String], smoothing: bool) -> Result<f64> {
    Ok(BleuStats::collect(hyps, refs)?.score(smoothing))
}

/// Position-wise word matches up to the shorter length, over the total
/// reference length.
pub fn token_accuracy(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (words(h), words(r));
        total += r.len();
        hit += h.iter().zip(&r).filter(|(a, b)| a == b).count();
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub text: String,
    pub truncated: bool,
}

/// Translates with the encoder of `src` and the decoder of `tgt`. The same
/// path serves trained and never-trained pairs.
pub fn translate(
    r: &Registry,
    src: &LanguageId,
    tgt: &LanguageId,
    texts: &[String],
    max_len: usize,
) -> Result<Vec<Translation>> {
    let (se, te) = (r.entry(src)?, r.entry(tgt)?);
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| se.tokenizer.encode(t)).collect();
    greedy_translate(&se.modules, &te.modules, &ids, max_len)?
        .into_iter()
        .map(|h| {
            Ok(Translation {
                text: te.tokenizer.decode(&h.ids)?,
                truncated: h.truncated,
            })
        })
        .collect()
}

/// Scores of one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub src: LanguageId,
    pub tgt: LanguageId,
    pub bleu: f64,
    pub accuracy: f64,
    pub zero_shot: bool,
    pub n_sentences: usize,
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    /// How hypotheses and references were split into tokens for scoring.
    pub tokenization: String,
    pub smoothing: bool,
    pub rows: Vec<DirectionReport>,
    pub skipped: Vec<Direction>,
}

/// Parallel test sentences per direction.
pub type TestSets = BTreeMap<Direction, Vec<(String, String)>>;

/// Builds test sets for every ordered pair of the given multi-parallel
/// sentence lists (line `k` of every language is a translation of line `k`).
pub fn multi_parallel_tests(corpora: &[(LanguageId, Vec<String>)]) -> Result<TestSets> {
    let mut out = TestSets::new();
    for (a, sa) in corpora {
        for (b, sb) in corpora {
            if a == b {
                continue;
            }
            if sa.len() != sb.len() {
                return Err(Error::Data(format!(
                    "test sets of `{a}` ({}) and `{b}` ({}) are not parallel",
                    sa.len(),
                    sb.len()
                )));
            }
            let pairs = sa.iter().cloned().zip(sb.iter().cloned()).collect();
            out.insert(Direction::new(a.clone(), b.clone()), pairs);
        }
    }
    Ok(out)
}

/// Output budget for a source sentence.
pub fn default_max_len(src_tokens: usize, max_positions: usize) -> usize {
    (2 * src_tokens + 10).min(max_positions)
}

pub fn evaluate_direction(
    r: &Registry,
    d: &Direction,
    pairs: &[(String, String)],
    max_len: usize,
) -> Result<DirectionReport> {
    let (srcs, refs): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    let out = translate(r, &d.src, &d.tgt, &srcs, max_len)?;
    let hyps: Vec<String> = out.iter().map(|t| t.text.clone()).collect();
    Ok(DirectionReport {
        src: d.src.clone(),
        tgt: d.tgt.clone(),
        bleu: bleu(&hyps, &refs, false)?,
        accuracy: token_accuracy(&hyps, &refs)?,
        zero_shot: !r.history().contains(d),
        n_sentences: pairs.len(),
        truncated: out.iter().filter(|t| t.truncated).count(),
    })
}

/// One row per ordered pair of distinct registered languages that has test
/// data; the rest are listed as skipped. The zero-shot flag comes from the
/// registry's training history.
pub fn evaluate_matrix(r: &Registry, tests: &TestSets, max_len: usize) -> Result<MatrixReport> {
    let langs: Vec<LanguageId> = r.languages().cloned().collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for a in &langs {
        for b in &langs {
            if a == b {
                continue;
            }
            let d = Direction::new(a.clone(), b.clone());
            match tests.get(&d) {
                Some(pairs) if !pairs.is_empty() => rows.push(evaluate_direction(r, &d, pairs, max_len)?),
                _ => skipped.push(d),
            }
        }
    }
    Ok(MatrixReport {
        tokenization: "whitespace-split detokenized text".into(),
        smoothing: false,
        rows,
        skipped,
    })
}

impl MatrixReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table; zero-shot rows are marked with `*`.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>7} {:>9} {:>6} {:>10}\n",
            "direction", "bleu", "accuracy", "n", "zero-shot"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>7.2} {:>9.4} {:>6} {:>10}",
                format!("{}-{}", r.src, r.tgt),
                r.bleu,
                r.accuracy,
                r.n_sentences,
                if r.zero_shot { "*" } else { "" }
            );
        }
        if !self.skipped.is_empty() {
            let names: Vec<String> = self.skipped.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "skipped (no test data): {}", names.join(" "));
        }
        s
    }
}
