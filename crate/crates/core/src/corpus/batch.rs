use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lang::Direction;
use crate::tokenizer::PAD;

/// One sentence pair as token ids, including begin/end markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

/// Padded, row-aligned source and target ids for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelBatch {
    pub direction: Direction,
    /// Index of each row's pair in the list the batch was built from.
    pub rows: Vec<usize>,
    pub src: Vec<u32>,
    pub src_len: usize,
    pub tgt: Vec<u32>,
    pub tgt_len: usize,
}

fn pad_rows(seqs: &[&[u32]]) -> (Vec<u32>, usize) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = vec![PAD; seqs.len() * width];
    for (r, s) in seqs.iter().enumerate() {
        out[r * width..r * width + s.len()].copy_from_slice(s);
    }
    (out, width)
}

impl ParallelBatch {
    pub fn from_pairs(direction: Direction, pairs: &[EncodedPair], rows: Vec<usize>) -> Self {
        let src: Vec<&[u32]> = rows.iter().map(|&i| pairs[i].src.as_slice()).collect();
        let tgt: Vec<&[u32]> = rows.iter().map(|&i| pairs[i].tgt.as_slice()).collect();
        let (src, src_len) = pad_rows(&src);
        let (tgt, tgt_len) = pad_rows(&tgt);
        ParallelBatch {
            direction,
            rows,
            src,
            src_len,
            tgt,
            tgt_len,
        }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// `true` at real source tokens, `false` at padding.
    pub fn src_mask(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t != PAD).collect()
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.src.iter().chain(&self.tgt).filter(|&&t| t != PAD).count()
    }
}

/// Seed for one epoch of one data stream, so streams shuffle independently.
pub fn epoch_seed(seed: u64, stream: u64, epoch: u64) -> u64 {
    crate::seed::derive(seed, &[stream, epoch])
}

/// Packs pairs into batches of similar length under `token_budget` non-pad
/// tokens (source plus target). The pair order is shuffled before the stable
/// length sort, and the batch order is shuffled after packing.
pub fn make_batches(
    direction: &Direction,
    pairs: &[EncodedPair],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<ParallelBatch>> {
    if let Some((i, p)) = pairs.iter().enumerate().find(|(_, p)| p.tokens() > token_budget) {
        return Err(Error::Data(format!(
            "{direction}: pair on line {} has {} tokens, over the batch budget of {token_budget}",
            i + 1,
            p.tokens()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].src.len().max(pairs[i].tgt.len()), pairs[i].tokens()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = pairs[i].tokens();
        if used + n > token_budget && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|rows| ParallelBatch::from_pairs(direction.clone(), pairs, rows))
        .collect())
}

/// Endless batch supply for one direction: epochs cycle with a fresh
/// epoch-indexed shuffle each time the current one is exhausted.
#[derive(Clone, Debug)]
pub struct BatchStream {
    direction: Direction,
    pairs: Vec<EncodedPair>,
    budget: usize,
    seed: u64,
    stream: u64,
    epoch: u64,
    batches: Vec<ParallelBatch>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(
        direction: Direction,
        pairs: Vec<EncodedPair>,
        budget: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data(format!("{direction}: no training pairs")));
        }
        let batches = make_batches(&direction, &pairs, budget, epoch_seed(seed, stream, 0))?;
        Ok(BatchStream {
            direction,
            pairs,
            budget,
            seed,
            stream,
            epoch: 0,
            batches,
            cursor: 0,
        })
    }

    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn pairs(&self) -> &[EncodedPair] {
        &self.pairs
    }

    pub fn next_batch(&mut self) -> Result<&ParallelBatch> {
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.batches = make_batches(
                &self.direction,
                &self.pairs,
                self.budget,
                epoch_seed(self.seed, self.stream, self.epoch),
            )?;
            self.cursor = 0;
        }
        self.cursor += 1;
        Ok(&self.batches[self.cursor - 1])
    }
}
