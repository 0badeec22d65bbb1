use std::collections::HashMap;

use super::model::{AttentionIds, FeedForwardIds, LanguageModules, NormIds, OutputProjection};
use super::LAYER_NORM_EPS;
use crate::corpus::ParallelBatch;
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, ParamId, Tape, Var};
use crate::tokenizer::{BOS, EOS, PAD, UNK};

/// A forward pass under construction. Parameters are bound lazily, once per
/// `(slot, parameter)`, so a table used by both the encoder and decoder of one
/// language appears once and collects both gradient contributions.
///
/// `slot` is any caller-chosen number that identifies a language within the
/// pass; passing the same modules under two slots would bind them twice.
pub struct Graph {
    pub tape: Tape<f32>,
    bound: HashMap<(usize, ParamId), Var>,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Graph {
    /// Records gradients and applies dropout masks derived from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            bound: HashMap::new(),
            training: true,
            dropout_seed: seed,
            dropout_calls: 0,
        }
    }

    /// Deterministic evaluation: no gradients, no dropout.
    pub fn inference() -> Self {
        Graph {
            tape: Tape::no_grad(),
            bound: HashMap::new(),
            training: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn param(&mut self, slot: usize, m: &LanguageModules, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(slot, id)) {
            return v;
        }
        let v = self.tape.leaf(m.params().get(id).tensor());
        self.bound.insert((slot, id), v);
        v
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        self.dropout_calls += 1;
        let seed = crate::seed::derive(self.dropout_seed, &[self.dropout_calls]);
        self.tape.dropout(x, rate, seed, true)
    }

    /// Adds the gradients of every parameter bound under `slot` into `m`.
    /// Call after [`Tape::backward`].
    pub fn accumulate_grads(&self, slot: usize, m: &mut LanguageModules) -> Result<()> {
        let mut bound: Vec<_> = self
            .bound
            .iter()
            .filter(|((s, _), _)| *s == slot)
            .map(|((_, id), v)| (*id, *v))
            .collect();
        bound.sort_by_key(|(id, _)| *id);
        for (id, v) in bound {
            if let Some(g) = self.tape.grad(v) {
                m.params_mut().get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn sinusoidal(batch: usize, len: usize, d: usize) -> Vec<f32> {
    let mut row = vec![0f32; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[pos * d + 2 * i] = angle.sin() as f32;
            row[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    row.repeat(batch)
}

fn check_ids(m: &LanguageModules, ids: &[u32], len: usize) -> Result<()> {
    let c = m.config();
    if len > c.max_positions {
        return Err(Error::Dimension(format!(
            "sequence length {len} exceeds max_positions {}",
            c.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {} for `{}`",
            c.vocab_size,
            m.language()
        )));
    }
    Ok(())
}

struct Ctx<'a> {
    slot: usize,
    m: &'a LanguageModules,
}

impl Ctx<'_> {
    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.slot, self.m, id)
    }

    fn embed(&self, g: &mut Graph, table: ParamId, ids: &[u32], batch: usize, len: usize) -> Result<Var> {
        check_ids(self.m, ids, len)?;
        let d = self.m.config().model_dim;
        let t = self.p(g, table);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.tape.embedding(t, &ids, &[batch, len])?;
        let x = g.tape.scale(x, (d as f32).sqrt())?;
        let pos = g.tape.input(&[batch, len, d], sinusoidal(batch, len, d), false)?;
        let x = g.tape.add(x, pos)?;
        g.dropout(x, self.m.config().dropout)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.p(g, w), self.p(g, b));
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }

    fn attention(
        &self,
        g: &mut Graph,
        a: &AttentionIds,
        query: Var,
        memory: Var,
        spec: &AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(g, query, a.wq, a.bq)?;
        let k = self.linear(g, memory, a.wk, a.bk)?;
        let v = self.linear(g, memory, a.wv, a.bv)?;
        let h = g.tape.attention(q, k, v, spec)?;
        self.linear(g, h, a.wo, a.bo)
    }

    fn feed_forward(&self, g: &mut Graph, f: &FeedForwardIds, x: Var) -> Result<Var> {
        let h = self.linear(g, x, f.w1, f.b1)?;
        let h = g.tape.relu(h)?;
        self.linear(g, h, f.w2, f.b2)
    }

    /// `norm(x + dropout(y))`.
    fn residual(&self, g: &mut Graph, n: &NormIds, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y, self.m.config().dropout)?;
        let s = g.tape.add(x, y)?;
        let (gain, bias) = (self.p(g, n.gain), self.p(g, n.bias));
        g.tape.layer_norm(s, gain, bias, LAYER_NORM_EPS)
    }
}

/// Encodes a padded `[batch × len]` id matrix into a `[batch × len × d]`
/// context. Padding never influences the non-pad rows.
pub fn encode(
    g: &mut Graph,
    slot: usize,
    m: &LanguageModules,
    ids: &[u32],
    batch: usize,
    len: usize,
) -> Result<Var> {
    if ids.len() != batch * len {
        return Err(Error::Dimension(format!(
            "{} ids for a {batch}×{len} batch",
            ids.len()
        )));
    }
    let cx = Ctx { slot, m };
    let enc = m.encoder();
    let mut x = cx.embed(g, enc.embed, ids, batch, len)?;
    let spec = AttentionSpec {
        heads: m.config().heads,
        causal: false,
        key_mask: Some(ids.iter().map(|&t| t != PAD).collect()),
    };
    for layer in &enc.layers {
        let a = cx.attention(g, &layer.self_attn, x, x, &spec)?;
        x = cx.residual(g, &layer.norm1, x, a)?;
        let f = cx.feed_forward(g, &layer.ffn, x)?;
        x = cx.residual(g, &layer.norm2, x, f)?;
    }
    Ok(x)
}

/// Decoder hidden states `[batch × len × d]` for a padded prefix matrix.
#[allow(clippy::too_many_arguments)]
fn decoder_states(
    g: &mut Graph,
    slot: usize,
    m: &LanguageModules,
    context: Var,
    src_mask: &[bool],
    prefix: &[u32],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let d = m.config().model_dim;
    let cs = g.tape.shape(context).to_vec();
    if cs.len() != 3 || cs[0] != batch || cs[2] != d || src_mask.len() != cs[0] * cs[1] {
        return Err(Error::Dimension(format!(
            "context {cs:?} with {} mask entries does not fit a decoder of width {d} over {batch} rows",
            src_mask.len()
        )));
    }
    if prefix.len() != batch * len {
        return Err(Error::Dimension(format!(
            "{} ids for a {batch}×{len} prefix",
            prefix.len()
        )));
    }
    let cx = Ctx { slot, m };
    let dec = m.decoder();
    let mut x = cx.embed(g, dec.embed, prefix, batch, len)?;
    let self_spec = AttentionSpec {
        heads: m.config().heads,
        causal: true,
        key_mask: None,
    };
    let cross_spec = AttentionSpec {
        heads: m.config().heads,
        causal: false,
        key_mask: Some(src_mask.to_vec()),
    };
    for layer in &dec.layers {
        let a = cx.attention(g, &layer.self_attn, x, x, &self_spec)?;
        x = cx.residual(g, &layer.norm1, x, a)?;
        let c = cx.attention(g, &layer.cross_attn, x, context, &cross_spec)?;
        x = cx.residual(g, &layer.norm2, x, c)?;
        let f = cx.feed_forward(g, &layer.ffn, x)?;
        x = cx.residual(g, &layer.norm3, x, f)?;
    }
    Ok(x)
}

fn project(g: &mut Graph, slot: usize, m: &LanguageModules, h: Var) -> Result<Var> {
    match m.decoder().output {
        OutputProjection::Tied(table) => {
            let t = g.param(slot, m, table);
            g.tape.matmul_nt(h, t)
        }
        OutputProjection::Own(w) => {
            let w = g.param(slot, m, w);
            g.tape.matmul(h, w)
        }
    }
}

/// Teacher-forced logits `[batch × (T−1) × V]` for a parallel batch, and the
/// shifted targets they are scored against.
pub fn teacher_forced_logits(
    g: &mut Graph,
    (enc_slot, enc): (usize, &LanguageModules),
    (dec_slot, dec): (usize, &LanguageModules),
    batch: &ParallelBatch,
) -> Result<(Var, Vec<usize>)> {
    if !enc.config().interchangeable_with(dec.config()) {
        return Err(Error::Config(format!(
            "encoder of `{}` and decoder of `{}` have incompatible shapes",
            enc.language(),
            dec.language()
        )));
    }
    let b = batch.size();
    if batch.tgt_len < 2 {
        return Err(Error::Data("target rows need at least two tokens".into()));
    }
    let context = encode(g, enc_slot, enc, &batch.src, b, batch.src_len)?;
    let t = batch.tgt_len - 1;
    let mut input = Vec::with_capacity(b * t);
    let mut targets = Vec::with_capacity(b * t);
    for row in batch.tgt.chunks(batch.tgt_len) {
        input.extend_from_slice(&row[..t]);
        targets.extend(row[1..].iter().map(|&x| x as usize));
    }
    let h = decoder_states(g, dec_slot, dec, context, &batch.src_mask(), &input, b, t)?;
    Ok((project(g, dec_slot, dec, h)?, targets))
}

/// Mean cross-entropy of the shifted target under teacher forcing.
pub fn teacher_forced_loss(
    g: &mut Graph,
    enc: (usize, &LanguageModules),
    dec: (usize, &LanguageModules),
    batch: &ParallelBatch,
) -> Result<Var> {
    let (logits, targets) = teacher_forced_logits(g, enc, dec, batch)?;
    let v = dec.1.config().vocab_size;
    let flat = g.tape.reshape(logits, &[targets.len(), v])?;
    g.tape.cross_entropy(flat, &targets, PAD as usize)
}

/// Logits for the token after `prefix`, which must start with the begin id.
pub fn next_token_logits(
    enc: &LanguageModules,
    dec: &LanguageModules,
    src_ids: &[u32],
    prefix: &[u32],
) -> Result<Vec<f32>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Contract("decoder prefix must start with the begin id".into()));
    }
    let mut g = Graph::inference();
    let context = encode(&mut g, 0, enc, src_ids, 1, src_ids.len())?;
    let mask: Vec<bool> = src_ids.iter().map(|&t| t != PAD).collect();
    let h = decoder_states(&mut g, 1, dec, context, &mask, prefix, 1, prefix.len())?;
    let logits = project(&mut g, 1, dec, h)?;
    let v = dec.config().vocab_size;
    Ok(g.tape.value(logits)[(prefix.len() - 1) * v..].to_vec())
}

/// Greedy output for one source sentence, without begin/end markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Generation hit `max_len` before producing the end id.
    pub truncated: bool,
}

const DECODE_CHUNK: usize = 64;

/// Greedy decoding of many sources. Sentences are grouped by length for
/// speed; every output depends only on its own source.
pub fn greedy_translate(
    enc: &LanguageModules,
    dec: &LanguageModules,
    sources: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    if max_len > dec.config().max_positions {
        return Err(Error::Config(format!(
            "max_len {max_len} exceeds the decoder's max_positions {}",
            dec.config().max_positions
        )));
    }
    if !enc.config().interchangeable_with(dec.config()) {
        return Err(Error::Config(format!(
            "encoder of `{}` and decoder of `{}` have incompatible shapes",
            enc.language(),
            dec.language()
        )));
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| sources[i].len());
    let mut out = vec![None; sources.len()];
    for chunk in order.chunks(DECODE_CHUNK) {
        let group: Vec<&[u32]> = chunk.iter().map(|&i| sources[i].as_slice()).collect();
        for (&i, h) in chunk.iter().zip(greedy_chunk(enc, dec, &group, max_len)?) {
            out[i] = Some(h);
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

fn greedy_chunk(
    enc: &LanguageModules,
    dec: &LanguageModules,
    sources: &[&[u32]],
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let b = sources.len();
    let s = sources.iter().map(|x| x.len()).max().unwrap_or(0).max(1);
    let mut src = vec![PAD; b * s];
    for (r, x) in sources.iter().enumerate() {
        src[r * s..r * s + x.len()].copy_from_slice(x);
    }
    let mask: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
    if let Some(r) = (0..b).find(|&r| !mask[r * s..(r + 1) * s].iter().any(|&m| m)) {
        return Err(Error::Data(format!("source {r} of a decoding batch is empty")));
    }
    let context = {
        let mut g = Graph::inference();
        let c = encode(&mut g, 0, enc, &src, b, s)?;
        g.tape.value(c).to_vec()
    };
    let d = dec.config().model_dim;
    let v = dec.config().vocab_size;
    let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    for step in 0..max_len {
        let len = step + 1;
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let mut g = Graph::inference();
        let ctx = g.tape.input(&[b, s, d], context.clone(), false)?;
        let h = decoder_states(&mut g, 0, dec, ctx, &mask, &flat, b, len)?;
        let last: Vec<f32> = g
            .tape
            .value(h)
            .chunks(len * d)
            .flat_map(|row| row[step * d..].iter().copied())
            .collect();
        let last = g.tape.input(&[b, d], last, false)?;
        let logits = project(&mut g, 0, dec, last)?;
        for (r, row) in g.tape.value(logits).chunks(v).enumerate() {
            if done[r] {
                prefixes[r].push(PAD);
                continue;
            }
            // Ties go to the lowest id; padding and the begin id are never emitted.
            let mut best = UNK as usize;
            for (id, &x) in row.iter().enumerate().skip(EOS as usize) {
                if x > row[best] {
                    best = id;
                }
            }
            if best == EOS as usize {
                done[r] = true;
                prefixes[r].push(PAD);
            } else {
                prefixes[r].push(best as u32);
            }
        }
        if done.iter().all(|&x| x) {
            break;
        }
    }
    Ok(prefixes
        .into_iter()
        .zip(done)
        .map(|(p, finished)| Hypothesis {
            ids: p.into_iter().skip(1).filter(|&t| t != PAD).collect(),
            truncated: !finished,
        })
        .collect())
}
