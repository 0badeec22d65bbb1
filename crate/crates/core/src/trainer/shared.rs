use super::{train_joint, OptimizerState, StopCriterion, TrainingData, TrainingReport, TrainingSchedule};
use crate::corpus::EncodedPair;
use crate::error::{Error, Result};
use crate::lang::{Direction, LanguageId};
use crate::registry::Registry;
use crate::tokenizer::{learn_bpe_traced, BpeModel, BOS};
use crate::transformer::{greedy_translate, TransformerConfig};

/// A direction with its training and validation sentence pairs.
pub type DirectionPairs = (Direction, Vec<(String, String)>, Vec<(String, String)>);

/// Name under which the single shared encoder/decoder pair is registered.
pub const SHARED_LANGUAGE: &str = "shared";

/// One universal encoder and decoder over a joint vocabulary. The desired
/// output language is announced by a tag token right after the begin id.
#[derive(Clone, Debug)]
pub struct SharedBaseline {
    registry: Registry,
    languages: Vec<LanguageId>,
}

fn tag_token(lang: &LanguageId) -> String {
    format!("<2{lang}>")
}

impl SharedBaseline {
    /// Learns the joint vocabulary over all `corpora` and builds the model.
    pub fn new(
        corpora: &[(LanguageId, Vec<String>)],
        target_vocab: usize,
        config: TransformerConfig,
        seed: u64,
    ) -> Result<Self> {
        let languages: Vec<LanguageId> = corpora.iter().map(|(l, _)| l.clone()).collect();
        let joint: Vec<String> = corpora.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        let tags: Vec<String> = languages.iter().map(tag_token).collect();
        let (bpe, _) = learn_bpe_traced(SHARED_LANGUAGE, &joint, target_vocab, &tags)?;
        let mut registry = Registry::new(seed);
        registry.register_language(LanguageId::new(SHARED_LANGUAGE)?, config, bpe)?;
        Ok(SharedBaseline {
            registry,
            languages,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn tokenizer(&self) -> &BpeModel {
        &self.registry.entry_at(0).tokenizer
    }

    fn shared_id() -> LanguageId {
        LanguageId::new(SHARED_LANGUAGE).expect("valid tag")
    }

    pub fn direction() -> Direction {
        Direction::new(Self::shared_id(), Self::shared_id())
    }

    pub fn tag(&self, tgt: &LanguageId) -> Result<u32> {
        if !self.languages.contains(tgt) {
            return Err(Error::UnknownLanguage(tgt.to_string()));
        }
        Ok(self
            .tokenizer()
            .id(&tag_token(tgt))
            .expect("tags are part of the joint vocabulary"))
    }

    /// Source ids with the target tag inserted after the begin id.
    pub fn encode_source(&self, tgt: &LanguageId, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.tokenizer().encode(text);
        debug_assert_eq!(ids[0], BOS);
        ids.insert(1, self.tag(tgt)?);
        Ok(ids)
    }

    /// Training data for the mixed stream. `directions` lists each
    /// direction's training and validation sentence pairs.
    pub fn data(
        &self,
        directions: &[DirectionPairs],
        token_budget: usize,
        seed: u64,
    ) -> Result<TrainingData> {
        let encode = |d: &Direction, pairs: &[(String, String)]| -> Result<Vec<EncodedPair>> {
            pairs
                .iter()
                .map(|(s, t)| {
                    Ok(EncodedPair {
                        src: self.encode_source(&d.tgt, s)?,
                        tgt: self.tokenizer().encode(t),
                    })
                })
                .collect()
        };
        let (mut train, mut valid) = (Vec::new(), Vec::new());
        for (d, t, v) in directions {
            train.extend(encode(d, t)?);
            valid.extend(encode(d, v)?);
        }
        let mut data = TrainingData::new(token_budget, seed);
        data.add_direction(Self::direction(), train, valid)?;
        Ok(data)
    }

    pub fn train(
        &mut self,
        data: &mut TrainingData,
        opt: &mut OptimizerState,
        stop: &StopCriterion,
        max_steps: u64,
    ) -> Result<TrainingReport> {
        let sched = TrainingSchedule::new([Self::direction()])?;
        train_joint(&mut self.registry, &sched, data, opt, stop, max_steps)
    }

    pub fn translate(&self, tgt: &LanguageId, sources: &[String], max_len: usize) -> Result<Vec<String>> {
        let m = &self.registry.entry_at(0).modules;
        let ids = sources
            .iter()
            .map(|s| self.encode_source(tgt, s))
            .collect::<Result<Vec<_>>>()?;
        greedy_translate(m, m, &ids, max_len)?
            .iter()
            .map(|h| self.tokenizer().decode(&h.ids))
            .collect()
    }

    /// Encoder and decoder counts; always one each.
    pub fn module_counts(&self) -> (usize, usize) {
        (self.registry.len(), self.registry.len())
    }
}
