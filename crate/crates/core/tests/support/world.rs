//! Small synthetic setups shared by the integration tests.

use modmt::corpus::{generate_synthetic, split_range, Split, SyntheticCorpus, SyntheticLanguageSpec, Transform};
use modmt::registry::Registry;
use modmt::tokenizer::learn_bpe;
use modmt::trainer::TrainingData;
use modmt::transformer::TransformerConfig;
use modmt::{Direction, LanguageId};

pub fn lang(s: &str) -> LanguageId {
    LanguageId::new(s).unwrap()
}

pub fn dir(a: &str, b: &str) -> Direction {
    Direction::new(lang(a), lang(b))
}

pub struct World {
    pub corpus: SyntheticCorpus,
    pub n: usize,
}

impl World {
    pub fn new(langs: &[(&str, Transform)], n: usize, latent_vocab: usize, len: (usize, usize), seed: u64) -> Self {
        let specs: Vec<SyntheticLanguageSpec> = langs
            .iter()
            .map(|(l, t)| SyntheticLanguageSpec {
                language: lang(l),
                transform: t.clone(),
            })
            .collect();
        World {
            corpus: generate_synthetic(&specs, n, latent_vocab, len, seed).unwrap(),
            n,
        }
    }

    pub fn sentences(&self, l: &LanguageId, split: Split) -> Vec<String> {
        self.corpus.sentences(l).unwrap()[split_range(self.n, split)].to_vec()
    }

    pub fn pairs(&self, d: &Direction, split: Split) -> Vec<(String, String)> {
        self.sentences(&d.src, split)
            .into_iter()
            .zip(self.sentences(&d.tgt, split))
            .collect()
    }

    /// Learns the language's vocabulary from its training split and registers it.
    pub fn register(&self, r: &mut Registry, l: &str, cfg: &TransformerConfig, target_vocab: usize) {
        let l = lang(l);
        let bpe = learn_bpe(l.as_str(), &self.sentences(&l, Split::Train), target_vocab).unwrap();
        r.register_language(l, cfg.clone(), bpe).unwrap();
    }

    pub fn add_direction(&self, data: &mut TrainingData, r: &Registry, d: &Direction) {
        let train = TrainingData::encode_pairs(r, d, &self.pairs(d, Split::Train)).unwrap();
        let valid = TrainingData::encode_pairs(r, d, &self.pairs(d, Split::Valid)).unwrap();
        data.add_direction(d.clone(), train, valid).unwrap();
    }
}

/// Two-layer width-32 model for fast tests.
pub fn tiny_config(dropout: f64) -> TransformerConfig {
    let mut c = TransformerConfig::desk(0);
    c.model_dim = 32;
    c.ffn_dim = 64;
    c.heads = 4;
    c.layers = 1;
    c.dropout = dropout;
    c
}
