use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modmt::corpus::{CorpusManifest, SyntheticLanguageSpec};
use modmt::trainer::{AdamConfig, StopCriterion, TrainingSchedule};
use modmt::transformer::TransformerConfig;
use modmt::{Direction, Error, LanguageId, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Relative paths are resolved against the directory
/// of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub seeds: Seeds,
    pub corpus: CorpusSection,
    /// Languages of the initial joint training; all corpus languages if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_languages: Option<Vec<LanguageId>>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub batching: Batching,
    #[serde(default)]
    pub stop: StopSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add: Option<AddSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialisation.
    pub init: u64,
    /// Corpus generation, batching order and shuffling.
    pub data: u64,
}

/// Either synthetic specs (`languages` plus sizes) or line-aligned `files`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub languages: Vec<SyntheticLanguageSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<LanguageId, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    /// Only `"all-pairs"` is accepted.
    Named(String),
    Directions(Vec<Direction>),
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Named("all-pairs".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` or `base`; the remaining fields override it.
    pub preset: String,
    pub target_vocab: usize,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub model_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_positions: Option<usize>,
    pub tied_embeddings: Option<bool>,
    pub tie_output_projection: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            target_vocab: 512,
            layers: None,
            heads: None,
            model_dim: None,
            ffn_dim: None,
            dropout: None,
            max_positions: None,
            tied_embeddings: None,
            tie_output_projection: None,
        }
    }
}

impl ModelSection {
    pub fn transformer(&self) -> Result<TransformerConfig> {
        let mut c = match self.preset.as_str() {
            "desk" => TransformerConfig::desk(0),
            "base" => TransformerConfig::base(0),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        if let Some(v) = self.layers {
            c.layers = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.model_dim {
            c.model_dim = v;
        }
        if let Some(v) = self.ffn_dim {
            c.ffn_dim = v;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
        if let Some(v) = self.max_positions {
            c.max_positions = v;
        }
        if let Some(v) = self.tied_embeddings {
            c.tied_embeddings = v;
        }
        if let Some(v) = self.tie_output_projection {
            c.tie_output_projection = v;
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Batching {
    /// Upper bound on source plus target tokens per batch.
    pub token_budget: usize,
}

impl Default for Batching {
    fn default() -> Self {
        Batching { token_budget: 4000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSection {
    pub max_steps: u64,
    pub patience: u32,
    pub interval: u64,
    pub target_loss: Option<f64>,
}

impl Default for StopSection {
    fn default() -> Self {
        let s = StopCriterion::default();
        StopSection {
            max_steps: 10_000,
            patience: s.patience,
            interval: s.interval,
            target_loss: s.target_loss,
        }
    }
}

impl StopSection {
    pub fn criterion(&self) -> StopCriterion {
        StopCriterion {
            patience: self.patience,
            interval: self.interval,
            target_loss: self.target_loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Phases {
    Enc,
    Dec,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddSection {
    pub language: LanguageId,
    pub anchor: LanguageId,
    #[serde(default = "both")]
    pub direction: Phases,
    /// Step limit per phase; the run's `max_steps` if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

fn both() -> Phases {
    Phases::Both
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(out) = &cfg.output_dir {
            cfg.output_dir = Some(base.join(out));
        }
        for p in cfg.corpus.files.values_mut() {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        match (c.languages.is_empty(), c.files.is_empty()) {
            (true, true) => return Err(Error::Config("corpus needs synthetic `languages` or `files`".into())),
            (false, false) => return Err(Error::Config("corpus takes either `languages` or `files`, not both".into())),
            _ => {}
        }
        let corpus_langs = self.corpus_languages();
        let mut seen = std::collections::BTreeSet::new();
        for l in &corpus_langs {
            if !seen.insert(l) {
                return Err(Error::Config(format!("language `{l}` listed twice")));
            }
        }
        for l in self.train_languages() {
            if !corpus_langs.contains(&l) {
                return Err(Error::Config(format!("training language `{l}` has no corpus")));
            }
        }
        if let ScheduleSpec::Named(n) = &self.schedule {
            if n != "all-pairs" {
                return Err(Error::Config(format!(
                    "schedule must be \"all-pairs\" or a list of directions, got \"{n}\""
                )));
            }
        }
        let mut model = self.model.transformer()?;
        // The tokenizer fixes the real size later; it never exceeds the target.
        model.vocab_size = self.model.target_vocab;
        model.validate()?;
        self.optimizer.validate()?;
        if self.batching.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_languages(&self) -> Vec<LanguageId> {
        if self.corpus.files.is_empty() {
            self.corpus.languages.iter().map(|s| s.language.clone()).collect()
        } else {
            self.corpus.files.keys().cloned().collect()
        }
    }

    pub fn train_languages(&self) -> Vec<LanguageId> {
        self.train_languages
            .clone()
            .unwrap_or_else(|| self.corpus_languages())
    }

    /// The synthetic corpus description with the given data seed.
    pub fn manifest(&self, data_seed: u64) -> Result<CorpusManifest> {
        let c = &self.corpus;
        if c.languages.is_empty() {
            return Err(Error::Config("no synthetic language specs in [corpus]".into()));
        }
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("synthetic corpus needs `{name}`")))
        };
        Ok(CorpusManifest {
            seed: data_seed,
            sentences: need(c.sentences, "sentences")?,
            latent_vocab: need(c.latent_vocab, "latent_vocab")?,
            min_len: need(c.min_len, "min_len")?,
            max_len: need(c.max_len, "max_len")?,
            languages: c.languages.clone(),
        })
    }

    pub fn schedule(&self, langs: &[LanguageId]) -> Result<TrainingSchedule> {
        match &self.schedule {
            ScheduleSpec::Named(_) => Ok(TrainingSchedule::all_pairs(langs)),
            ScheduleSpec::Directions(ds) => {
                for d in ds {
                    for l in [&d.src, &d.tgt] {
                        if !langs.contains(l) {
                            return Err(Error::Config(format!(
                                "schedule direction {d} names `{l}`, which is not a training language"
                            )));
                        }
                    }
                }
                TrainingSchedule::new(ds.iter().cloned())
            }
        }
    }
}
