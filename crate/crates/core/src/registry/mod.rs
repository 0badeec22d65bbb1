//! The set of registered languages with their modules and tokenizers, freeze
//! control, training history and parameter fingerprints.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lang::{Direction, LanguageId};
use crate::tokenizer::BpeModel;
use crate::transformer::{LanguageModules, Role, TransformerConfig};

pub use checkpoint::{Checkpoint, RunMeta, FORMAT_VERSION, MAGIC};

/// Hex SHA-256 of the little-endian bytes of `values`.
pub fn digest(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One registered language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEntry {
    pub modules: LanguageModules,
    pub tokenizer: BpeModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    seed: u64,
    languages: Vec<LanguageEntry>,
    frozen: BTreeSet<(LanguageId, Role)>,
    history: BTreeSet<Direction>,
}

impl Registry {
    /// An empty registry whose module initialisations derive from `seed`.
    pub fn new(seed: u64) -> Self {
        Registry {
            seed,
            languages: Vec::new(),
            frozen: BTreeSet::new(),
            history: BTreeSet::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds fresh encoder and decoder modules for `lang`. The configured
    /// vocabulary size is taken from the tokenizer.
    pub fn register_language(
        &mut self,
        lang: LanguageId,
        mut config: TransformerConfig,
        tokenizer: BpeModel,
    ) -> Result<()> {
        if self.index_of(&lang).is_some() {
            return Err(Error::Conflict(format!("language `{lang}` is already registered")));
        }
        if tokenizer.language() != lang.as_str() {
            return Err(Error::Config(format!(
                "tokenizer for `{}` cannot be registered as `{lang}`",
                tokenizer.language()
            )));
        }
        config.vocab_size = tokenizer.vocab_size();
        if let Some(first) = self.languages.first() {
            if !config.interchangeable_with(first.modules.config()) {
                return Err(Error::Config(format!(
                    "`{lang}` must share layer, head and width settings with the registered languages"
                )));
            }
        }
        let seed = crate::seed::derive(self.seed, &[self.languages.len() as u64]);
        let modules = LanguageModules::new(lang, config, seed)?;
        self.languages.push(LanguageEntry { modules, tokenizer });
        Ok(())
    }

    /// Adds already-built modules, e.g. from an exported language file.
    pub fn insert_language(&mut self, entry: LanguageEntry) -> Result<()> {
        let lang = entry.modules.language().clone();
        if self.index_of(&lang).is_some() {
            return Err(Error::Conflict(format!("language `{lang}` is already registered")));
        }
        if let Some(first) = self.languages.first() {
            if !entry.modules.config().interchangeable_with(first.modules.config()) {
                return Err(Error::Config(format!(
                    "`{lang}` does not share layer, head and width settings with the registered languages"
                )));
            }
        }
        self.languages.push(entry);
        Ok(())
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.languages.iter().map(|e| e.modules.language())
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    pub fn index_of(&self, lang: &LanguageId) -> Option<usize> {
        self.languages
            .iter()
            .position(|e| e.modules.language() == lang)
    }

    pub fn require(&self, lang: &LanguageId) -> Result<usize> {
        self.index_of(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn entry(&self, lang: &LanguageId) -> Result<&LanguageEntry> {
        Ok(&self.languages[self.require(lang)?])
    }

    pub fn entry_at(&self, index: usize) -> &LanguageEntry {
        &self.languages[index]
    }

    pub fn modules(&self, lang: &LanguageId) -> Result<&LanguageModules> {
        Ok(&self.entry(lang)?.modules)
    }

    pub fn modules_mut(&mut self, lang: &LanguageId) -> Result<&mut LanguageModules> {
        let i = self.require(lang)?;
        Ok(&mut self.languages[i].modules)
    }

    pub fn modules_at_mut(&mut self, index: usize) -> &mut LanguageModules {
        &mut self.languages[index].modules
    }

    pub fn tokenizer(&self, lang: &LanguageId) -> Result<&BpeModel> {
        Ok(&self.entry(lang)?.tokenizer)
    }

    /// Stops all updates to `lang`'s module in `role`. Idempotent.
    pub fn freeze(&mut self, lang: &LanguageId, role: Role) -> Result<()> {
        self.require(lang)?;
        self.frozen.insert((lang.clone(), role));
        self.apply_trainability(lang)
    }

    pub fn unfreeze(&mut self, lang: &LanguageId, role: Role) -> Result<()> {
        self.require(lang)?;
        self.frozen.remove(&(lang.clone(), role));
        self.apply_trainability(lang)
    }

    /// A table shared by both roles stays frozen while either role is.
    fn apply_trainability(&mut self, lang: &LanguageId) -> Result<()> {
        let frozen: Vec<Role> = [Role::Encoder, Role::Decoder]
            .into_iter()
            .filter(|r| self.frozen.contains(&(lang.clone(), *r)))
            .collect();
        let m = self.modules_mut(lang)?;
        m.set_role_trainable(Role::Encoder, true);
        m.set_role_trainable(Role::Decoder, true);
        for role in frozen {
            m.set_role_trainable(role, false);
        }
        Ok(())
    }

    pub fn is_frozen(&self, lang: &LanguageId, role: Role) -> bool {
        self.frozen.contains(&(lang.clone(), role))
    }

    pub fn frozen(&self) -> &BTreeSet<(LanguageId, Role)> {
        &self.frozen
    }

    /// Notes that `direction` received training updates.
    pub fn record_trained(&mut self, direction: Direction) {
        self.history.insert(direction);
    }

    pub fn history(&self) -> &BTreeSet<Direction> {
        &self.history
    }

    pub fn was_trained(&self, lang: &LanguageId) -> bool {
        self.history.iter().any(|d| d.involves(lang))
    }

    /// Digest of every parameter of every module, keyed by parameter name.
    pub fn fingerprint(&self) -> BTreeMap<String, String> {
        self.languages
            .iter()
            .flat_map(|e| e.modules.params().iter())
            .map(|p| (p.name().to_string(), digest(p.values())))
            .collect()
    }

    /// Digests of the parameters `lang` uses in `role`.
    pub fn role_fingerprint(&self, lang: &LanguageId, role: Role) -> Result<BTreeMap<String, String>> {
        let m = self.modules(lang)?;
        Ok(m.role_params(role)
            .into_iter()
            .map(|id| {
                let p = m.params().get(id);
                (p.name().to_string(), digest(p.values()))
            })
            .collect())
    }

    pub fn parameter_count(&self) -> usize {
        self.languages.iter().map(|e| e.modules.buffer_count()).sum()
    }

    pub(crate) fn parts(&self) -> (&[LanguageEntry], &BTreeSet<(LanguageId, Role)>) {
        (&self.languages, &self.frozen)
    }

    pub(crate) fn from_parts(
        seed: u64,
        languages: Vec<LanguageEntry>,
        frozen: BTreeSet<(LanguageId, Role)>,
        history: BTreeSet<Direction>,
    ) -> Result<Self> {
        let mut r = Registry {
            seed,
            languages: Vec::new(),
            frozen: BTreeSet::new(),
            history,
        };
        for e in languages {
            r.insert_language(e)?;
        }
        for (lang, role) in frozen {
            r.freeze(&lang, role)?;
        }
        Ok(r)
    }
}
