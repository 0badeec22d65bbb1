use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short lowercase language tag such as `de`, `ru` or `syn0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub const MAX_LEN: usize = 16;

    pub fn new(tag: impl Into<String>) -> Result<Self> {
        let tag = tag.into();
        let ok = !tag.is_empty()
            && tag.len() <= Self::MAX_LEN
            && tag
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if ok {
            Ok(LanguageId(tag))
        } else {
            Err(Error::Config(format!(
                "invalid language tag `{tag}`: expected 1-{} characters of [a-z0-9_]",
                Self::MAX_LEN
            )))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LanguageId::new(s)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LanguageId::new(s)
    }
}

impl From<LanguageId> for String {
    fn from(l: LanguageId) -> String {
        l.0
    }
}

/// An ordered (source, target) translation direction, written `src-tgt`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    pub src: LanguageId,
    pub tgt: LanguageId,
}

impl Direction {
    pub fn new(src: LanguageId, tgt: LanguageId) -> Self {
        Direction { src, tgt }
    }

    pub fn involves(&self, lang: &LanguageId) -> bool {
        &self.src == lang || &self.tgt == lang
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("direction `{s}` is not of the form src-tgt")))?;
        Ok(Direction::new(a.parse()?, b.parse()?))
    }
}

impl TryFrom<String> for Direction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> String {
        d.to_string()
    }
}
