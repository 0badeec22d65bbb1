use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::{generate_synthetic, SyntheticCorpus, SyntheticLanguageSpec};
use crate::error::{Error, Result};
use crate::lang::LanguageId;

/// Reads one sentence per line. CRLF is normalized and trailing blank lines
/// are dropped.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(split_lines(&text))
}

pub(crate) fn split_lines(text: &str) -> Vec<String> {
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Pairs line `i` of `src_path` with line `i` of `tgt_path`.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<Vec<(String, String)>> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// Everything needed to regenerate a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub sentences: usize,
    pub latent_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub languages: Vec<SyntheticLanguageSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl CorpusManifest {
    pub fn generate(&self) -> Result<SyntheticCorpus> {
        generate_synthetic(
            &self.languages,
            self.sentences,
            self.latent_vocab,
            (self.min_len, self.max_len),
            self.seed,
        )
    }

    pub fn file_for(dir: &Path, lang: &LanguageId) -> PathBuf {
        dir.join(format!("{lang}.txt"))
    }

    /// Writes `<lang>.txt` for each language plus the manifest into `dir`.
    pub fn write_corpus(&self, dir: &Path) -> Result<SyntheticCorpus> {
        let corpus = self.generate()?;
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (lang, lines) in &corpus.languages {
            write_lines(&Self::file_for(dir, lang), lines)?;
        }
        let text = toml::to_string(self)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(corpus)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Transform;

    #[test]
    fn three_line_files_pair_up() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "x\ny\nz\n").unwrap();
        std::fs::write(&b, "1\r\n2\r\n3\r\n\r\n").unwrap();
        let pairs = load_parallel(&a, &b).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[2], ("z".to_string(), "3".to_string()));
    }

    #[test]
    fn crlf_and_lf_agree() {
        assert_eq!(split_lines("a b\nc\n"), split_lines("a b\r\nc\r\n"));
        assert_eq!(split_lines(""), Vec::<String>::new());
    }

    #[test]
    fn mismatched_counts_report_both() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "x\ny\nz\n").unwrap();
        std::fs::write(&b, "1\n2\n3\n4\n").unwrap();
        match load_parallel(&a, &b) {
            Err(Error::Data(msg)) => assert!(msg.contains("3 lines") && msg.contains("has 4")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips_and_regenerates() {
        let m = CorpusManifest {
            seed: 5,
            sentences: 30,
            latent_vocab: 20,
            min_len: 2,
            max_len: 6,
            languages: vec![
                SyntheticLanguageSpec {
                    language: LanguageId::new("aa").unwrap(),
                    transform: Transform::SubstitutionCipher { seed: 4 },
                },
                SyntheticLanguageSpec {
                    language: LanguageId::new("bb").unwrap(),
                    transform: Transform::SuffixMarking { marker: "q".into() },
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let corpus = m.write_corpus(dir.path()).unwrap();
        let back = CorpusManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        let lines = read_lines(&CorpusManifest::file_for(dir.path(), &m.languages[1].language)).unwrap();
        assert_eq!(lines, corpus.languages[1].1);
    }
}
