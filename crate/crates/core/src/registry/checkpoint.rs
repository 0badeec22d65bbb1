//! Single-file checkpoint container.
//!
//! Layout: `MNMT`, a little-endian `u32` format version, then sections of
//! `tag[4] | u64 length | payload`. Sections are `META` (JSON), one `LANG`
//! per language, an optional `OPTM`, and a closing `SUM ` holding the SHA-256
//! of every preceding byte. `LANG` and `OPTM` payloads are a length-prefixed
//! JSON header followed by raw little-endian `f32` data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{digest, LanguageEntry, Registry};
use crate::error::{Error, Result};
use crate::lang::{Direction, LanguageId};
use crate::tensor::{ParamStore, Parameter, Tensor};
use crate::tokenizer::BpeModel;
use crate::trainer::{AdamConfig, Moments, OptimizerState};
use crate::transformer::{LanguageModules, Role, TransformerConfig};

pub const MAGIC: &[u8; 4] = b"MNMT";
pub const FORMAT_VERSION: u32 = 1;

/// Run-level bookkeeping stored next to the registry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub step: u64,
    pub data_seed: Option<u64>,
    pub schedule: Vec<Direction>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub registry: Registry,
    pub optimizer: Option<OptimizerState>,
    pub meta: RunMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Registry,
    Language,
}

#[derive(Serialize, Deserialize)]
struct MetaSection {
    kind: Kind,
    seed: u64,
    languages: Vec<LanguageId>,
    frozen: Vec<(LanguageId, Role)>,
    history: Vec<Direction>,
    run: RunMeta,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    digest: String,
}

#[derive(Serialize, Deserialize)]
struct LangHeader {
    language: LanguageId,
    config: TransformerConfig,
    bpe_merges: String,
    bpe_vocab: String,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct MomentRecord {
    name: String,
    t: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    config: AdamConfig,
    step: u64,
    entries: Vec<MomentRecord>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("checkpoint headers always serialize")
}

fn put_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn with_header(header: Vec<u8>, body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len() + body.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(body);
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer(b)
    }

    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.0.extend_from_slice(tag);
        self.0.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.0.extend_from_slice(payload);
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = Sha256::digest(&self.0);
        self.section(b"SUM ", &sum);
        self.0
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("checkpoint truncated while reading {what}")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(format!("{what} length overflows")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header<T: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<T> {
        let n = self.len(what)?;
        serde_json::from_slice(self.take(n, what)?)
            .map_err(|e| corrupt(format!("malformed {what}: {e}")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn encode_language(m: &LanguageModules, bpe: &BpeModel) -> Vec<u8> {
    let header = LangHeader {
        language: m.language().clone(),
        config: m.config().clone(),
        bpe_merges: bpe.merges_text(),
        bpe_vocab: bpe.vocab_text(),
        params: m
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                trainable: p.trainable(),
                digest: digest(p.values()),
            })
            .collect(),
    };
    let mut body = Vec::with_capacity(m.params().element_count() * 4);
    for p in m.params().iter() {
        put_floats(&mut body, p.values());
    }
    with_header(json(&header), body)
}

fn decode_language(payload: &[u8]) -> Result<LanguageEntry> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let h: LangHeader = r.header("language header")?;
    let mut params = ParamStore::new();
    for rec in &h.params {
        let n: usize = rec.shape.iter().product();
        let values = r.floats(n, &rec.name)?;
        if digest(&values) != rec.digest {
            return Err(corrupt(format!("digest mismatch for parameter {}", rec.name)));
        }
        let mut p = Parameter::new(rec.name.clone(), Tensor::new(rec.shape.clone(), values)?);
        p.set_trainable(rec.trainable);
        params.insert(p)?;
    }
    if !r.done() {
        return Err(corrupt(format!("trailing bytes in section of `{}`", h.language)));
    }
    let tokenizer = BpeModel::from_texts(&h.bpe_merges, &h.bpe_vocab)
        .map_err(|e| corrupt(format!("tokenizer of `{}`: {e}", h.language)))?;
    let modules = LanguageModules::from_params(h.language, h.config, params)?;
    Ok(LanguageEntry { modules, tokenizer })
}

fn encode_optimizer(opt: &OptimizerState) -> Vec<u8> {
    let header = OptimHeader {
        config: opt.config.clone(),
        step: opt.step,
        entries: opt
            .moments
            .iter()
            .map(|(name, m)| MomentRecord {
                name: name.clone(),
                t: m.t,
                len: m.m.len(),
            })
            .collect(),
    };
    let mut body = Vec::new();
    for m in opt.moments.values() {
        put_floats(&mut body, &m.m);
        put_floats(&mut body, &m.v);
    }
    with_header(json(&header), body)
}

fn decode_optimizer(payload: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let h: OptimHeader = r.header("optimizer header")?;
    let mut moments = BTreeMap::new();
    for e in h.entries {
        let m = r.floats(e.len, &e.name)?;
        let v = r.floats(e.len, &e.name)?;
        moments.insert(e.name, Moments { t: e.t, m, v });
    }
    if !r.done() {
        return Err(corrupt("trailing bytes in optimizer section"));
    }
    Ok(OptimizerState {
        config: h.config,
        step: h.step,
        moments,
    })
}

struct Parsed {
    meta: MetaSection,
    langs: Vec<LanguageEntry>,
    optimizer: Option<OptimizerState>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut meta = None;
    let mut langs = Vec::new();
    let mut optimizer = None;
    loop {
        let start = r.pos;
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
        let n = r.len("section")?;
        let payload = r.take(n, "section payload")?;
        match &tag {
            b"META" => {
                meta = Some(
                    serde_json::from_slice::<MetaSection>(payload)
                        .map_err(|e| corrupt(format!("malformed META section: {e}")))?,
                )
            }
            b"LANG" => langs.push(decode_language(payload)?),
            b"OPTM" => optimizer = Some(decode_optimizer(payload)?),
            b"SUM " => {
                if payload != Sha256::digest(&bytes[..start]).as_slice() {
                    return Err(corrupt("checkpoint checksum mismatch"));
                }
                if !r.done() {
                    return Err(corrupt("data after the checksum section"));
                }
                break;
            }
            other => {
                return Err(corrupt(format!(
                    "unknown section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    let meta = meta.ok_or_else(|| corrupt("checkpoint has no META section"))?;
    let names: Vec<&LanguageId> = langs.iter().map(|e| e.modules.language()).collect();
    if names != meta.languages.iter().collect::<Vec<_>>() {
        return Err(corrupt("language sections do not match the META language list"));
    }
    Ok(Parsed {
        meta,
        langs,
        optimizer,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes through a temporary sibling file so a crash never leaves a
/// half-written checkpoint at `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

impl Checkpoint {
    pub fn new(registry: Registry) -> Self {
        Checkpoint {
            registry,
            optimizer: None,
            meta: RunMeta::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (langs, frozen) = self.registry.parts();
        let meta = MetaSection {
            kind: Kind::Registry,
            seed: self.registry.seed(),
            languages: self.registry.languages().cloned().collect(),
            frozen: frozen.iter().cloned().collect(),
            history: self.registry.history().iter().cloned().collect(),
            run: self.meta.clone(),
        };
        let mut w = Writer::new();
        w.section(b"META", &json(&meta));
        for e in langs {
            w.section(b"LANG", &encode_language(&e.modules, &e.tokenizer));
        }
        if let Some(opt) = &self.optimizer {
            w.section(b"OPTM", &encode_optimizer(opt));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let p = parse(bytes)?;
        if !matches!(p.meta.kind, Kind::Registry) {
            return Err(corrupt("file holds a single exported language, not a checkpoint"));
        }
        let registry = Registry::from_parts(
            p.meta.seed,
            p.langs,
            p.meta.frozen.into_iter().collect(),
            p.meta.history.into_iter().collect::<BTreeSet<_>>(),
        )?;
        Ok(Checkpoint {
            registry,
            optimizer: p.optimizer,
            meta: p.meta.run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Writes one language's modules and tokenizer in the checkpoint
    /// encoding, for exchange between registries.
    pub fn export_language(registry: &Registry, lang: &LanguageId, path: &Path) -> Result<()> {
        let e = registry.entry(lang)?;
        let meta = MetaSection {
            kind: Kind::Language,
            seed: registry.seed(),
            languages: vec![lang.clone()],
            frozen: Vec::new(),
            history: Vec::new(),
            run: RunMeta::default(),
        };
        let mut w = Writer::new();
        w.section(b"META", &json(&meta));
        w.section(b"LANG", &encode_language(&e.modules, &e.tokenizer));
        write_atomic(path, &w.finish())
    }

    pub fn import_language(path: &Path) -> Result<LanguageEntry> {
        let mut p = parse(&read_file(path)?)?;
        if !matches!(p.meta.kind, Kind::Language) || p.langs.len() != 1 {
            return Err(corrupt(format!(
                "{} is not a single-language export",
                path.display()
            )));
        }
        let mut entry = p.langs.pop().unwrap();
        for role in [Role::Encoder, Role::Decoder] {
            entry.modules.set_role_trainable(role, true);
        }
        Ok(entry)
    }
}
