use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use modmt::corpus::{read_lines, split_range, CorpusManifest, Split, MANIFEST_FILE};
use modmt::eval::{default_max_len, evaluate_matrix, multi_parallel_tests, translate as compose};
use modmt::registry::{Checkpoint, Registry, FORMAT_VERSION};
use modmt::tokenizer::learn_bpe;
use modmt::trainer::{
    add_language_decoder, add_language_encoder, train_joint, AddLanguageReport, OptimizerState,
    TrainingData,
};
use modmt::{Direction, Error, LanguageId, Result};
use serde::Deserialize;

use crate::config::{Phases, RunConfig};
use crate::Common;

const LOCK_FILE: &str = ".modmt.lock";
const INIT_CHECKPOINT: &str = "init.mnmt";

fn io_err(context: impl std::fmt::Display, source: std::io::Error) -> Error {
    Error::Io {
        context: context.to_string(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

/// Held while a command writes into an output directory.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Conflict(format!(
                "{} exists; another command is writing to this directory (delete the file if none is)",
                path.display()
            ))),
            Err(e) => Err(io_err(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

struct Run {
    cfg: RunConfig,
    text: String,
    out: PathBuf,
    seed_init: u64,
    seed_data: u64,
}

fn setup(c: &Common) -> Result<Run> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let (cfg, text) = RunConfig::load(path)?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok(Run {
        seed_init: c.seed_init.unwrap_or(cfg.seeds.init),
        seed_data: c.seed_data.unwrap_or(cfg.seeds.data),
        cfg,
        text,
        out,
    })
}

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

pub fn gen_corpus(c: &Common) -> Result<()> {
    let run = setup(c)?;
    let manifest = run.cfg.manifest(run.seed_data)?;
    let _lock = Lock::acquire(&run.out)?;
    let dir = corpus_dir(&run.out);
    if dir.exists() {
        if !c.force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to regenerate",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| io_err(format!("removing {}", dir.display()), e))?;
    }
    let corpus = manifest.write_corpus(&dir)?;
    println!(
        "wrote {} languages x {} sentences to {}",
        corpus.languages.len(),
        manifest.sentences,
        dir.display()
    );
    Ok(())
}

/// Line-aligned sentences of the requested languages.
fn load_corpus(run: &Run, langs: &[LanguageId]) -> Result<BTreeMap<LanguageId, Vec<String>>> {
    let mut out = BTreeMap::new();
    if run.cfg.corpus.files.is_empty() {
        let dir = corpus_dir(&run.out);
        let expected = run.cfg.manifest(run.seed_data)?;
        let found = CorpusManifest::read(&dir.join(MANIFEST_FILE)).map_err(|_| {
            Error::Data(format!("no corpus in {}; run gen-corpus first", dir.display()))
        })?;
        if found != expected {
            return Err(Error::Data(format!(
                "corpus in {} was generated from different settings; rerun gen-corpus --force",
                dir.display()
            )));
        }
        for l in langs {
            out.insert(l.clone(), read_lines(&CorpusManifest::file_for(&dir, l))?);
        }
    } else {
        for l in langs {
            let path = run
                .cfg
                .corpus
                .files
                .get(l)
                .ok_or_else(|| Error::Config(format!("no corpus file for `{l}`")))?;
            out.insert(l.clone(), read_lines(path)?);
        }
    }
    let mut sizes = out.iter().map(|(l, s)| (l, s.len()));
    if let Some((first, n)) = sizes.next() {
        if let Some((other, m)) = sizes.find(|(_, m)| *m != n) {
            return Err(Error::Data(format!(
                "corpora are not parallel: `{first}` has {n} lines, `{other}` has {m}"
            )));
        }
        if n < 20 {
            return Err(Error::Data(format!("corpus has {n} lines; at least 20 are needed for the held-out splits")));
        }
    }
    Ok(out)
}

fn pairs(corpus: &BTreeMap<LanguageId, Vec<String>>, d: &Direction, split: Split) -> Vec<(String, String)> {
    let (s, t) = (&corpus[&d.src], &corpus[&d.tgt]);
    split_range(s.len(), split)
        .map(|k| (s[k].clone(), t[k].clone()))
        .collect()
}

fn add_direction(
    data: &mut TrainingData,
    r: &Registry,
    corpus: &BTreeMap<LanguageId, Vec<String>>,
    d: &Direction,
) -> Result<()> {
    let train = TrainingData::encode_pairs(r, d, &pairs(corpus, d, Split::Train))?;
    let valid = TrainingData::encode_pairs(r, d, &pairs(corpus, d, Split::Valid))?;
    data.add_direction(d.clone(), train, valid)
}

fn register(run: &Run, r: &mut Registry, lang: &LanguageId, sentences: &[String]) -> Result<()> {
    let train = &sentences[split_range(sentences.len(), Split::Train)];
    let bpe = learn_bpe(lang.as_str(), train, run.cfg.model.target_vocab)?;
    let dir = run.out.join("vocab");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
    bpe.save(&dir.join(format!("{lang}.merges")), &dir.join(format!("{lang}.vocab")))?;
    r.register_language(lang.clone(), run.cfg.model.transformer()?, bpe)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn base_notes(run: &Run, command: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("command".to_string(), command.to_string()),
        ("config".to_string(), run.text.clone()),
        ("seed_init".to_string(), run.seed_init.to_string()),
        ("seed_data".to_string(), run.seed_data.to_string()),
    ])
}

pub fn init_train(c: &Common) -> Result<()> {
    let run = setup(c)?;
    let langs = run.cfg.train_languages();
    let sched = run.cfg.schedule(&langs)?;
    let _lock = Lock::acquire(&run.out)?;
    let ckpt_path = run.out.join(INIT_CHECKPOINT);
    refuse_existing(&ckpt_path, c.force)?;

    let corpus = load_corpus(&run, &langs)?;
    let mut r = Registry::new(run.seed_init);
    for l in &langs {
        register(&run, &mut r, l, &corpus[l])?;
    }
    sched.validate(&r)?;
    let mut data = TrainingData::new(run.cfg.batching.token_budget, run.seed_data);
    for d in sched.directions() {
        add_direction(&mut data, &r, &corpus, d)?;
    }
    let mut opt = OptimizerState::new(run.cfg.optimizer.clone())?;
    let max_steps = c.max_steps.unwrap_or(run.cfg.stop.max_steps);
    let report = train_joint(&mut r, &sched, &mut data, &mut opt, &run.cfg.stop.criterion(), max_steps)?;

    let mut ck = Checkpoint::new(r);
    ck.meta.step = opt.step;
    ck.meta.data_seed = Some(run.seed_data);
    ck.meta.schedule = sched.directions().cloned().collect();
    ck.meta.notes = base_notes(&run, "init-train");
    ck.optimizer = Some(opt);
    ck.save(&ckpt_path)?;

    let text = report.to_text();
    write_file(&run.out.join("init-report.txt"), &text)?;
    write_file(
        &run.out.join("init-report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    print!("{text}");
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn phase_text(p: &AddLanguageReport) -> String {
    format!(
        "phase {} (frozen {} {}):\n{}",
        p.direction,
        p.frozen.0,
        p.frozen.1,
        p.training.to_text()
    )
}

pub fn add_language(
    c: &Common,
    checkpoint: Option<PathBuf>,
    language: Option<LanguageId>,
    anchor: Option<LanguageId>,
    direction: Option<Phases>,
) -> Result<()> {
    let run = setup(c)?;
    let section = run.cfg.add.clone();
    let language = language
        .or_else(|| section.as_ref().map(|s| s.language.clone()))
        .ok_or_else(|| Error::Config("no language to add: pass --language or set [add]".into()))?;
    let anchor = anchor
        .or_else(|| section.as_ref().map(|s| s.anchor.clone()))
        .ok_or_else(|| Error::Config("no anchor: pass --anchor or set [add]".into()))?;
    let phases = direction
        .or_else(|| section.as_ref().map(|s| s.direction))
        .unwrap_or(Phases::Both);
    let max_steps = c
        .max_steps
        .or_else(|| section.as_ref().and_then(|s| s.max_steps))
        .unwrap_or(run.cfg.stop.max_steps);

    let _lock = Lock::acquire(&run.out)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| run.out.join(INIT_CHECKPOINT));
    let out_path = run.out.join(format!("add-{language}.mnmt"));
    refuse_existing(&out_path, c.force)?;
    let Checkpoint {
        registry: mut r,
        mut meta,
        ..
    } = Checkpoint::load(&ckpt_path)?;
    r.require(&anchor)?;
    if r.index_of(&language).is_some() {
        return Err(Error::Conflict(format!("`{language}` is already in {}", ckpt_path.display())));
    }
    let preexisting: Vec<LanguageId> = r.languages().cloned().collect();
    let before = r.fingerprint();

    let corpus = load_corpus(&run, &[language.clone(), anchor.clone()])?;
    register(&run, &mut r, &language, &corpus[&language])?;
    let mut data = TrainingData::new(run.cfg.batching.token_budget, run.seed_data);
    let mut reports = Vec::new();
    let mut last_opt = None;
    let stop = run.cfg.stop.criterion();
    if matches!(phases, Phases::Enc | Phases::Both) {
        add_direction(&mut data, &r, &corpus, &Direction::new(language.clone(), anchor.clone()))?;
        let mut opt = OptimizerState::new(run.cfg.optimizer.clone())?;
        reports.push(add_language_encoder(&mut r, &language, &anchor, &mut data, &mut opt, &stop, max_steps)?);
        last_opt = Some(opt);
    }
    if matches!(phases, Phases::Dec | Phases::Both) {
        add_direction(&mut data, &r, &corpus, &Direction::new(anchor.clone(), language.clone()))?;
        let mut opt = OptimizerState::new(run.cfg.optimizer.clone())?;
        reports.push(add_language_decoder(&mut r, &language, &anchor, &mut data, &mut opt, &stop, max_steps)?);
        last_opt = Some(opt);
    }

    let after = r.fingerprint();
    let changed: Vec<&String> = before.keys().filter(|k| after.get(*k) != Some(&before[*k])).collect();
    let mut text = String::new();
    for p in &reports {
        text += &phase_text(p);
    }
    let names: Vec<String> = preexisting.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(
        text,
        "freeze verification: {} parameters of pre-existing languages [{}] checked, {} changed",
        before.len(),
        names.join(", "),
        changed.len()
    );
    if let Some(first) = changed.first() {
        write_file(&run.out.join(format!("add-{language}-report.txt")), &text)?;
        return Err(Error::Integrity(format!(
            "{} pre-existing parameters changed, first: {first}",
            changed.len()
        )));
    }

    meta.step = last_opt.as_ref().map_or(0, |o| o.step);
    meta.data_seed = Some(run.seed_data);
    meta.schedule = reports.iter().map(|p| p.direction.clone()).collect();
    meta.notes.extend(base_notes(&run, "add-language"));
    meta.notes.insert("added".into(), format!("{language} anchored on {anchor}"));
    let ck = Checkpoint {
        registry: r,
        optimizer: last_opt,
        meta,
    };
    ck.save(&out_path)?;
    write_file(&run.out.join(format!("add-{language}-report.txt")), &text)?;
    print!("{text}");
    println!("checkpoint: {}", out_path.display());
    Ok(())
}

fn read_input(input: Option<&Path>) -> Result<Vec<String>> {
    let mut text = String::new();
    match input {
        Some(p) => {
            text = std::fs::read_to_string(p).map_err(|e| io_err(format!("reading {}", p.display()), e))?;
        }
        None => {
            std::io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| io_err("reading standard input", e))?;
        }
    }
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn translate(
    checkpoint: &Path,
    src: &LanguageId,
    tgt: &LanguageId,
    input: Option<&Path>,
    max_len: Option<usize>,
) -> Result<()> {
    let r = Checkpoint::load(checkpoint)?.registry;
    r.require(src)?;
    r.require(tgt)?;
    let lines = read_input(input)?;
    let d = Direction::new(src.clone(), tgt.clone());
    if !r.history().contains(&d) {
        eprintln!("note: {d} was never trained; composing the {src} encoder with the {tgt} decoder");
    }
    let tokenizer = r.tokenizer(src)?;
    let positions = r.modules(tgt)?.config().max_positions;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for chunk in lines.chunks(64) {
        let longest = chunk.iter().map(|l| tokenizer.encode(l).len()).max().unwrap_or(0);
        let limit = max_len.unwrap_or_else(|| default_max_len(longest, positions));
        for t in compose(&r, src, tgt, chunk, limit)? {
            writeln!(out, "{}", t.text).map_err(|e| io_err("writing standard output", e))?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TestManifest {
    files: BTreeMap<LanguageId, PathBuf>,
}

pub fn evaluate(c: &Common, checkpoint: &Path, tests: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let r = Checkpoint::load(checkpoint)?.registry;
    let registered: Vec<LanguageId> = r.languages().cloned().collect();
    let (out_dir, test_corpus) = match tests {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| io_err(format!("reading test manifest {}", path.display()), e))?;
            let m: TestManifest =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut sets = Vec::new();
            for (l, p) in m.files {
                if registered.contains(&l) {
                    sets.push((l, read_lines(&base.join(p))?));
                }
            }
            let out = c
                .out
                .clone()
                .or_else(|| c.config.as_ref().and_then(|_| setup(c).ok()).map(|r| r.out))
                .ok_or_else(|| Error::Config("no output directory: pass --out".into()))?;
            (out, sets)
        }
        None => {
            let run = setup(c)?;
            let langs: Vec<LanguageId> = run
                .cfg
                .corpus_languages()
                .into_iter()
                .filter(|l| registered.contains(l))
                .collect();
            let corpus = load_corpus(&run, &langs)?;
            let sets = corpus
                .into_iter()
                .map(|(l, s)| {
                    let test = s[split_range(s.len(), Split::Test)].to_vec();
                    (l, test)
                })
                .collect();
            (run.out, sets)
        }
    };
    let mut test_corpus = test_corpus;
    if let Some(n) = limit {
        for (_, s) in &mut test_corpus {
            s.truncate(n);
        }
    }
    let sets = multi_parallel_tests(&test_corpus)?;
    let mut longest = 0;
    let mut positions = usize::MAX;
    for (l, s) in &test_corpus {
        let tok = r.tokenizer(l)?;
        longest = longest.max(s.iter().map(|x| tok.encode(x).len()).max().unwrap_or(0));
        positions = positions.min(r.modules(l)?.config().max_positions);
    }
    let report = evaluate_matrix(&r, &sets, default_max_len(longest, positions))?;

    let _lock = Lock::acquire(&out_dir)?;
    write_file(&out_dir.join("matrix.json"), &report.to_json())?;
    let table = report.to_table();
    write_file(&out_dir.join("matrix.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn inspect(checkpoint: &Path, digests: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let r = &ck.registry;
    let mut s = format!(
        "format MNMT v{FORMAT_VERSION}\ninit seed {}\nlanguages {}\n",
        r.seed(),
        r.len()
    );
    for l in r.languages() {
        let e = r.entry(l)?;
        let c = e.modules.config();
        let _ = writeln!(
            s,
            "  {l}: vocab {} layers {} heads {} dim {} ffn {} tied {} tied-output {} buffers {} values {}",
            e.tokenizer.vocab_size(),
            c.layers,
            c.heads,
            c.model_dim,
            c.ffn_dim,
            c.tied_embeddings,
            c.tie_output_projection,
            e.modules.buffer_count(),
            e.modules.params().element_count()
        );
    }
    let frozen: Vec<String> = r.frozen().iter().map(|(l, role)| format!("{l}/{role}")).collect();
    let _ = writeln!(s, "frozen: {}", if frozen.is_empty() { "-".into() } else { frozen.join(" ") });
    let history: Vec<String> = r.history().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "trained directions: {}", history.join(" "));
    let _ = writeln!(
        s,
        "step {} data seed {} optimizer state {}",
        ck.meta.step,
        ck.meta.data_seed.map_or("-".into(), |x| x.to_string()),
        if ck.optimizer.is_some() { "present" } else { "absent" }
    );
    for (k, v) in &ck.meta.notes {
        if k == "config" {
            let _ = writeln!(s, "note {k}: {} bytes", v.len());
        } else {
            let _ = writeln!(s, "note {k}: {v}");
        }
    }
    if digests {
        for (name, d) in r.fingerprint() {
            let _ = writeln!(s, "{d}  {name}");
        }
    }
    print!("{s}");
    Ok(())
}
