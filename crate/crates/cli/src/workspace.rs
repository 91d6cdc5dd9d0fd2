//! Output directory layout, prepared data artifacts and the writer lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use interlingua::data::{read_lines, BpeModel, LanguageData, ParallelCorpus, Provenance, Vocabulary};
use interlingua::transformer::TokenId;
use interlingua::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const TRAIN: &str = "train";
pub const TEST: &str = "test";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }

    pub fn bpe(&self, lang: &str) -> PathBuf {
        self.data().join(format!("{lang}.bpe"))
    }

    pub fn vocab(&self, lang: &str) -> PathBuf {
        self.data().join(format!("{lang}.vocab"))
    }

    /// Binarized corpus `name` (e.g. `train.x-y`).
    pub fn corpus(&self, name: &str) -> PathBuf {
        self.data().join(format!("{name}.json"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.ckpt"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

pub fn pair_name(split: &str, a: &str, b: &str) -> String {
    format!("{split}.{a}-{b}")
}

/// Held while a command writes training artifacts; removed on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
        let path = layout.lock();
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} exists: another command is writing to this output directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// On-disk form of a [`ParallelCorpus`].
#[derive(Serialize, Deserialize)]
struct StoredCorpus {
    src_lang: String,
    tgt_lang: String,
    src: Vec<Vec<TokenId>>,
    tgt: Vec<Vec<TokenId>>,
    provenance: Provenance,
}

pub fn save_corpus(path: &Path, c: &ParallelCorpus) -> Result<()> {
    let stored = StoredCorpus {
        src_lang: c.src_lang.clone(),
        tgt_lang: c.tgt_lang.clone(),
        src: c.src.clone(),
        tgt: c.tgt.clone(),
        provenance: c.provenance.clone(),
    };
    write_file(path, serde_json::to_string(&stored).expect("corpus serializes"))
}

pub fn load_corpus(path: &Path) -> Result<ParallelCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: StoredCorpus =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    if s.src.len() != s.tgt.len() {
        return Err(Error::Alignment(format!("{}: {} source vs {} target rows", path.display(), s.src.len(), s.tgt.len())));
    }
    Ok(ParallelCorpus { src_lang: s.src_lang, tgt_lang: s.tgt_lang, src: s.src, tgt: s.tgt, provenance: s.provenance })
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of everything in the config that affects the prepared data.
    pub settings: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub reports: Vec<FilterReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub corpus: String,
    pub total_pairs: usize,
    pub kept: usize,
    pub dropped_too_long: usize,
    pub dropped_too_many_tokens: usize,
    pub dropped_empty: usize,
}

impl FilterReport {
    fn new(name: &str, c: &ParallelCorpus) -> Self {
        let p = &c.provenance;
        FilterReport {
            corpus: name.to_string(),
            total_pairs: p.total_pairs,
            kept: c.len(),
            dropped_too_long: p.dropped_too_long,
            dropped_too_many_tokens: p.dropped_too_many_tokens,
            dropped_empty: p.dropped_empty,
        }
    }
}

fn settings_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "data": {
            "src_lang": cfg.data.src_lang, "tgt_lang": cfg.data.tgt_lang,
            "num_merges": cfg.data.num_merges, "filter": cfg.data.filter(&cfg.model),
        },
        "vocab_size": cfg.model.vocab_size,
        "extend": cfg.extend.as_ref().map(|e| (&e.language, &e.pivot)),
    });
    sha256_hex(key.to_string().as_bytes())
}

/// One corpus to build: output name, source and target `(lang, path)`.
struct Job<'a> {
    name: String,
    src: (&'a str, &'a Path),
    tgt: (&'a str, &'a Path),
}

fn jobs(cfg: &RunConfig) -> (Vec<Job<'_>>, Vec<(&str, &Path)>) {
    let d = &cfg.data;
    let mut jobs = vec![Job {
        name: pair_name(TRAIN, &d.src_lang, &d.tgt_lang),
        src: (&d.src_lang, &d.train_src),
        tgt: (&d.tgt_lang, &d.train_tgt),
    }];
    if let (Some(s), Some(t)) = (&d.test_src, &d.test_tgt) {
        jobs.push(Job { name: pair_name(TEST, &d.src_lang, &d.tgt_lang), src: (&d.src_lang, s), tgt: (&d.tgt_lang, t) });
    }
    // Each language's BPE and vocabulary come from its side of the base
    // training pair, or from the extension corpus for a new language.
    let mut learn_from = vec![(d.src_lang.as_str(), d.train_src.as_path()), (d.tgt_lang.as_str(), d.train_tgt.as_path())];
    if let Some(e) = &cfg.extend {
        jobs.push(Job {
            name: pair_name(TRAIN, &e.pivot, &e.language),
            src: (&e.pivot, &e.train_pivot),
            tgt: (&e.language, &e.train_new),
        });
        if let (Some(n), Some(p)) = (&e.test_new, &e.test_partner) {
            let partner = cfg.partner_of(&e.pivot);
            jobs.push(Job { name: pair_name(TEST, &e.language, partner), src: (&e.language, n), tgt: (partner, p) });
        }
        learn_from.push((&e.language, &e.train_new));
    }
    (jobs, learn_from)
}

pub enum PrepareOutcome {
    UpToDate,
    Written(Manifest),
}

fn manifest_is_current(layout: &Layout, m: &Manifest, settings: &str, inputs: &BTreeMap<String, String>) -> bool {
    m.settings == settings
        && &m.inputs == inputs
        && m.outputs.iter().all(|(f, h)| file_hash(&layout.data().join(f)).is_ok_and(|got| &got == h))
}

/// Learns BPE and vocabularies and binarizes every configured corpus. Does
/// nothing when the manifest shows identical inputs, settings and outputs.
pub fn prepare(cfg: &RunConfig, layout: &Layout) -> Result<PrepareOutcome> {
    cfg.check_inputs()?;
    let (jobs, learn_from) = jobs(cfg);
    let settings = settings_hash(cfg);
    let mut inputs = BTreeMap::new();
    for j in &jobs {
        for (_, p) in [j.src, j.tgt] {
            inputs.insert(p.display().to_string(), file_hash(p)?);
        }
    }
    if let Ok(text) = fs::read_to_string(layout.manifest()) {
        if let Ok(m) = serde_json::from_str::<Manifest>(&text) {
            if manifest_is_current(layout, &m, &settings, &inputs) {
                return Ok(PrepareOutcome::UpToDate);
            }
        }
    }

    let d = &cfg.data;
    let mut languages = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    let record = |path: PathBuf, outputs: &mut BTreeMap<String, String>| -> Result<()> {
        let name = path.file_name().expect("artifact file name").to_string_lossy().into_owned();
        outputs.insert(name, file_hash(&path)?);
        Ok(())
    };
    for (lang, path) in learn_from {
        let lines = read_lines(path)?;
        let data = LanguageData::learn(lang, &lines, d.num_merges, cfg.model.vocab_size)?;
        fs::create_dir_all(layout.data()).map_err(|e| Error::io(layout.data(), e))?;
        data.bpe.save(&layout.bpe(lang))?;
        data.vocab.save(&layout.vocab(lang))?;
        record(layout.bpe(lang), &mut outputs)?;
        record(layout.vocab(lang), &mut outputs)?;
        languages.insert(lang.to_string(), data);
    }
    let mut reports = Vec::new();
    for j in &jobs {
        let c = ParallelCorpus::load(j.src.1, j.tgt.1, &languages[j.src.0], &languages[j.tgt.0], d.filter(&cfg.model))?;
        if c.is_empty() {
            return Err(Error::Degenerate(format!("corpus {} keeps no pairs after filtering", j.name)));
        }
        let path = layout.corpus(&j.name);
        save_corpus(&path, &c)?;
        record(path, &mut outputs)?;
        reports.push(FilterReport::new(&j.name, &c));
    }
    let manifest = Manifest { settings, inputs, outputs, reports };
    write_file(&layout.manifest(), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(PrepareOutcome::Written(manifest))
}

pub fn load_language(layout: &Layout, lang: &str) -> Result<LanguageData> {
    let (bpe, vocab) = (layout.bpe(lang), layout.vocab(lang));
    if !bpe.is_file() || !vocab.is_file() {
        return Err(Error::Config(format!(
            "no prepared data for language '{lang}' under {} (run `prepare` first)",
            layout.data().display()
        )));
    }
    Ok(LanguageData { language: lang.to_string(), bpe: BpeModel::load(&bpe)?, vocab: Vocabulary::load(&vocab)? })
}

pub fn load_prepared_corpus(layout: &Layout, name: &str) -> Result<ParallelCorpus> {
    let path = layout.corpus(name);
    if !path.is_file() {
        return Err(Error::Config(format!("prepared corpus {} is missing (run `prepare` first)", path.display())));
    }
    load_corpus(&path)
}
