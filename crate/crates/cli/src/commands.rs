use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use interlingua::checkpoint::Checkpoint;
use interlingua::data::{read_lines, LanguageData, ParallelCorpus, ToyTask};
use interlingua::eval::{evaluate_direction, interlingua_eval_both, translate_words, BleuReport, InterlinguaReport};
use interlingua::system::System;
use interlingua::training::{add_language, init_system, train, Frozen, StepRecord, TrainState};
use interlingua::transformer::LanguageModule;
use interlingua::viz::{export_embeddings, pca_project, render_scatter};
use interlingua::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::workspace::{
    load_language, load_prepared_corpus, pair_name, prepare, write_file, Layout, Lock, PrepareOutcome, TEST, TRAIN,
};

pub const FINAL: &str = "final";
pub const LAST: &str = "last";

fn extended_name(lang: &str) -> String {
    format!("extended-{lang}")
}

fn echo_config(cfg: &RunConfig, layout: &Layout, command: &str) -> Result<()> {
    let path = layout.root.join(format!("config.{command}.toml"));
    write_file(&path, cfg.to_toml())?;
    eprintln!("effective config written to {}", path.display());
    Ok(())
}

fn languages(layout: &Layout, langs: &[&str]) -> Result<BTreeMap<String, LanguageData>> {
    langs.iter().map(|&l| Ok((l.to_string(), load_language(layout, l)?))).collect()
}

fn vocab_hashes(data: &BTreeMap<String, LanguageData>) -> BTreeMap<String, String> {
    data.iter().map(|(l, d)| (l.clone(), d.vocab.content_hash())).collect()
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    match prepare(cfg, &layout)? {
        PrepareOutcome::UpToDate => println!("prepared data in {} is up to date", layout.data().display()),
        PrepareOutcome::Written(m) => {
            echo_config(cfg, &layout, "prepare")?;
            for r in &m.reports {
                println!(
                    "{}: kept {} of {} pairs (dropped: {} too long, {} too many tokens, {} empty)",
                    r.corpus, r.kept, r.total_pairs, r.dropped_too_long, r.dropped_too_many_tokens, r.dropped_empty
                );
            }
            println!("wrote {} artifacts to {}", m.outputs.len(), layout.data().display());
        }
    }
    Ok(())
}

/// Appends one JSON object per step to the training log.
struct StepLog {
    out: BufWriter<File>,
    path: PathBuf,
    wall_time: bool,
}

impl StepLog {
    /// Opens `path`, keeping only records up to `keep_through` so a resumed
    /// run does not duplicate steps logged after the last checkpoint.
    fn open(path: &Path, keep_through: u64, wall_time: bool) -> Result<Self> {
        let mut kept = String::new();
        if keep_through > 0 {
            for line in read_lines(path)? {
                let step = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| v["step"].as_u64());
                if step.is_some_and(|s| s <= keep_through) {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        write_file(path, kept)?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(StepLog { out: BufWriter::new(file), path: path.to_path_buf(), wall_time })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        let mut v = serde_json::to_value(r).expect("record serializes");
        if !self.wall_time {
            v.as_object_mut().expect("record is an object").remove("wall_ms");
        }
        writeln!(self.out, "{v}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn save(layout: &Layout, name: &str, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(&layout.checkpoint(name))
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let _lock = Lock::acquire(&layout)?;
    let d = &cfg.data;
    let data = languages(&layout, &[&d.src_lang, &d.tgt_lang])?;
    let corpus = load_prepared_corpus(&layout, &pair_name(TRAIN, &d.src_lang, &d.tgt_lang))?;
    echo_config(cfg, &layout, "train")?;

    let last = layout.checkpoint(LAST);
    let (mut system, mut state) = if resume {
        let ckpt = Checkpoint::load(&last, Some(&vocab_hashes(&data)))?;
        if ckpt.system.model != cfg.model {
            return Err(Error::Config(format!("{} was trained with a different [model] section", last.display())));
        }
        if ckpt.system.codebook.is_some() != cfg.train.quantize {
            return Err(Error::Config(format!("{} disagrees with train.quantize = {}", last.display(), cfg.train.quantize)));
        }
        (ckpt.system, ckpt.state)
    } else {
        if last.exists() {
            return Err(Error::Config(format!(
                "{} already exists; pass --resume or choose another output directory",
                last.display()
            )));
        }
        let langs: Vec<(&str, usize, String)> =
            data.iter().map(|(l, x)| (l.as_str(), x.vocab.len(), x.vocab.content_hash())).collect();
        (init_system(&cfg.model, &cfg.train, &langs)?, TrainState::default())
    };
    let remaining = cfg.train.max_steps.saturating_sub(state.step);
    let mut log = StepLog::open(&layout.root.join("train.log.jsonl"), state.step, cfg.output.log_wall_time)?;
    eprintln!("training {} -> {} for {remaining} steps (from step {})", d.src_lang, d.tgt_lang, state.step);

    let every = cfg.train.checkpoint_every;
    let result = train(&mut system, &mut state, &corpus, &cfg.train, remaining, &Frozen::default(), |sys, st, rec| {
        log.write(rec)?;
        if every > 0 && st.step % every == 0 {
            log.flush()?;
            let ckpt = Checkpoint { system: sys.clone(), state: st.clone(), train: cfg.train.clone(), is_final: false };
            save(&layout, &format!("step-{:08}", st.step), &ckpt)?;
            save(&layout, LAST, &ckpt)?;
        }
        Ok(())
    });
    log.flush()?;
    result?;
    let ckpt = Checkpoint { system, state, train: cfg.train.clone(), is_final: true };
    save(&layout, LAST, &ckpt)?;
    save(&layout, FINAL, &ckpt)?;
    if let Some(last) = ckpt.state.history.last() {
        let corr = last.corr_distance.map_or("n/a".to_string(), |c| format!("{c:.4e}"));
        println!("step {}: loss {:.6} corr_distance {corr}", ckpt.state.step, last.total);
    }
    println!("final checkpoint {}", layout.checkpoint(FINAL).display());
    Ok(())
}

fn extension(cfg: &RunConfig) -> Result<&crate::config::ExtendConfig> {
    cfg.extend.as_ref().ok_or_else(|| Error::Config("config has no [extend] section".into()))
}

pub fn cmd_add_language(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ext = extension(cfg)?;
    let layout = Layout::new(&cfg.output.dir);
    let _lock = Lock::acquire(&layout)?;
    let d = &cfg.data;
    let base_langs = languages(&layout, &[&d.src_lang, &d.tgt_lang])?;
    let new_data = load_language(&layout, &ext.language)?;
    let corpus = load_prepared_corpus(&layout, &pair_name(TRAIN, &ext.pivot, &ext.language))?;
    let base_path = checkpoint.map_or_else(|| layout.checkpoint(FINAL), Path::to_path_buf);
    let base = Checkpoint::load(&base_path, Some(&vocab_hashes(&base_langs)))?;
    if base.system.modules.contains_key(&ext.language) {
        return Err(Error::Config(format!("{} already contains language '{}'", base_path.display(), ext.language)));
    }
    echo_config(cfg, &layout, "add-language")?;

    let mut system = base.system;
    let seed = interlingua::training::derive_seed(cfg.train.seed, &format!("module/{}", ext.language));
    let module = LanguageModule::new(&ext.language, new_data.vocab.len(), &system.model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut log = StepLog::open(&layout.root.join(format!("extend-{}.log.jsonl", ext.language)), 0, cfg.output.log_wall_time)?;
    eprintln!("adding '{}' through pivot '{}' for {} steps", ext.language, ext.pivot, ext.steps);
    let result = add_language(&mut system, module, new_data.vocab.content_hash(), &corpus, &cfg.train, ext.steps, |_, _, r| log.write(r));
    log.flush()?;
    let state = result?;
    let name = extended_name(&ext.language);
    save(&layout, &name, &Checkpoint { system: system.clone(), state, train: cfg.train.clone(), is_final: true })?;
    println!("extended checkpoint {}", layout.checkpoint(&name).display());

    let partner = cfg.partner_of(&ext.pivot).to_string();
    if ext.test_new.is_some() {
        let test = load_prepared_corpus(&layout, &pair_name(TEST, &ext.language, &partner))?;
        let partner_data = &base_langs[&partner];
        let (zero_shot, _) = evaluate_direction(&system, &ext.language, partner_data, &test.src, &test.tgt)?;
        let report = vec![DirectionBleu::new(&ext.language, &partner, zero_shot)];
        write_reports(&layout, &format!("extend-{}", ext.language), &report)?;
    }
    Ok(())
}

/// Checkpoint path plus the languages it must be loaded with.
fn open_system(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Layout, System, BTreeMap<String, LanguageData>)> {
    let layout = Layout::new(&cfg.output.dir);
    let path = checkpoint.map_or_else(|| layout.checkpoint(FINAL), Path::to_path_buf);
    let ckpt = Checkpoint::load(&path, None)?;
    let langs: Vec<&str> = ckpt.system.modules.keys().map(String::as_str).collect();
    let data = languages(&layout, &langs)?;
    ckpt.check_vocab(&vocab_hashes(&data))?;
    Ok((layout, ckpt.system, data))
}

pub fn cmd_translate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    src: &str,
    tgt: &str,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let (_, system, data) = open_system(cfg, checkpoint)?;
    let lang = |l: &str| data.get(l).ok_or_else(|| Error::Config(format!("checkpoint has no language '{l}'")));
    let (src_data, tgt_data) = (lang(src)?, lang(tgt)?);
    let lines = read_lines(input)?;
    let mut ids = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let seq = src_data.encode_line(line);
        if seq.len() > system.model.max_len {
            return Err(Error::Config(format!(
                "{} line {}: {} tokens exceed max_len {}",
                input.display(),
                i + 1,
                seq.len(),
                system.model.max_len
            )));
        }
        ids.push(seq);
    }
    let out = if ids.is_empty() { Vec::new() } else { translate_words(&system, src, tgt_data, &ids)? };
    let mut text = out.join("\n");
    if !out.is_empty() {
        text.push('\n');
    }
    write_file(output, text)?;
    eprintln!("translated {} lines {src} -> {tgt} into {}", out.len(), output.display());
    Ok(())
}

/// BLEU of one translation direction.
#[derive(Serialize)]
struct DirectionBleu {
    src: String,
    tgt: String,
    #[serde(flatten)]
    bleu: BleuReport,
}

impl DirectionBleu {
    fn new(src: &str, tgt: &str, bleu: BleuReport) -> Self {
        DirectionBleu { src: src.to_string(), tgt: tgt.to_string(), bleu }
    }
}

fn write_reports(layout: &Layout, name: &str, rows: &[DirectionBleu]) -> Result<()> {
    let mut table = format!("{:<6} {:<6} {:>8} {:>8}\n", "src", "tgt", "BLEU", "BP");
    let mut records = String::new();
    for r in rows {
        table.push_str(&format!("{:<6} {:<6} {:>8.2} {:>8.4}\n", r.src, r.tgt, r.bleu.score, r.bleu.brevity_penalty));
        records.push_str(&serde_json::to_string(r).expect("report serializes"));
        records.push('\n');
    }
    let path = layout.reports().join(format!("{name}.jsonl"));
    write_file(&path, records)?;
    print!("{table}");
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn split_corpus(cfg: &RunConfig, layout: &Layout, split: &str) -> Result<ParallelCorpus> {
    let d = &cfg.data;
    if split == TEST && d.test_src.is_none() {
        return Err(Error::Config("no test set configured (data.test_src / data.test_tgt)".into()));
    }
    load_prepared_corpus(layout, &pair_name(split, &d.src_lang, &d.tgt_lang))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str) -> Result<()> {
    let (layout, system, data) = open_system(cfg, checkpoint)?;
    let test = split_corpus(cfg, &layout, split)?;
    let (s, t) = (&cfg.data.src_lang, &cfg.data.tgt_lang);
    let mut rows = Vec::new();
    for (a, b, ids, refs) in [(s, t, &test.src, &test.tgt), (t, s, &test.tgt, &test.src), (s, s, &test.src, &test.src), (t, t, &test.tgt, &test.tgt)] {
        let (bleu, _) = evaluate_direction(&system, a, &data[b.as_str()], ids, refs)?;
        rows.push(DirectionBleu::new(a, b, bleu));
    }
    write_reports(&layout, &format!("eval-{split}"), &rows)
}

pub fn cmd_interlingua_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str) -> Result<()> {
    let (layout, system, data) = open_system(cfg, checkpoint)?;
    let test = split_corpus(cfg, &layout, split)?;
    let report: InterlinguaReport =
        interlingua_eval_both(&system, &data[&cfg.data.src_lang], &data[&cfg.data.tgt_lang], &test)?;
    let path = layout.reports().join(format!("interlingua-{split}.jsonl"));
    write_file(&path, report.to_records())?;
    print!("{}", report.to_table());
    eprintln!("report written to {}", path.display());
    Ok(())
}

pub fn cmd_viz(cfg: &RunConfig, checkpoint: Option<&Path>, splits: &[String], pair_lines: bool) -> Result<()> {
    let (layout, system, _) = open_system(cfg, checkpoint)?;
    for split in splits {
        let c = split_corpus(cfg, &layout, split)?;
        let dump = export_embeddings(&system, &[(&c.src_lang, &c.src), (&c.tgt_lang, &c.tgt)])?;
        let proj = pca_project(&dump, cfg.train.seed)?;
        let dir = layout.viz();
        write_file(&dir.join(format!("{split}.tsv")), dump.to_tsv())?;
        write_file(&dir.join(format!("{split}.projection.json")), serde_json::to_string_pretty(&proj).expect("projection serializes"))?;
        let svg = dir.join(format!("{split}.svg"));
        write_file(&svg, render_scatter(&proj, pair_lines))?;
        let silhouette = proj.silhouette().map_or("n/a".to_string(), |s| format!("{s:.4}"));
        println!(
            "{}: {} points, explained variance {:.4}/{:.4} of {:.4}, silhouette {silhouette}",
            svg.display(),
            proj.rows.len(),
            proj.explained_variance[0],
            proj.explained_variance[1],
            proj.total_variance
        );
    }
    Ok(())
}

const TOY_CONFIG: &str = r#"# Bundled toy task: y is x with words substituted and order reversed,
# z is x with words renamed.

[model]
num_blocks = 2
num_heads = 2
d_model = 32
d_ff = 128
vocab_size = 512
max_len = 50

[train]
learning_rate = 1e-4
batch_size = 32
max_steps = 1000
distance = "corr"
quantize = true
seed = 0
checkpoint_every = 250

[data]
src_lang = "x"
tgt_lang = "y"
train_src = "x.txt"
train_tgt = "y.txt"
test_src = "x.txt"
test_tgt = "y.txt"
num_merges = 100

[extend]
language = "z"
pivot = "x"
train_pivot = "x.txt"
train_new = "z.txt"
steps = 1500
test_new = "z.txt"
test_partner = "y.txt"

[output]
dir = "run"
"#;

/// Writes the toy corpora and a ready-to-use config into `dir`.
pub fn cmd_toy(dir: &Path, pairs: usize, seed: u64) -> Result<()> {
    if pairs < 2 {
        return Err(Error::Config(format!("the toy task needs at least 2 pairs, got {pairs}")));
    }
    let task = ToyTask::generate(pairs, seed);
    for (name, lines) in [("x.txt", &task.x), ("y.txt", &task.y), ("z.txt", &task.z)] {
        write_file(&dir.join(name), lines.join("\n") + "\n")?;
    }
    let config = dir.join("config.toml");
    write_file(&config, TOY_CONFIG)?;
    println!("wrote {pairs} toy pairs and {}", config.display());
    Ok(())
}
