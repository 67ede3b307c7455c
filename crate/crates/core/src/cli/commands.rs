use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::analysis::{
    compare_variants, format_flops_table, modulation_histogram, unseen_proximity, CorpusStats, Proximity,
};
use crate::corpus::{
    entity_frequency_histogram, generate_synthetic_corpus, prepare, Corpus, Document, Prepared, TaskExample,
};
use crate::error::{KalaError, Result};
use crate::trainer::{
    evaluate, grad_check, load_checkpoint, predict_all, score_predictions, train, EvalReport, GradCheckConfig,
    KalaModel, LoadedModel, Prediction, Variant, Vocabularies,
};

pub const LOCK_FILE: &str = ".kala.lock";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Result of a command that ran to completion.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Success,
    /// A verification step failed; the message names it.
    CheckFailed(String),
}

/// Exclusive writer lock on a directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| KalaError::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(KalaError::io(
                format!("{} is locked by another command (remove {} if it is stale)", dir.display(), path.display()),
                e,
            )),
            Err(e) => Err(KalaError::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn documents(self, corpus: &Corpus) -> &[Document] {
        match self {
            Split::Train => &corpus.train,
            Split::Val => &corpus.val,
            Split::Test => &corpus.test,
        }
    }

    fn examples(self, data: &Prepared) -> &[TaskExample] {
        match self {
            Split::Train => &data.train,
            Split::Val => &data.val,
            Split::Test => &data.test,
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| KalaError::io(format!("writing {}", path.display()), e))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.paths.corpus_dir)
}

fn prepared(cfg: &RunConfig, corpus: &Corpus) -> Result<Prepared> {
    prepare(corpus, cfg.model.assembly_options(), cfg.data.min_entity_frequency)
}

fn format_report(label: &str, r: &EvalReport) -> String {
    let mut s = String::new();
    let line = |name: &str, m: Option<&crate::trainer::Metrics>| match m {
        None => format!("{label} {name:<8} empty\n"),
        Some(m) => match m.em {
            Some(em) => format!("{label} {name:<8} n={:<5} EM={em:.3} F1={:.3}\n", m.count, m.f1),
            None => format!("{label} {name:<8} n={:<5} F1={:.3}\n", m.count, m.f1),
        },
    };
    s.push_str(&line("overall", Some(&r.overall)));
    s.push_str(&line("seen", r.seen.metrics()));
    s.push_str(&line("unseen", r.unseen.metrics()));
    s
}

pub fn generate(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.paths.corpus_dir;
    let _lock = DirLock::acquire(dir)?;
    let g = generate_synthetic_corpus(&cfg.generator, cfg.seed)?;
    let (manifest, hash) = g.corpus.save(dir, Some(cfg.seed), Some(&cfg.generator))?;
    let data = prepared(cfg, &g.corpus)?;
    let hist = entity_frequency_histogram(&data.entities);
    let expected = (cfg.generator.unseen_fraction * cfg.generator.test_contexts as f64).round() as usize;
    println!("corpus written to {}", dir.display());
    println!(
        "contexts: train {} val {} test {}",
        g.corpus.train.len(),
        g.corpus.val.len(),
        g.corpus.test.len()
    );
    println!("mentions {} facts {}", g.corpus.entities.len(), g.corpus.facts.len());
    println!(
        "training entities {} (singletons {}, top-10% mention share {:.3})",
        hist.summary.entities, hist.summary.singletons, hist.summary.head_mass
    );
    println!("unseen test contexts {} (expected {expected})", manifest.unseen_test_contexts);
    println!("manifest sha256 {hash}");
    Ok(Outcome::Success)
}

/// One row of the variant comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: EvalReport,
    pub unseen_proximity: Option<f64>,
}

/// Train one variant/seed and evaluate it on the test split, writing artifacts under `dir`.
pub fn train_one(cfg: &RunConfig, data: &Prepared, variant: Variant, seed: u64, dir: &Path) -> Result<RunSummary> {
    let mut mc = cfg.model.clone();
    mc.variant = variant;
    let vocab = Vocabularies::from_prepared(data);
    let (model, store) = KalaModel::new(mc, &vocab, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let out = train(&model, store, data, &tc, Some(dir))?;
    let test = evaluate(&model, &out.store, &data.test, &vocab, tc.max_answer_len)?;
    let prox = unseen_proximity(&model, &out.store, &data.test, &vocab.entities)?;
    let summary =
        RunSummary { variant, seed, best_epoch: out.best_epoch, test, unseen_proximity: prox.mean_distance() };
    write(&dir.join("test_metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn f1_of(m: Option<&crate::trainer::Metrics>) -> Option<f64> {
    m.map(|m| m.f1)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("empty".to_string(), |v| format!("{v:.4}"))
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// CSV and aligned-text tables over runs, with a per-variant mean row.
pub fn comparison_tables(rows: &[RunSummary]) -> (String, String) {
    let mut csv = String::from("variant,seed,test_em,test_f1,seen_f1,unseen_f1,unseen_proximity\n");
    let mut txt = format!(
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>9} {:>10}\n",
        "variant", "seed", "EM", "F1", "seen F1", "unseen F1", "proximity"
    );
    let mut by_variant: BTreeMap<Variant, Vec<&RunSummary>> = BTreeMap::new();
    for r in rows {
        by_variant.entry(r.variant).or_default().push(r);
        let vals = [
            r.test.overall.em,
            Some(r.test.overall.f1),
            f1_of(r.test.seen.metrics()),
            f1_of(r.test.unseen.metrics()),
            r.unseen_proximity,
        ];
        let _ = writeln!(csv, "{},{},{}", r.variant.name(), r.seed, vals.map(cell).join(","));
        let _ = writeln!(
            txt,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>9} {:>10}",
            r.variant.name(),
            r.seed,
            cell(vals[0]),
            cell(vals[1]),
            cell(vals[2]),
            cell(vals[3]),
            cell(vals[4])
        );
    }
    for (v, rs) in by_variant {
        let col = |f: &dyn Fn(&RunSummary) -> Option<f64>| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let vals = [
            col(&|r| r.test.overall.em),
            col(&|r| Some(r.test.overall.f1)),
            col(&|r| f1_of(r.test.seen.metrics())),
            col(&|r| f1_of(r.test.unseen.metrics())),
            col(&|r| r.unseen_proximity),
        ];
        let _ = writeln!(csv, "{},mean,{}", v.name(), vals.map(cell).join(","));
        let _ = writeln!(
            txt,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>9} {:>10}",
            v.name(),
            "mean",
            cell(vals[0]),
            cell(vals[1]),
            cell(vals[2]),
            cell(vals[3]),
            cell(vals[4])
        );
    }
    (csv, txt)
}

pub fn train_cmd(cfg: &RunConfig, matrix: bool) -> Result<Outcome> {
    let out = &cfg.paths.output_dir;
    let _lock = DirLock::acquire(out)?;
    let corpus = load_corpus(cfg)?;
    let data = prepared(cfg, &corpus)?;
    let runs: Vec<(Variant, u64)> = if matrix {
        cfg.experiment.variants.iter().flat_map(|&v| cfg.experiment.seeds.iter().map(move |&s| (v, s))).collect()
    } else {
        vec![(cfg.model.variant, cfg.seed)]
    };
    let mut rows = Vec::new();
    for (v, s) in runs {
        let dir = out.join(format!("{}-seed{s}", v.name()));
        log::info!("training {} with seed {s}", v.name());
        let r = train_one(cfg, &data, v, s, &dir)?;
        print!("{}", format_report(&format!("{} seed {s}:", v.name()), &r.test));
        rows.push(r);
    }
    if matrix {
        let (csv, txt) = comparison_tables(&rows);
        write(&out.join(COMPARISON_CSV), csv)?;
        write(&out.join(COMPARISON_TXT), &txt)?;
        print!("{txt}");
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    doc_id: String,
    prediction: Prediction,
}

fn read_predictions(path: &Path, examples: &[TaskExample]) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| KalaError::io(format!("reading {}", path.display()), e))?;
    let mut by_doc = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| KalaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        by_doc.insert(r.doc_id, r.prediction);
    }
    examples
        .iter()
        .map(|ex| {
            by_doc
                .remove(&ex.doc_id)
                .ok_or_else(|| KalaError::Contract(format!("no prediction for {}", ex.doc_id)))
        })
        .collect()
}

fn load_model(path: &Path, corpus: &Corpus) -> Result<LoadedModel> {
    let loaded = load_checkpoint(path)?;
    if loaded.vocab.task != corpus.task {
        return Err(KalaError::Contract(format!(
            "checkpoint is for {:?}, corpus is {:?}",
            loaded.vocab.task, corpus.task
        )));
    }
    Ok(loaded)
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, predictions: Option<&Path>) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let (vocab, examples, loaded) = match checkpoint {
        Some(p) => {
            let l = load_model(p, &corpus)?;
            let ex = l.vocab.assemble(&corpus, split.documents(&corpus), l.model.config.assembly_options())?;
            (l.vocab.clone(), ex, Some(l))
        }
        None => {
            let data = prepared(cfg, &corpus)?;
            (Vocabularies::from_prepared(&data), split.examples(&data).to_vec(), None)
        }
    };
    let preds = match (predictions, &loaded) {
        (Some(p), _) => read_predictions(p, &examples)?,
        (None, Some(l)) => predict_all(&l.model, &l.store, &examples, cfg.train.max_answer_len)?,
        (None, None) => return Err(KalaError::Config("eval needs --checkpoint or --predictions".into())),
    };
    let report = score_predictions(vocab.task, &examples, &preds, &vocab.entities, vocab.tags.as_ref())?;
    print!("{}", format_report(split.name(), &report));
    let out = &cfg.paths.output_dir;
    fs::create_dir_all(out).map_err(|e| KalaError::io(format!("creating {}", out.display()), e))?;
    write(&out.join(format!("eval_{}.json", split.name())), serde_json::to_string_pretty(&report)?)?;
    Ok(Outcome::Success)
}

pub fn flops_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let mut model = cfg.model.clone();
    let stats = match &cfg.flops {
        Some(s) => s.clone(),
        None => {
            let corpus = load_corpus(cfg)?;
            let data = prepared(cfg, &corpus)?;
            if model.transformer.vocab_size == 0 {
                model.transformer.vocab_size = data.tokens.len();
            }
            CorpusStats::from_examples(&data.train, data.entities.len())
        }
    };
    if model.transformer.vocab_size == 0 {
        return Err(KalaError::Config("flops needs model.transformer.vocab_size when stats are given".into()));
    }
    let rows = compare_variants(&model, &stats)?;
    let table = format_flops_table(&rows);
    println!(
        "stats: nodes {:.2}, edges/node {:.3}, max length {}, memory {}",
        stats.avg_nodes, stats.avg_edges_per_node, stats.max_seq_len, stats.memory_size
    );
    print!("{table}");
    let out = &cfg.paths.output_dir;
    let _lock = DirLock::acquire(out)?;
    let reports: Vec<_> = rows.iter().map(|(r, ratio)| serde_json::json!({ "report": r, "ratio": ratio })).collect();
    write(&out.join("flops.json"), serde_json::to_string_pretty(&serde_json::json!({ "stats": stats, "variants": reports }))?)?;
    write(&out.join("flops.txt"), table)?;
    Ok(Outcome::Success)
}

pub fn analyze_cmd(cfg: &RunConfig, checkpoint: &Path, split: Split, bins: usize) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let l = load_model(checkpoint, &corpus)?;
    let examples = l.vocab.assemble(&corpus, split.documents(&corpus), l.model.config.assembly_options())?;
    let out = &cfg.paths.output_dir;
    let _lock = DirLock::acquire(out)?;

    let hist = modulation_histogram(&l.model, &l.store, &examples, bins)?;
    let summary = hist.summary();
    write(&out.join("modulation.csv"), hist.to_csv())?;
    write(&out.join("modulation_summary.txt"), &summary)?;
    print!("{summary}");
    if hist.matrices.is_empty() {
        println!("no modulation matrices (variant {})", l.model.config.variant.name());
    }

    let prox = unseen_proximity(&l.model, &l.store, &examples, &l.vocab.entities)?;
    write(&out.join("proximity.csv"), prox.to_csv())?;
    match &prox {
        Proximity::Empty { unseen, seen } => println!("unseen proximity: empty ({unseen} unseen, {seen} seen entities)"),
        Proximity::Measured { entities, mean_distance } => {
            println!("unseen proximity: {} unseen entities, mean cosine distance {mean_distance:.4}", entities.len())
        }
    }

    let freq = entity_frequency_histogram(&l.vocab.entities);
    write(&out.join("entity_frequency.csv"), freq.to_csv())?;
    Ok(Outcome::Success)
}

pub fn gradcheck_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    examples: usize,
    check: &GradCheckConfig,
) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let (model, mut store, batch) = match checkpoint {
        Some(p) => {
            let l = load_model(p, &corpus)?;
            let ex = l.vocab.assemble(&corpus, &corpus.train, l.model.config.assembly_options())?;
            (l.model, l.store, ex)
        }
        None => {
            let data = prepared(cfg, &corpus)?;
            let vocab = Vocabularies::from_prepared(&data);
            let (m, s) = KalaModel::new(cfg.model.clone(), &vocab, cfg.seed)?;
            (m, s, data.train)
        }
    };
    let batch: Vec<TaskExample> = batch.into_iter().take(examples).collect();
    let report = grad_check(&model, &mut store, &batch, check)?;
    for g in &report.groups {
        println!(
            "{:<12} checked {:>3} (non-zero {:>3}) max rel. error {:.3e} {}",
            g.group,
            g.checked,
            g.nonzero,
            g.max_rel_err,
            if g.passed { "ok" } else { "FAILED" }
        );
    }
    println!("tolerance {:e}, absolute floor {:.3e}", report.tolerance, report.abs_floor);
    if let Some(v) = report.null_row_grad {
        println!("null memory row gradient {v:e}");
    }
    let out = &cfg.paths.output_dir;
    fs::create_dir_all(out).map_err(|e| KalaError::io(format!("creating {}", out.display()), e))?;
    write(&out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    if report.passed {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::CheckFailed(format!("gradient check failed for: {}", report.failing_groups().join(", "))))
    }
}
