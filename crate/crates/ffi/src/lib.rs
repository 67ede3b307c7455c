//! C ABI over `kala-core`: load corpora and checkpoints, score a split, estimate FLOPs.
//!
//! Every fallible call returns a [`KalaStatus`]. On failure the message is kept per
//! thread and read back with [`kala_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kala_core::analysis::compare_variants;
use kala_core::cli::RunConfig;
use kala_core::corpus::{generate_synthetic_corpus, Corpus, Document};
use kala_core::trainer::{predict_all, score_predictions, LoadedModel, Metrics, Subset, Variant};
use kala_core::KalaError;

pub const KALA_SPLIT_TRAIN: u32 = 0;
pub const KALA_SPLIT_VAL: u32 = 1;
pub const KALA_SPLIT_TEST: u32 = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KalaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Range = 5,
    Lookup = 6,
    Contract = 7,
    Checkpoint = 8,
    Io = 9,
    Numerics = 10,
    Divergence = 11,
    Panic = 12,
}

impl From<&KalaError> for KalaStatus {
    fn from(e: &KalaError) -> Self {
        match e {
            KalaError::Config(_) => Self::Config,
            KalaError::Parse { .. } | KalaError::Json(_) | KalaError::Annotation(_) => Self::Parse,
            KalaError::Range(_) => Self::Range,
            KalaError::Lookup(_) => Self::Lookup,
            KalaError::Contract(_) | KalaError::DegenerateNeighborhood(_) => Self::Contract,
            KalaError::Checkpoint(_) => Self::Checkpoint,
            KalaError::Io { .. } => Self::Io,
            KalaError::Numerics(_) => Self::Numerics,
            KalaError::Divergence(_) => Self::Divergence,
        }
    }
}

/// A corpus held on the Rust side.
pub struct KalaCorpus(Corpus);

/// A trained model restored from a checkpoint.
pub struct KalaModel(LoadedModel);

/// Scores for one split. Undefined values (EM outside QA, empty subsets) are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct KalaScores {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub seen_count: usize,
    pub seen_f1: f64,
    pub unseen_count: usize,
    pub unseen_f1: f64,
}

/// Training FLOPs per sequence for each variant, and relational over fine-tune.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct KalaFlops {
    pub fine_tune: f64,
    pub pointwise: f64,
    pub relational: f64,
    pub ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(KalaStatus, String);

impl From<KalaError> for Failure {
    fn from(e: KalaError) -> Self {
        Failure(KalaStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KalaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KalaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside kala".into());
            KalaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KalaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KalaStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn split_documents(corpus: &Corpus, split: u32) -> Result<&[Document], Failure> {
    match split {
        KALA_SPLIT_TRAIN => Ok(&corpus.train),
        KALA_SPLIT_VAL => Ok(&corpus.val),
        KALA_SPLIT_TEST => Ok(&corpus.test),
        other => Err(Failure(KalaStatus::InvalidArgument, format!("unknown split {other}"))),
    }
}

fn subset(s: &Subset) -> (usize, f64) {
    match s {
        Subset::Empty => (0, f64::NAN),
        Subset::Scored(Metrics { count, f1, .. }) => (*count, *f1),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn kala_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kala_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a corpus directory written by `kala generate`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kala_corpus_load(dir: *const c_char, out: *mut *mut KalaCorpus) -> KalaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let corpus = Corpus::load(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(KalaCorpus(corpus)));
        Ok(())
    })
}

/// Generates the synthetic corpus described by a run configuration file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kala_corpus_generate(config_path: *const c_char, out: *mut *mut KalaCorpus) -> KalaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::load(&path_arg(config_path, "config_path")?, &[])?;
        let g = generate_synthetic_corpus(&cfg.generator, cfg.seed)?;
        *out = Box::into_raw(Box::new(KalaCorpus(g.corpus)));
        Ok(())
    })
}

/// Writes the corpus files to `dir`.
///
/// # Safety
/// `corpus` must come from this library and `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kala_corpus_save(corpus: *const KalaCorpus, dir: *const c_char) -> KalaStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        c.0.save(&path_arg(dir, "dir")?, None, None)?;
        Ok(())
    })
}

/// Number of documents in a split, or 0 for a null handle or unknown split.
///
/// # Safety
/// `corpus` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn kala_corpus_len(corpus: *const KalaCorpus, split: u32) -> usize {
    corpus.as_ref().and_then(|c| split_documents(&c.0, split).ok()).map_or(0, <[Document]>::len)
}

/// # Safety
/// `corpus` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kala_corpus_free(corpus: *mut KalaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kala_model_load(path: *const c_char, out: *mut *mut KalaModel) -> KalaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let loaded = kala_core::trainer::load_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(KalaModel(loaded)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kala_model_free(model: *mut KalaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts every example of a split and scores the predictions.
///
/// # Safety
/// `model` and `corpus` must come from this library and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kala_model_evaluate(
    model: *const KalaModel,
    corpus: *const KalaCorpus,
    split: u32,
    max_answer_len: usize,
    out: *mut KalaScores,
) -> KalaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let c = &corpus.as_ref().ok_or_else(|| null("corpus"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if m.vocab.task != c.task {
            return Err(Failure(KalaStatus::Contract, "model and corpus are for different tasks".into()));
        }
        let examples = m.vocab.assemble(c, split_documents(c, split)?, m.model.config.assembly_options())?;
        let preds = predict_all(&m.model, &m.store, &examples, max_answer_len)?;
        let r = score_predictions(m.vocab.task, &examples, &preds, &m.vocab.entities, m.vocab.tags.as_ref())?;
        let (seen_count, seen_f1) = subset(&r.seen);
        let (unseen_count, unseen_f1) = subset(&r.unseen);
        *out = KalaScores {
            count: r.overall.count,
            em: r.overall.em.unwrap_or(f64::NAN),
            f1: r.overall.f1,
            seen_count,
            seen_f1,
            unseen_count,
            unseen_f1,
        };
        Ok(())
    })
}

/// Training FLOPs from a configuration file with a `[flops]` table.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kala_flops(config_path: *const c_char, out: *mut KalaFlops) -> KalaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = RunConfig::load(&path_arg(config_path, "config_path")?, &[])?;
        let stats = cfg.flops.clone().ok_or_else(|| Failure(KalaStatus::Config, "config has no [flops] table".into()))?;
        let rows = compare_variants(&cfg.model, &stats)?;
        let training = |v: Variant| rows.iter().find(|(r, _)| r.variant == v).map_or(f64::NAN, |(r, _)| r.training);
        let ratio = rows.iter().find(|(r, _)| r.variant == Variant::KalaRelational).map_or(f64::NAN, |r| r.1);
        *out = KalaFlops {
            fine_tune: training(Variant::FineTune),
            pointwise: training(Variant::KalaPointwise),
            relational: training(Variant::KalaRelational),
            ratio,
        };
        Ok(())
    })
}
