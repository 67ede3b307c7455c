use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::metrics::{score_predictions, EvalReport, Prediction};
use super::model::{decode_span, KalaModel, MemoryInit, Streams, Vocabularies};
use super::optim::{clip_grad_norm, linear_schedule, AdamW};
use crate::corpus::{Prepared, TaskExample, TaskKind};
use crate::error::{KalaError, Result};
use crate::numerics::{Graph, ParamStore};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent warming up.
    pub warmup: f64,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    pub max_answer_len: usize,
    /// Give memory, KFM and GNN parameters their own learning rate.
    pub knowledge_learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup: 0.06,
            max_grad_norm: 1.0,
            max_answer_len: 30,
            knowledge_learning_rate: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KalaError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return fail(format!("warmup {} outside [0, 1]", self.warmup));
        }
        if self.max_answer_len == 0 {
            return fail("max_answer_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val: Option<EvalReport>,
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    /// 0 means the initialization was kept.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Decode one example in evaluation mode.
pub fn predict(model: &KalaModel, store: &ParamStore, ex: &TaskExample, max_answer_len: usize) -> Result<Prediction> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, ex, &mut Streams::eval())?;
    let logits = g.value(fwd.logits);
    let (a, b) = ex.context_range;
    match model.task {
        TaskKind::Qa => {
            let n = ex.len();
            let starts: Vec<f64> = (0..n).map(|i| logits.row(i)[0]).collect();
            let ends: Vec<f64> = (0..n).map(|i| logits.row(i)[1]).collect();
            let (start, end) = decode_span(&starts, &ends, (a, b), max_answer_len)
                .ok_or_else(|| KalaError::Contract(format!("{}: empty context", ex.doc_id)))?;
            Ok(Prediction::Span { start, end })
        }
        TaskKind::Tagging => {
            let tags = (a..b)
                .map(|i| {
                    let row = logits.row(i);
                    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect();
            Ok(Prediction::Tags(tags))
        }
    }
}

pub fn predict_all(model: &KalaModel, store: &ParamStore, examples: &[TaskExample], max_answer_len: usize) -> Result<Vec<Prediction>> {
    examples.iter().map(|ex| predict(model, store, ex, max_answer_len)).collect()
}

pub fn evaluate(
    model: &KalaModel,
    store: &ParamStore,
    examples: &[TaskExample],
    vocab: &Vocabularies,
    max_answer_len: usize,
) -> Result<EvalReport> {
    if model.task != vocab.task {
        return Err(KalaError::Contract(format!("model trained for {:?}, data is {:?}", model.task, vocab.task)));
    }
    let preds = predict_all(model, store, examples, max_answer_len)?;
    score_predictions(vocab.task, examples, &preds, &vocab.entities, vocab.tags.as_ref())
}

/// Loss of `examples` in evaluation mode, summed.
pub fn total_loss(model: &KalaModel, store: &ParamStore, examples: &[TaskExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, ex, &mut Streams::eval())?;
        let l = model.loss(&mut g, &fwd, ex)?;
        total += g.value(l).item();
    }
    Ok(total)
}

/// Train on `data.train`, selecting the epoch with the best validation F1.
/// With `out_dir`, writes one metrics line per epoch and the selected checkpoint.
pub fn train(
    model: &KalaModel,
    mut store: ParamStore,
    data: &Prepared,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.task != data.task {
        return Err(KalaError::Contract(format!("model built for {:?}, data is {:?}", model.task, data.task)));
    }
    let vocab = Vocabularies::from_prepared(data);
    if model.config.memory_init == MemoryInit::Encoder {
        model.init_memory_from_encoder(&mut store, &data.train)?;
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| KalaError::io(format!("creating {}", dir.display()), e))?;
            let p = dir.join(METRICS_FILE);
            Some(fs::File::create(&p).map_err(|e| KalaError::io(format!("creating {}", p.display()), e))?)
        }
        None => None,
    };

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&store, cfg.learning_rate, cfg.weight_decay, cfg.knowledge_learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1));
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_f1: Option<f64> = None;
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let step = opt.steps();
            let inv = 1.0 / batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let ex = &data.train[i];
                let mut g = Graph::new();
                let mut streams = Streams::train(mix(mix(cfg.seed, step + 2), j as u64));
                let fwd = model.forward(&mut g, &store, ex, &mut streams)?;
                let l = model.loss(&mut g, &fwd, ex)?;
                let value = g.value(l).item();
                if !value.is_finite() {
                    return Err(KalaError::Divergence(format!(
                        "loss {value} at epoch {epoch}, step {step}, example {}",
                        ex.doc_id
                    )));
                }
                epoch_loss += value;
                let scaled = g.scale(l, inv);
                g.backward(scaled, &mut store)?;
            }
            store.discard_pinned_grads();
            let norm = clip_grad_norm(&mut store, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(KalaError::Divergence(format!("gradient norm {norm} at epoch {epoch}, step {step}")));
            }
            opt.step(&mut store, linear_schedule(step as usize, total_steps, cfg.warmup));
        }
        let train_loss = epoch_loss / data.train.len().max(1) as f64;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(model, &store, &data.val, &vocab, cfg.max_answer_len)?)
        };
        let f1 = val.as_ref().map(|r| r.overall.f1);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val f1 {}", f1.map_or("-".into(), |f| format!("{f:.4}")));
        let improved = match (f1, best_f1) {
            (Some(f), Some(b)) => f > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = store.clone();
            best_epoch = epoch;
            best_f1 = f1;
        }
        let rec = EpochRecord { epoch, steps: opt.steps(), train_loss, val };
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| KalaError::io("writing metrics log", e))?;
        }
        history.push(rec);
    }

    if let Some(dir) = out_dir {
        let info = serde_json::json!({ "best_epoch": best_epoch, "best_val_f1": best_f1, "seed": cfg.seed });
        save_checkpoint(&dir.join(CHECKPOINT_FILE), model, &vocab, &best, info)?;
    }
    Ok(TrainOutcome { store: best, history, best_epoch, best_val_f1: best_f1 })
}
