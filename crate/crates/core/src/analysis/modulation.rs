use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::TaskExample;
use crate::error::Result;
use crate::numerics::{Graph, ParamStore};
use crate::trainer::{KalaModel, Streams};

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    /// Equal-width bins over `[min, max]`; a single bin when all values coincide.
    pub counts: Vec<usize>,
    pub total: usize,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Option<Self> {
        if values.is_empty() || bins == 0 {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let counts = if max > min {
            let mut c = vec![0; bins];
            let width = (max - min) / bins as f64;
            for v in values {
                c[(((v - min) / width) as usize).min(bins - 1)] += 1;
            }
            c
        } else {
            vec![values.len()]
        };
        Some(Self { min, max, counts, total: values.len(), mean, std })
    }

    /// `(lower, upper)` edges of bin `i`.
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.max - self.min) / self.counts.len() as f64;
        (self.min + w * i as f64, self.min + w * (i + 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixHistogram {
    /// No modulated entries were observed.
    Empty,
    Values(Histogram),
}

/// Keyed by `layerNN.gamma1`, `layerNN.beta1`, `layerNN.gamma2`, `layerNN.beta2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModulationReport {
    pub mention_tokens: usize,
    pub matrices: BTreeMap<String, MatrixHistogram>,
}

impl ModulationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("matrix,bin,lower,upper,count\n");
        for (name, h) in &self.matrices {
            if let MatrixHistogram::Values(h) = h {
                for (i, c) in h.counts.iter().enumerate() {
                    let (lo, hi) = h.bin_edges(i);
                    let _ = writeln!(s, "{name},{i},{lo},{hi},{c}");
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("mention tokens: {}\n", self.mention_tokens);
        for (name, h) in &self.matrices {
            match h {
                MatrixHistogram::Empty => {
                    let _ = writeln!(s, "{name:<16} empty");
                }
                MatrixHistogram::Values(h) => {
                    let _ = writeln!(
                        s,
                        "{name:<16} n={:<8} mean={:.6} std={:.6} min={:.6} max={:.6}",
                        h.total, h.mean, h.std, h.min, h.max
                    );
                }
            }
        }
        s
    }
}

/// Histograms of every enabled modulation matrix's entries at mention positions.
pub fn modulation_histogram(
    model: &KalaModel,
    store: &ParamStore,
    examples: &[TaskExample],
    bins: usize,
) -> Result<ModulationReport> {
    let flags = model.config.kfm.flags();
    let names = ["gamma1", "beta1", "gamma2", "beta2"];
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for k in &model.kfm {
        for (name, on) in names.iter().zip(flags) {
            if on {
                values.insert(format!("layer{:02}.{name}", k.layer), Vec::new());
            }
        }
    }
    let mut mention_tokens = 0;
    for ex in examples {
        let positions: Vec<usize> = ex.mentions.iter().flat_map(|m| m.start..=m.end).collect();
        mention_tokens += positions.len();
        if positions.is_empty() || model.kfm.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, ex, &mut Streams::eval())?;
        let (n, d) = g.dims(fwd.hidden.last());
        for (layer, m) in &fwd.modulation {
            let v = m.values(&g, n, d);
            for (name, t) in names.iter().zip([&v.gamma1, &v.beta1, &v.gamma2, &v.beta2]) {
                if let Some(out) = values.get_mut(&format!("layer{layer:02}.{name}")) {
                    for &p in &positions {
                        out.extend_from_slice(t.row(p));
                    }
                }
            }
        }
    }
    let matrices = values
        .into_iter()
        .map(|(k, v)| (k, Histogram::new(&v, bins).map_or(MatrixHistogram::Empty, MatrixHistogram::Values)))
        .collect();
    Ok(ModulationReport { mention_tokens, matrices })
}
