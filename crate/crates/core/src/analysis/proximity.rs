use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{EntityVocabulary, TaskExample};
use crate::error::Result;
use crate::numerics::{Graph, ParamStore};
use crate::trainer::{KalaModel, Streams};

/// `1 − cos(a, b)`, in `[0, 2]`. A zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Mean final-layer hidden state over every mention token of each entity.
pub fn entity_representations(
    model: &KalaModel,
    store: &ParamStore,
    examples: &[TaskExample],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for ex in examples {
        if ex.mentions.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, ex, &mut Streams::eval())?;
        let h = g.value(fwd.hidden.last());
        let d = h.dims2().1;
        for m in &ex.mentions {
            let e = sums.entry(ex.entities[m.slot].clone()).or_insert_with(|| (vec![0.0; d], 0));
            for p in m.start..=m.end {
                e.0.iter_mut().zip(h.row(p)).for_each(|(a, v)| *a += v);
                e.1 += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|(id, (s, n))| (id, s.into_iter().map(|v| v / n as f64).collect())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NearestSeen {
    pub entity: String,
    pub nearest: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Proximity {
    /// No unseen or no seen entity in the dataset.
    Empty { unseen: usize, seen: usize },
    Measured { entities: Vec<NearestSeen>, mean_distance: f64 },
}

impl Proximity {
    pub fn mean_distance(&self) -> Option<f64> {
        match self {
            Proximity::Empty { .. } => None,
            Proximity::Measured { mean_distance, .. } => Some(*mean_distance),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("entity_id,nearest_seen_id,cosine_distance\n");
        if let Proximity::Measured { entities, .. } = self {
            for e in entities {
                let _ = writeln!(s, "{},{},{}", e.entity, e.nearest, e.distance);
            }
        }
        s
    }
}

/// Brute-force nearest seen representation for each unseen one. Ties go to the smaller id.
pub fn nearest_seen(reps: &BTreeMap<String, Vec<f64>>, is_seen: impl Fn(&str) -> bool) -> Proximity {
    let (seen, unseen): (Vec<_>, Vec<_>) = reps.iter().partition(|(id, _)| is_seen(id));
    if seen.is_empty() || unseen.is_empty() {
        return Proximity::Empty { unseen: unseen.len(), seen: seen.len() };
    }
    let entities: Vec<NearestSeen> = unseen
        .iter()
        .map(|(u, ur)| {
            let (best, dist) = seen
                .iter()
                .map(|(s, sr)| (s.as_str(), cosine_distance(ur, sr)))
                .fold(("", f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            NearestSeen { entity: u.to_string(), nearest: best.to_string(), distance: dist }
        })
        .collect();
    let mean_distance = entities.iter().map(|e| e.distance).sum::<f64>() / entities.len() as f64;
    Proximity::Measured { entities, mean_distance }
}

/// Mean cosine distance from each unseen entity to its nearest seen entity.
pub fn unseen_proximity(
    model: &KalaModel,
    store: &ParamStore,
    examples: &[TaskExample],
    vocab: &EntityVocabulary,
) -> Result<Proximity> {
    let reps = entity_representations(model, store, examples)?;
    Ok(nearest_seen(&reps, |id| vocab.contains(id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
        assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]) < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn identical_representation_is_distance_zero() {
        let reps: BTreeMap<String, Vec<f64>> =
            [("s1", vec![1.0, 0.0]), ("s2", vec![0.0, 1.0]), ("u", vec![0.0, 2.0])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        let p = nearest_seen(&reps, |id| id.starts_with('s'));
        let Proximity::Measured { entities, mean_distance } = p else { panic!() };
        assert_eq!(entities[0].nearest, "s2");
        assert_eq!(mean_distance, 0.0);
    }

    #[test]
    fn no_unseen_is_empty() {
        let reps: BTreeMap<String, Vec<f64>> = [("s1".to_string(), vec![1.0])].into_iter().collect();
        assert_eq!(nearest_seen(&reps, |_| true), Proximity::Empty { unseen: 0, seen: 1 });
    }
}
