mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{identity_equivalence_case, mention_sharing_case, small_model};
use kala_core::analysis::{cosine_distance, estimate_flops, nearest_seen, CorpusStats, Proximity};
use kala_core::corpus::{select_relation, split_seen_unseen, tokenize, EntityVocabulary, NO_RELATION};
use kala_core::numerics::{Graph, Tensor};
use kala_core::trainer::{decode_span, exact_match, token_f1, Variant};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_modulation_is_bit_exact(seed in any::<u64>()) {
        identity_equivalence_case(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn modulation_is_shared_within_mentions(seed in any::<u64>()) {
        mention_sharing_case(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 8), mask_bits in prop::collection::vec(any::<bool>(), 48)) {
        let (r, c) = x.dims2();
        // Keep column 0 so every row has an unmasked entry.
        let mask: Vec<bool> = (0..r * c).map(|i| i % c == 0 || mask_bits[i]).collect();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax_rows(v, Some(&mask)).unwrap();
        for i in 0..r {
            let row = g.value(s).row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..c {
                if !mask[i * c + j] {
                    prop_assert_eq!(row[j].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in matrix(5, 9)) {
        let (r, c) = x.dims2();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let gain = g.constant(Tensor::full(&[c], 1.0));
        let bias = g.constant(Tensor::zeros(&[c]));
        let y = g.layer_norm(v, gain, bias, 1e-5).unwrap();
        for i in 0..r {
            let row = x.row(i);
            let mean_in = row.iter().sum::<f64>() / c as f64;
            let var_in = row.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(var_in > 1e-2);
            let out = g.value(y).row(i);
            let mean = out.iter().sum::<f64>() / c as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            // eps shrinks the variance by var / (var + eps).
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn select_relation_follows_the_rule(
        top in 0.0f64..1.0,
        second in 0.0f64..1.0,
        threshold in prop::sample::select(vec![0.05, 0.1, 0.2]),
        top_is_null in any::<bool>(),
    ) {
        let (hi, lo) = if top >= second { (top, second) } else { (second, top) };
        prop_assume!(hi > lo);
        let first = if top_is_null { NO_RELATION } else { "r_a" };
        let dist = vec![("r_b".to_string(), lo), (first.to_string(), hi)];
        let got = select_relation(&dist, threshold).unwrap();
        let want = if !top_is_null {
            Some("r_a".to_string())
        } else if lo > threshold {
            Some("r_b".to_string())
        } else {
            None
        };
        prop_assert_eq!(&got, &want);
        prop_assert_eq!(select_relation(&dist, threshold).unwrap(), got);
    }

    #[test]
    fn seen_unseen_partition_is_total_and_disjoint(unseen in prop::collection::vec(0usize..6, 0..30)) {
        let vocab = EntityVocabulary::build(["k0", "k1", "k2"]);
        let examples: Vec<_> = unseen
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let mut ex = common::blank_example(&format!("d{i}"));
                ex.entities = (0..u).map(|j| format!("u{j}")).chain(["k0".to_string(), "k1".to_string()]).collect();
                ex
            })
            .collect();
        let (seen, unseen_idx) = split_seen_unseen(&examples, &vocab);
        let all: BTreeSet<usize> = seen.iter().chain(&unseen_idx).copied().collect();
        prop_assert_eq!(all.len(), examples.len());
        prop_assert_eq!(seen.len() + unseen_idx.len(), examples.len());
        for &i in &seen {
            prop_assert!(unseen[i] < 3);
        }
        for &i in &unseen_idx {
            prop_assert!(unseen[i] >= 3);
        }
    }

    #[test]
    fn token_metrics_are_bounded_and_symmetric(
        a in prop::collection::vec("[a-c]{1,2}", 0..6),
        b in prop::collection::vec("[a-c]{1,2}", 0..6),
    ) {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, token_f1(&b, &a));
        if exact_match(&a, &b) {
            prop_assert_eq!(f, 1.0);
        }
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert_eq!(token_f1(&shuffled, &b), f);
    }

    #[test]
    fn decoded_span_is_the_best_valid_pair(
        start in prop::collection::vec(-3i32..3, 1..12),
        end_seed in prop::collection::vec(-3i32..3, 12),
        max_len in 1usize..5,
    ) {
        let n = start.len();
        let s: Vec<f64> = start.iter().map(|&v| v as f64).collect();
        let e: Vec<f64> = end_seed[..n].iter().map(|&v| v as f64).collect();
        let (i, j) = decode_span(&s, &e, (0, n), max_len).unwrap();
        prop_assert!(i <= j && j - i < max_len);
        // Brute force: highest score, then lowest start, then shortest.
        let mut best = None;
        for a in 0..n {
            for b in a..n.min(a + max_len) {
                let score = s[a] + e[b];
                if best.is_none_or(|(bs, _, _)| score > bs) {
                    best = Some((score, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        prop_assert_eq!((i, j), (a, b));
    }

    #[test]
    fn cosine_distance_is_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 4),
        b in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let d = cosine_distance(&a, &b);
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((d - cosine_distance(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn nearest_seen_matches_brute_force(
        reps in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..100),
        seen_mask in prop::collection::vec(any::<bool>(), 100),
    ) {
        let map: BTreeMap<String, Vec<f64>> =
            reps.iter().enumerate().map(|(i, r)| (format!("e{i:03}"), r.clone())).collect();
        let is_seen = |id: &str| seen_mask[id[1..].parse::<usize>().unwrap()];
        match nearest_seen(&map, is_seen) {
            Proximity::Empty { unseen, seen } => prop_assert!(unseen == 0 || seen == 0),
            Proximity::Measured { entities, mean_distance } => {
                let mut total = 0.0;
                for e in &entities {
                    let u = &map[&e.entity];
                    let best = map
                        .iter()
                        .filter(|(id, _)| is_seen(id))
                        .map(|(_, r)| {
                            let dot: f64 = u.iter().zip(r).map(|(x, y)| x * y).sum();
                            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                            if nu == 0.0 || nr == 0.0 { 1.0 } else { (1.0 - dot / (nu * nr)).clamp(0.0, 2.0) }
                        })
                        .fold(f64::INFINITY, f64::min);
                    prop_assert!((e.distance - best).abs() < 1e-12);
                    prop_assert!(is_seen(&e.nearest) && !is_seen(&e.entity));
                    total += best;
                }
                prop_assert!((mean_distance - total / entities.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flops_scale_linearly(seq in 8usize..256, nodes in 1.0f64..60.0, epn in 0.0f64..3.0, mem in 1usize..5000) {
        let mut cfg = small_model(Variant::KalaRelational);
        cfg.transformer.vocab_size = 100;
        cfg.transformer.max_len = 1024;
        let stats = CorpusStats { avg_nodes: nodes, avg_edges_per_node: epn, max_seq_len: seq, memory_size: mem };
        let r = estimate_flops(&cfg, &stats).unwrap();
        let r2 = estimate_flops(&cfg, &CorpusStats { max_seq_len: 2 * seq, ..stats.clone() }).unwrap();
        let e2 = estimate_flops(&cfg, &CorpusStats { avg_edges_per_node: 2.0 * epn, ..stats.clone() }).unwrap();
        for c in ["feed_forward", "kfm"] {
            prop_assert!((r2.components[c] - 2.0 * r.components[c]).abs() <= 1e-9 * r2.components[c].max(1.0));
        }
        prop_assert!((e2.components["gnn"] - 2.0 * r.components["gnn"]).abs() <= 1e-9 * e2.components["gnn"].max(1.0));
        prop_assert!(r.components.values().all(|&v| v >= 0.0));
        let sum: f64 = r.components.values().sum();
        prop_assert!((r.forward - sum).abs() <= 1e-12 * sum);
        prop_assert!((r.training - sum * r.training_multiplier).abs() <= 1e-12 * r.training);
    }

    #[test]
    fn tokens_reproduce_their_character_spans(text in "[a-z ,.?]{0,40}") {
        let chars: Vec<char> = text.chars().collect();
        for t in tokenize(&text) {
            let s: String = chars[t.start..t.end].iter().collect();
            prop_assert_eq!(s, t.text);
        }
    }
}
