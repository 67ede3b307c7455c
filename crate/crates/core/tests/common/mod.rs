//! Shared helpers for the integration suites.

#![allow(dead_code)]

use kala_core::knowledge::{EntityMemory, GnnConfig, KnowledgeGraphView, RelationLayout, RelationalRetriever, NULL_ROW};
use kala_core::numerics::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use kala_core::corpus::{generate_synthetic_corpus, prepare, GeneratorConfig, Prepared};
use kala_core::trainer::{ModelConfig, Variant};
use kala_core::transformer::Dropout;
use kala_core::KalaError;
use rand_chacha::ChaCha8Rng;

/// Dense retrieval oracle enumerating every (destination, source, relation) triple.
pub struct Dense {
    d: usize,
    slope: f64,
    layers: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    rel: Vec<Vec<f64>>,
    memory: Vec<Vec<f64>>,
}

impl Dense {
    pub fn from_store(store: &ParamStore, layers: usize, d: usize, slope: f64) -> Self {
        let get = |n: &str| store.value(store.id(n).unwrap()).clone();
        let emb = get("gnn.relations.emb");
        let proj = get("gnn.relations.proj");
        let (rows, dr) = emb.dims2();
        let mut rel = vec![vec![0.0; d]; rows];
        for (r, out) in rel.iter_mut().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o = (0..dr).map(|k| emb.data()[r * dr + k] * proj.data()[k * d + c]).sum();
            }
        }
        let table = get("memory.table");
        let memory = (0..table.dims2().0).map(|r| table.row(r).to_vec()).collect();
        let layers = (1..=layers)
            .map(|l| {
                let p = |s: &str| get(&format!("gnn.layer{l}.{s}")).data().to_vec();
                (p("w"), p("a"), p("update_w"), p("update_b"))
            })
            .collect();
        Self { d, slope, layers, rel, memory }
    }

    fn psi(&self, l: usize, parts: [&[f64]; 4]) -> f64 {
        let d = self.d;
        let (w, a, _, _) = &self.layers[l];
        let estar: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        let mut out = 0.0;
        for c in 0..d {
            let z: f64 = (0..4 * d).map(|k| estar[k] * w[k * d + c]).sum();
            let z = if z > 0.0 { z } else { self.slope * z };
            out += a[c] * z;
        }
        out
    }

    /// Returns target vectors, target null flags and per-layer α aligned with `view.edges`.
    #[allow(clippy::type_complexity)]
    pub fn retrieve(&self, view: &KnowledgeGraphView, ctx: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<bool>, Vec<Vec<f64>>), ()> {
        let n = view.num_nodes();
        let d = self.d;
        let k = view.num_targets;
        let mut null: Vec<bool> = view.nodes.iter().map(|v| v.memory_row == NULL_ROW).collect();
        let mut states: Vec<Vec<f64>> = view.nodes.iter().map(|v| self.memory[v.memory_row].clone()).collect();
        let context: Vec<Vec<f64>> = (0..n).map(|i| if i < k { ctx[i].clone() } else { vec![0.0; d] }).collect();
        let nrel = self.rel.len();
        let has = |i: usize, j: usize, r: usize| view.edges.iter().any(|e| e.dst == i && e.src == j && e.relation == r);
        let mut alphas = Vec::new();
        for l in 0..self.layers.len() {
            let mut alpha_map = std::collections::BTreeMap::new();
            let mut support = vec![false; n];
            let mut next = vec![vec![0.0; d]; n];
            for i in 0..n {
                let mut scores = Vec::new();
                for j in 0..n {
                    for r in 0..nrel {
                        if has(i, j, r) && !null[j] {
                            scores.push((j, r, self.psi(l, [&states[i], &self.rel[r], &states[j], &context[i]])));
                        }
                    }
                }
                if scores.is_empty() {
                    if l == 0 && i < k && !null[i] {
                        return Err(());
                    }
                    continue;
                }
                support[i] = true;
                let m = scores.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.2 - m).exp()).sum();
                let mut agg = vec![0.0; d];
                for &(j, r, s) in &scores {
                    let a = (s - m).exp() / z;
                    alpha_map.insert((i, j, r), a);
                    for c in 0..d {
                        agg[c] += a * states[j][c];
                    }
                }
                let (_, _, uw, ub) = &self.layers[l];
                for c in 0..d {
                    let mut v = ub[c] + (0..d).map(|q| agg[q] * uw[q * d + c]).sum::<f64>();
                    if l + 1 < self.layers.len() {
                        v = v.max(0.0);
                    }
                    next[i][c] = v;
                }
            }
            alphas.push(
                view.edges.iter().map(|e| alpha_map.get(&(e.dst, e.src, e.relation)).copied().unwrap_or(0.0)).collect(),
            );
            states = next;
            null = support.iter().map(|s| !s).collect();
        }
        Ok((states[..k].to_vec(), null[..k].to_vec(), alphas))
    }
}

pub struct Case {
    pub store: ParamStore,
    pub memory: EntityMemory,
    pub retriever: RelationalRetriever,
    pub view: KnowledgeGraphView,
    pub context: Vec<Vec<f64>>,
    pub layers: usize,
}

pub fn random_case(rng: &mut ChaCha8Rng, d: usize, num_relations: usize) -> Case {
    let mut store = ParamStore::new();
    let memory = EntityMemory::new(6, d, &mut store, rng);
    let layers = rng.random_range(1..=2);
    let cfg = GnnConfig { layers, ..GnnConfig::default() };
    let retriever = RelationalRetriever::new(cfg, num_relations, d, &mut store, rng);
    // Scale parameters up so attention is far from uniform.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v *= 20.0;
        }
    }
    memory.repin(&mut store);
    for l in 1..=layers {
        let id = store.id(&format!("gnn.layer{l}.update_w")).unwrap();
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }

    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=n);
    let keys: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let rows: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.3) { NULL_ROW } else { rng.random_range(1..=6) }).collect();
    let targets: Vec<(String, usize)> = (0..k).map(|i| (keys[i].clone(), rows[i])).collect();
    let mut facts = Vec::new();
    for _ in 0..rng.random_range(0..=2 * n) {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        facts.push((keys[h].clone(), rng.random_range(0..num_relations), keys[t].clone()));
    }
    // Make sure non-target nodes exist in the view by attaching them.
    for i in k..n {
        facts.push((keys[0].clone(), 0, keys[i].clone()));
    }
    let self_loops = rng.random_bool(0.8);
    let resolve = |key: &str| rows[keys.iter().position(|k| k == key).unwrap()];
    let view = KnowledgeGraphView::build(&targets, &facts, resolve, RelationLayout { num_relations }, self_loops).unwrap();
    let context = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    Case { store, memory, retriever, view, context, layers }
}

pub fn context_var(g: &mut Graph, ctx: &[Vec<f64>], d: usize) -> Var {
    let data: Vec<f64> = ctx.iter().flatten().copied().collect();
    g.constant(Tensor::new(vec![ctx.len(), d], data).unwrap())
}


/// Agreement between the retriever and the dense oracle over random graphs.
#[derive(Debug, Default)]
pub struct OracleSummary {
    pub checked: usize,
    pub degenerate: usize,
    pub max_vector_err: f64,
    pub max_alpha_err: f64,
    /// Largest |Σα − 1| over nodes with at least one unmasked neighbor.
    pub max_alpha_sum_err: f64,
    /// Largest attention weight given to a null source in the first layer.
    pub max_null_weight: f64,
    pub mismatches: Vec<String>,
}

pub fn run_oracle_suite(cases: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3;
    let mut s = OracleSummary::default();
    for case in 0..cases {
        let c = random_case(&mut rng, d, 2);
        let oracle = Dense::from_store(&c.store, c.layers, d, 0.2);
        let mut g = Graph::new();
        let ctx = context_var(&mut g, &c.context, d);
        let got = c.retriever.retrieve(&mut g, &c.store, &c.memory, &c.view, Some(ctx), &mut Dropout::eval());
        match (oracle.retrieve(&c.view, &c.context), got) {
            (Err(()), Err(KalaError::DegenerateNeighborhood(_))) => s.degenerate += 1,
            (Ok((vecs, null, alphas)), Ok(out)) => {
                if out.null != null {
                    s.mismatches.push(format!("case {case}: null flags {:?} vs {:?}", out.null, null));
                }
                let v = g.value(out.vectors).data();
                for (i, row) in vecs.iter().enumerate() {
                    for c in 0..d {
                        s.max_vector_err = s.max_vector_err.max((v[i * d + c] - row[c]).abs());
                    }
                }
                if !c.view.edges.is_empty() {
                    for (l, want) in alphas.iter().enumerate() {
                        let a = g.value(out.attention[l]).data();
                        for (e, edge) in c.view.edges.iter().enumerate() {
                            s.max_alpha_err = s.max_alpha_err.max((a[e] - want[e]).abs());
                            if l == 0 && c.view.nodes[edge.src].memory_row == NULL_ROW {
                                s.max_null_weight = s.max_null_weight.max(a[e].abs());
                            }
                        }
                        for i in 0..c.view.num_nodes() {
                            let sum: f64 =
                                c.view.edges.iter().zip(a).filter(|(e, _)| e.dst == i).map(|(_, &x)| x).sum();
                            if sum != 0.0 {
                                s.max_alpha_sum_err = s.max_alpha_sum_err.max((sum - 1.0).abs());
                            }
                        }
                    }
                }
                s.checked += 1;
            }
            (o, g) => s.mismatches.push(format!("case {case}: oracle ok {} retriever ok {}", o.is_ok(), g.is_ok())),
        }
    }
    s
}

/// A small QA corpus with an unseen-heavy test split.
pub fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        entities_per_category: 8,
        train_contexts: 40,
        val_contexts: 10,
        test_contexts: 10,
        ..GeneratorConfig::default()
    }
}

pub fn small_prepared(seed: u64) -> Prepared {
    let g = generate_synthetic_corpus(&small_generator(), seed).unwrap();
    prepare(&g.corpus, small_model(Variant::KalaRelational).assembly_options(), 0).unwrap()
}

/// Two layers of width 8 with KFM on both.
pub fn small_model(variant: Variant) -> ModelConfig {
    let mut m = ModelConfig { variant, ..ModelConfig::default() };
    m.transformer.num_layers = 2;
    m.transformer.hidden = 8;
    m.transformer.intermediate = 16;
    m.transformer.heads = 2;
    m.transformer.max_len = 64;
    m.transformer.dropout = 0.0;
    m.transformer.kfm_locations = [1, 2].into();
    m
}

/// Replace every parameter whose name starts with `prefix` by normal(0, std) draws.
pub fn randomize(store: &mut ParamStore, prefix: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    for p in store.iter_mut() {
        if p.name.starts_with(prefix) {
            for v in p.value.data_mut() {
                *v = rng.sample(normal);
            }
        }
    }
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn bits(t: &kala_core::numerics::Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_encoder(rng: &mut ChaCha8Rng) -> (kala_core::transformer::Encoder, ParamStore) {
    use kala_core::transformer::{Encoder, TransformerConfig};
    let num_layers = rng.random_range(1..=3);
    let heads = rng.random_range(1..=3);
    let hidden = heads * rng.random_range(2..=4);
    let mut kfm_locations: std::collections::BTreeSet<usize> =
        (1..=num_layers).filter(|_| rng.random_bool(0.5)).collect();
    kfm_locations.insert(rng.random_range(1..=num_layers));
    let cfg = TransformerConfig {
        num_layers,
        hidden,
        intermediate: rng.random_range(2..=3 * hidden),
        heads,
        vocab_size: rng.random_range(5..=30),
        max_len: 16,
        dropout: 0.0,
        kfm_locations,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, rng).unwrap();
    // Larger than the default init so any stray perturbation is visible in the output bits.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v *= 10.0;
        }
    }
    (enc, store)
}

fn random_mentions(rng: &mut ChaCha8Rng, n: usize, slots: usize) -> Vec<kala_core::kfm::MentionSpan> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n {
        pos += rng.random_range(0..=2);
        if pos >= n {
            break;
        }
        let end = (pos + rng.random_range(0..=2)).min(n - 1);
        out.push(kala_core::kfm::MentionSpan { slot: rng.random_range(0..slots), start: pos, end });
        pos = end + 1;
    }
    out
}

fn random_flags(rng: &mut ChaCha8Rng) -> kala_core::kfm::KfmConfig {
    let mut f = [false; 4];
    while !f.iter().any(|&x| x) {
        f = [rng.random_bool(0.6), rng.random_bool(0.6), rng.random_bool(0.6), rng.random_bool(0.6)];
    }
    kala_core::kfm::KfmConfig { gamma1: f[0], beta1: f[1], gamma2: f[2], beta2: f[3], ..Default::default() }
}

/// One random encoder, input and annotation: identity modulation, both as explicit
/// all-ones/all-zeros matrices and as zero-initialized h-MLP output, must leave
/// every hidden state bit-identical to the unmodulated encoder.
pub fn identity_equivalence_case(seed: u64) -> Result<(), String> {
    use kala_core::kfm::{KfmLayer, ModulationParams, ModulationValues};
    use std::collections::BTreeMap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (enc, mut store) = random_encoder(&mut rng);
    let cfg = enc.config.clone();
    let n = rng.random_range(1..=cfg.max_len);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let flags = random_flags(&mut rng);
    let layers: Vec<KfmLayer> =
        cfg.kfm_locations.iter().map(|&l| KfmLayer::new(l, cfg.hidden, &flags, &mut store, &mut rng)).collect();
    let slots = rng.random_range(1..=3);
    let mentions = random_mentions(&mut rng, n, slots);
    let vectors: Vec<f64> = (0..slots * cfg.hidden).map(|_| rng.random_range(-3.0..3.0)).collect();
    let null: Vec<bool> = (0..slots).map(|_| rng.random_bool(0.3)).collect();

    let mut g = Graph::new();
    let plain = enc.encode(&mut g, &store, &tokens, &BTreeMap::new(), &mut Dropout::eval()).map_err(|e| e.to_string())?;
    let want: Vec<Vec<u64>> = plain.to_tensors(&g).iter().map(bits).collect();

    let mut explicit = BTreeMap::new();
    for &l in &cfg.kfm_locations {
        explicit.insert(l, ModulationParams::from_values(&mut g, &ModulationValues::identity(n, cfg.hidden)));
    }
    let got = enc.encode(&mut g, &store, &tokens, &explicit, &mut Dropout::eval()).map_err(|e| e.to_string())?;
    if got.to_tensors(&g).iter().map(bits).collect::<Vec<_>>() != want {
        return Err(format!("seed {seed}: explicit identity modulation changed the output"));
    }

    let v = g.constant(Tensor::new(vec![slots, cfg.hidden], vectors).unwrap());
    let mut zero_init = BTreeMap::new();
    for k in &layers {
        let m = k.compute_modulation(&mut g, &store, v, &null, &mentions, n).map_err(|e| e.to_string())?;
        zero_init.insert(k.layer, m);
    }
    let got = enc.encode(&mut g, &store, &tokens, &zero_init, &mut Dropout::eval()).map_err(|e| e.to_string())?;
    if got.to_tensors(&g).iter().map(bits).collect::<Vec<_>>() != want {
        return Err(format!("seed {seed}: zero-initialized h-MLPs changed the output"));
    }
    Ok(())
}

/// One random annotated sequence through a KFM layer with non-zero weights:
/// every token of a mention shares one modulation row, tokens outside mentions
/// get exactly Γ = 1, B = 0, and null slots get identity everywhere.
pub fn mention_sharing_case(seed: u64) -> Result<(), String> {
    use kala_core::kfm::KfmLayer;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=6);
    let n = rng.random_range(1..=20);
    let slots = rng.random_range(1..=4);
    let flags = random_flags(&mut rng);
    let mut store = ParamStore::new();
    let layer = KfmLayer::new(1, d, &flags, &mut store, &mut rng);
    randomize(&mut store, "kfm", 0.7, seed ^ 1);
    let mentions = random_mentions(&mut rng, n, slots);
    let null: Vec<bool> = (0..slots).map(|_| rng.random_bool(0.3)).collect();
    let vectors: Vec<f64> = (0..slots * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![slots, d], vectors).unwrap());
    let m = layer.compute_modulation(&mut g, &store, v, &null, &mentions, n).map_err(|e| e.to_string())?;
    let vals = m.values(&g, n, d);
    let mats = [(&vals.gamma1, 1.0), (&vals.beta1, 0.0), (&vals.gamma2, 1.0), (&vals.beta2, 0.0)];
    let mut owner = vec![None; n];
    for (i, mention) in mentions.iter().enumerate() {
        for p in mention.start..=mention.end {
            owner[p] = Some(i);
        }
    }
    for (t, fill) in mats {
        for p in 0..n {
            let row: Vec<u64> = t.row(p).iter().map(|x| x.to_bits()).collect();
            let identity = vec![(fill as f64).to_bits(); d];
            match owner[p] {
                None if row != identity => return Err(format!("seed {seed}: non-mention row {p} is not identity")),
                Some(i) => {
                    let mention = &mentions[i];
                    let first: Vec<u64> = t.row(mention.start).iter().map(|x| x.to_bits()).collect();
                    if row != first {
                        return Err(format!("seed {seed}: rows of mention {i} differ"));
                    }
                    if null[mention.slot] && row != identity {
                        return Err(format!("seed {seed}: null entity row {p} is not identity"));
                    }
                }
                None => {}
            }
        }
    }
    Ok(())
}

/// A one-token QA example with no annotations.
pub fn blank_example(doc_id: &str) -> kala_core::corpus::TaskExample {
    kala_core::corpus::TaskExample {
        doc_id: doc_id.to_string(),
        token_ids: vec![0],
        tokens: vec!["x".into()],
        context_range: (0, 1),
        mentions: Vec::new(),
        entities: Vec::new(),
        memory_rows: Vec::new(),
        kg: KnowledgeGraphView { nodes: Vec::new(), edges: Vec::new(), num_targets: 0 },
        payload: kala_core::corpus::Payload::Span { start: 0, end: 0 },
    }
}
