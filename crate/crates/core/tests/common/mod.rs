//! Shared oracles for the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use byte_kge::kg::{KnowledgeGraph, Split};
use byte_kge::model::Model;
use byte_kge::params::{GradStore, ParamId, ParameterStore};
use byte_kge::tokenizer::BpeVocab;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn data_dir(name: &str) -> PathBuf {
    repo_root().join("data").join(name)
}

pub fn gpt2_files() -> (PathBuf, PathBuf) {
    let d = data_dir("gpt2");
    (d.join("vocab.json"), d.join("merges.txt"))
}

/// Loaded once per test binary.
pub fn gpt2() -> Arc<BpeVocab> {
    static VOCAB: OnceLock<Arc<BpeVocab>> = OnceLock::new();
    VOCAB
        .get_or_init(|| {
            let (v, m) = gpt2_files();
            Arc::new(BpeVocab::load(&v, &m).expect("GPT-2 files load"))
        })
        .clone()
}

pub fn dataset(name: &str) -> KnowledgeGraph {
    KnowledgeGraph::load(&data_dir(name))
        .expect("dataset loads")
        .add_reciprocals()
        .expect("augmentation")
}

/// Worst relative error between analytic gradients and central finite
/// differences (step 1e-4) over `coords`. The denominator is floored at
/// 1e-3 so near-zero gradients are compared absolutely.
pub fn fd_max_error(
    params: &mut ParameterStore,
    grads: &GradStore,
    coords: &[(ParamId, usize)],
    loss: impl Fn(&ParameterStore) -> f64,
) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &(id, i) in coords {
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + h;
        let up = loss(params);
        params.get_mut(id).data_mut()[i] = orig - h;
        let down = loss(params);
        params.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.grad(id)[i];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

/// Up to `per_param` random coordinates of every parameter.
pub fn sample_coords<R: Rng>(params: &ParameterStore, per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in params.ids() {
        let n = params.get(id).len();
        if n <= per_param {
            out.extend((0..n).map(|i| (id, i)));
        } else {
            out.extend((0..per_param).map(|_| (id, rng.gen_range(0..n))));
        }
    }
    out
}

/// Filtered ranks computed the slow way: score every candidate triple one
/// by one, sort, drop known true triples, and locate the gold tail.
pub fn brute_force_ranks(model: &Model, g: &KnowledgeGraph, split: Split) -> Vec<usize> {
    let known: HashSet<(usize, usize, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| g.split(s).iter().map(|t| (t.head, t.relation, t.tail)))
        .collect();
    let (ent, rel) = model.embeddings().unwrap();
    g.split(split)
        .iter()
        .map(|t| {
            let mut cands: Vec<(f64, usize)> = (0..g.num_entities())
                .filter(|&c| c == t.tail || !known.contains(&(t.head, t.relation, c)))
                .map(|c| {
                    let s = model
                        .scorer
                        .score(ent.row(t.head), rel.row(t.relation), ent.row(c))
                        .unwrap();
                    (s, c)
                })
                .collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let gold = cands.iter().find(|c| c.1 == t.tail).unwrap().0;
            let first = cands.iter().position(|c| c.0 == gold).unwrap();
            let ties = cands.iter().filter(|c| c.0 == gold).count() - 1;
            1 + first + ties.div_ceil(2)
        })
        .collect()
}

/// Random graph with entity names `e<i>` and relation names `r<j>`; every
/// split is non-empty.
pub fn random_graph<R: Rng>(rng: &mut R, max_entities: usize, max_relations: usize) -> KnowledgeGraph {
    let ne = rng.gen_range(3..=max_entities);
    let nr = rng.gen_range(1..=max_relations);
    let names_e: Vec<String> = (0..ne).map(|i| format!("e{i}")).collect();
    let names_r: Vec<String> = (0..nr).map(|i| format!("r{i}")).collect();
    let mut seen = HashSet::new();
    let mut splits: [Vec<(&str, &str, &str)>; 3] = Default::default();
    let target = rng.gen_range(6..=3 * ne);
    while seen.len() < target.min(ne * ne * nr) {
        let t = (rng.gen_range(0..ne), rng.gen_range(0..nr), rng.gen_range(0..ne));
        if seen.insert(t) {
            let s = match seen.len() {
                1 => 0,
                2 => 1,
                3 => 2,
                _ => [0, 0, 0, 1, 2][rng.gen_range(0..5)],
            };
            splits[s].push((&names_e[t.0], &names_r[t.1], &names_e[t.2]));
        }
    }
    KnowledgeGraph::from_string_triples([
        (Split::Train, &splits[0][..]),
        (Split::Valid, &splits[1][..]),
        (Split::Test, &splits[2][..]),
    ])
    .add_reciprocals()
    .unwrap()
}
