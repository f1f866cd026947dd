mod common;

use byte_kge::eval::{evaluate, ranks, RankingReport};
use byte_kge::kg::Split;
use byte_kge::model::{Model, ModelSpec};
use byte_kge::scorer::Family;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer-valued embeddings make every score exact, so ties are real and
/// both code paths see identical numbers.
fn integer_model(rng: &mut ChaCha8Rng, g: &byte_kge::kg::KnowledgeGraph, family: Family) -> Model {
    let mut model = Model::new(&ModelSpec::new(family, 4), g, rng).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        for x in model.params.get_mut(id).data_mut() {
            *x = f64::from(rng.gen_range(-1i8..=1));
        }
    }
    model
}

#[test]
fn evaluator_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let g = common::random_graph(&mut rng, 20, 5);
        let family = [Family::DistMult, Family::ComplEx, Family::QMult, Family::Keci][i % 4];
        let model = integer_model(&mut rng, &g, family);
        for split in Split::ALL {
            let fast = ranks(&model, &g, split).unwrap();
            let slow = common::brute_force_ranks(&model, &g, split);
            assert_eq!(fast, slow, "graph {i} split {split:?}");
            assert_eq!(
                evaluate(&model, &g, split).unwrap(),
                RankingReport::from_ranks(split.name(), &slow).unwrap()
            );
        }
    }
}

#[test]
fn evaluation_counts_both_directions() {
    let g = common::dataset("umls");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::new(&ModelSpec::new(Family::DistMult, 8), &g, &mut rng).unwrap();
    let report = evaluate(&model, &g, Split::Valid).unwrap();
    assert_eq!(report.n, 2 * 652);
    assert!(report.h1 <= report.h3 && report.h3 <= report.h10 && report.h1 <= report.mrr);
}
