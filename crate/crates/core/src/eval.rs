//! Filtered link-prediction ranking.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Split};
use crate::model::{Model, TermKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub split: String,
    pub mrr: f64,
    pub h1: f64,
    pub h3: f64,
    pub h10: f64,
    pub n: usize,
}

impl RankingReport {
    /// Aggregates a list of ranks (each ≥ 1).
    pub fn from_ranks(split: &str, ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Contract(format!("split {split} has no queries")));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            split: split.to_string(),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            h1: hits(1),
            h3: hits(3),
            h10: hits(10),
            n: ranks.len(),
        })
    }

    pub fn write_csv<W: Write>(reports: &[RankingReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RankingReport>> {
        let mut rd = csv::Reader::from_reader(input);
        rd.deserialize().map(|r| r.map_err(Error::from)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Rank of `gold` among `scores`, ignoring `filter` (the gold itself is
/// never filtered): `1 + |greater| + ⌈|equal| / 2⌉`.
pub fn rank_from_scores(scores: &[f64], gold: usize, filter: &BTreeSet<usize>) -> Result<usize> {
    let s = *scores.get(gold).ok_or(Error::OutOfRange {
        what: "gold entity",
        index: gold,
        size: scores.len(),
    })?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("score of gold entity {gold}")));
    }
    let (mut greater, mut equal) = (0usize, 0usize);
    for (j, &x) in scores.iter().enumerate() {
        if j == gold || filter.contains(&j) {
            continue;
        }
        if x > s {
            greater += 1;
        } else if x == s {
            equal += 1;
        }
    }
    Ok(1 + greater + equal.div_ceil(2))
}

/// Filtered rank of `gold` for the query `(h, r, ?)`.
pub fn rank_query(
    model: &Model,
    entities: &crate::tensor::Tensor,
    relations: &crate::tensor::Tensor,
    h: usize,
    r: usize,
    gold: usize,
    filter: &BTreeSet<usize>,
) -> Result<usize> {
    if h >= entities.rows() {
        return Err(Error::OutOfRange { what: "entity", index: h, size: entities.rows() });
    }
    if r >= relations.rows() {
        return Err(Error::OutOfRange { what: "relation", index: r, size: relations.rows() });
    }
    let q = model.query(entities.row(h), relations.row(r))?;
    let scores = crate::tensor::Tensor::vector(q).matmul_nt(entities)?;
    rank_from_scores(scores.data(), gold, filter)
}

/// Tail-prediction ranks for every triple of `split` (both directions,
/// since the graph carries reciprocal triples). Known tails from all
/// splits are filtered.
pub fn ranks(model: &Model, g: &KnowledgeGraph, split: Split) -> Result<Vec<usize>> {
    if !g.is_augmented() {
        return Err(Error::Contract("evaluation requires reciprocal triples".into()));
    }
    if model.entities() != g.entities() || model.relations() != g.relations() {
        return Err(Error::Contract("model vocabulary differs from the graph".into()));
    }
    let triples = g.split(split);
    if triples.is_empty() {
        return Err(Error::Contract(format!("split {} is empty", split.name())));
    }
    let index = g.tail_index(&Split::ALL);
    let (ent, rel) = model.embeddings()?;
    let queries = triples
        .iter()
        .map(|t| model.query(ent.row(t.head), rel.row(t.relation)))
        .collect::<Result<Vec<_>>>()?;
    let d = model.dim();
    let q = crate::tensor::Tensor::new(&[triples.len(), d], queries.concat())?;
    let scores = q.matmul_nt(&ent)?;
    let empty = BTreeSet::new();
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let known = index.get(&(t.head, t.relation)).unwrap_or(&empty);
            rank_from_scores(scores.row(i), t.tail, known)
        })
        .collect()
}

pub fn evaluate(model: &Model, g: &KnowledgeGraph, split: Split) -> Result<RankingReport> {
    RankingReport::from_ranks(split.name(), &ranks(model, g, split)?)
}

/// Logit of a triple given as raw strings.
pub fn score_raw_triple(model: &Model, h: &str, r: &str, t: &str) -> Result<f64> {
    let hv = model.embed_term(h, TermKind::Entity)?;
    let rv = model.embed_term(r, TermKind::Relation)?;
    let tv = model.embed_term(t, TermKind::Entity)?;
    let q = model.query(&hv, &rv)?;
    let s: f64 = q.iter().zip(&tv).map(|(a, b)| a * b).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("score of ({h}, {r}, {t})")));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_filter() -> BTreeSet<usize> {
        BTreeSet::new()
    }

    #[test]
    fn unique_best_is_rank_one() {
        assert_eq!(rank_from_scores(&[0.1, 3.0, 0.2], 1, &no_filter()).unwrap(), 1);
    }

    #[test]
    fn all_equal_five_entities_rank_three() {
        assert_eq!(rank_from_scores(&[1.0; 5], 2, &no_filter()).unwrap(), 3);
    }

    #[test]
    fn filter_removes_competitors() {
        let filter: BTreeSet<usize> = [0, 1].into();
        assert_eq!(rank_from_scores(&[5.0, 4.0, 3.0, 1.0], 2, &filter).unwrap(), 1);
        assert_eq!(rank_from_scores(&[5.0, 4.0, 3.0, 1.0], 2, &no_filter()).unwrap(), 3);
        // gold inside the filter is still ranked
        let filter: BTreeSet<usize> = [2].into();
        assert_eq!(rank_from_scores(&[5.0, 4.0, 3.0, 1.0], 2, &filter).unwrap(), 3);
    }

    #[test]
    fn report_arithmetic() {
        let r = RankingReport::from_ranks("test", &[1, 2, 4]).unwrap();
        assert!((r.mrr - 1.75 / 3.0).abs() < 1e-15);
        assert!((r.h1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.h3 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.h10, 1.0);
        let perfect = RankingReport::from_ranks("train", &[1, 1]).unwrap();
        assert_eq!((perfect.mrr, perfect.h1, perfect.h10), (1.0, 1.0, 1.0));
        assert!(RankingReport::from_ranks("x", &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![
            RankingReport::from_ranks("train", &[1, 3, 20]).unwrap(),
            RankingReport::from_ranks("test", &[2, 2]).unwrap(),
        ];
        let mut buf = Vec::new();
        RankingReport::write_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("split,mrr,h1,h3,h10,n\n"));
        assert_eq!(RankingReport::read_csv(&buf[..]).unwrap(), reports);
    }

    proptest! {
        #[test]
        fn filtered_rank_never_exceeds_raw(
            scores in prop::collection::vec(-3i32..3, 2..12),
            mask in prop::collection::vec(any::<bool>(), 12),
            gold_pick in 0usize..100,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let gold = gold_pick % scores.len();
            let filter: BTreeSet<usize> = (0..scores.len()).filter(|&i| mask[i] && i != gold).collect();
            let raw = rank_from_scores(&scores, gold, &no_filter()).unwrap();
            let filtered = rank_from_scores(&scores, gold, &filter).unwrap();
            prop_assert!(filtered <= raw);
            prop_assert!(filtered >= 1 && raw <= scores.len());
        }

        #[test]
        fn rank_invariant_under_monotone_maps(
            scores in prop::collection::vec(-3i32..3, 2..12),
            gold_pick in 0usize..100,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let gold = gold_pick % scores.len();
            let mapped: Vec<f64> = scores.iter().map(|x| (0.7 * x).exp() + 2.0).collect();
            prop_assert_eq!(
                rank_from_scores(&scores, gold, &no_filter()).unwrap(),
                rank_from_scores(&mapped, gold, &no_filter()).unwrap()
            );
        }

        #[test]
        fn report_ordering(ranks in prop::collection::vec(1usize..30, 1..40)) {
            let r = RankingReport::from_ranks("x", &ranks).unwrap();
            prop_assert!(r.h1 <= r.h3 && r.h3 <= r.h10 && r.h10 <= 1.0);
            prop_assert!(r.h1 <= r.mrr && r.mrr <= 1.0);
        }
    }
}
