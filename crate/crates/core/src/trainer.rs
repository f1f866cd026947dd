//! Mini-batch training under KvsAll, 1vsAll and negative sampling, all
//! with the binary cross-entropy loss, plus a learning-rate × dimension
//! grid search.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingReport};
use crate::kg::{kvsall_targets, onevsall_targets, sample_negatives, KnowledgeGraph, Split, TailIndex, Triple};
use crate::model::{Model, ModelSpec};
use crate::optim::{clip_grad_norm, AdamState};
use crate::params::GradStore;
use crate::tensor::{softplus, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    KvsAll,
    OneVsAll,
    NegSample(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::KvsAll => write!(f, "kvsall"),
            Strategy::OneVsAll => write!(f, "1vsall"),
            Strategy::NegSample(k) => write!(f, "negsample:{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `kvsall`, `1vsall` or `negsample:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "kvsall" => Ok(Strategy::KvsAll),
            "1vsall" | "onevsall" => Ok(Strategy::OneVsAll),
            _ => {
                let k = lower
                    .strip_prefix("negsample:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown training strategy {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config("negative sample count must be at least 1".into()));
                }
                Ok(Strategy::NegSample(k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm cap, applied to byte-mode models only.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::KvsAll,
            lr: 0.01,
            epochs: 500,
            batch_size: 256,
            l2: 0.0,
            label_smoothing: 0.0,
            clip_norm: Some(10.0),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be non-negative", self.l2)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        if let Strategy::NegSample(0) = self.strategy {
            return Err(Error::Config("negative sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reference binary cross-entropy: mean of `softplus(z) - y z` over all
/// cells, which equals `-[y log σ(z) + (1-y) log(1-σ(z))]`.
pub fn bce_loss(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    if logits.shape() != labels.shape() {
        return Err(crate::error::shape_err("bce_loss", logits.shape(), labels.shape()));
    }
    if labels.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::Contract("labels must lie in [0, 1]".into()));
    }
    let n = logits.len().max(1) as f64;
    Ok(logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Optimizer state, gradient buffers and the run's random stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: AdamState,
    grads: GradStore,
    rng: ChaCha8Rng,
    train_index: TailIndex,
}

impl Trainer {
    pub fn new(model: &Model, g: &KnowledgeGraph, cfg: TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(&model.params),
            grads: GradStore::new(&model.params),
            train_index: g.tail_index(&[Split::Train]),
            cfg,
            rng,
        })
    }

    pub fn epoch(&mut self, model: &mut Model, g: &KnowledgeGraph) -> Result<f64> {
        match self.cfg.strategy {
            Strategy::KvsAll => self.epoch_kvsall(model, g),
            Strategy::OneVsAll => self.epoch_1vsall(model, g),
            Strategy::NegSample(k) => self.epoch_negsample(model, g, k),
        }
    }

    fn smooth(&self, mut labels: Tensor, width: usize) -> Tensor {
        let eps = self.cfg.label_smoothing;
        if eps > 0.0 {
            let floor = eps / width as f64;
            labels
                .data_mut()
                .iter_mut()
                .for_each(|y| *y = (1.0 - eps) * *y + floor);
        }
        labels
    }

    /// forward → loss → backward → (clip) → Adam.
    fn step<F>(&mut self, model: &mut Model, labels: &Tensor, forward: F) -> Result<f64>
    where
        F: FnOnce(&Model, &mut Tape<'_>, &mut ChaCha8Rng) -> Result<Var>,
    {
        self.grads.zero();
        let loss = {
            let mut tape = Tape::with_params(&model.params);
            let logits = forward(model, &mut tape, &mut self.rng)?;
            let loss = tape.bce_with_logits(logits, labels)?;
            tape.backward(loss, &mut self.grads)?;
            tape.value(loss).data()[0]
        };
        if let (true, Some(c)) = (model.is_byte(), self.cfg.clip_norm) {
            clip_grad_norm(&mut self.grads, c);
        }
        self.adam
            .step(&mut model.params, &self.grads, self.cfg.lr, self.cfg.l2)?;
        Ok(loss)
    }

    pub fn epoch_kvsall(&mut self, model: &mut Model, g: &KnowledgeGraph) -> Result<f64> {
        require_augmented(g)?;
        let mut pairs = g.train_pairs();
        pairs.shuffle(&mut self.rng);
        let n = g.num_entities();
        let mut total = 0.0;
        let mut batches = 0;
        for batch in pairs.chunks(self.cfg.batch_size) {
            let labels = self.smooth(kvsall_targets(g, &self.train_index, batch).labels, n);
            total += self.step(model, &labels, |m, tape, rng| {
                m.forward_all_tails(tape, batch, Some(rng))
            })?;
            batches += 1;
        }
        Ok(mean(total, batches))
    }

    pub fn epoch_1vsall(&mut self, model: &mut Model, g: &KnowledgeGraph) -> Result<f64> {
        require_augmented(g)?;
        let mut triples = g.split(Split::Train).to_vec();
        triples.shuffle(&mut self.rng);
        let n = g.num_entities();
        let mut total = 0.0;
        let mut batches = 0;
        for batch in triples.chunks(self.cfg.batch_size) {
            let targets = onevsall_targets(g, batch)?;
            let labels = self.smooth(targets.labels, n);
            let pairs = targets.pairs;
            total += self.step(model, &labels, |m, tape, rng| {
                m.forward_all_tails(tape, &pairs, Some(rng))
            })?;
            batches += 1;
        }
        Ok(mean(total, batches))
    }

    pub fn epoch_negsample(&mut self, model: &mut Model, g: &KnowledgeGraph, k: usize) -> Result<f64> {
        let mut triples = g.split(Split::Train).to_vec();
        triples.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in triples.chunks(self.cfg.batch_size) {
            let mut all: Vec<Triple> = batch.to_vec();
            for &t in batch {
                all.extend(sample_negatives(g, t, k, &mut self.rng)?);
            }
            let mut y = vec![0.0; all.len()];
            y[..batch.len()].iter_mut().for_each(|v| *v = 1.0);
            let labels = self.smooth(Tensor::vector(y), 2);
            total += self.step(model, &labels, |m, tape, rng| {
                m.forward_triples(tape, &all, Some(rng))
            })?;
            batches += 1;
        }
        Ok(mean(total, batches))
    }
}

fn mean(total: f64, batches: usize) -> f64 {
    if batches == 0 {
        0.0
    } else {
        total / batches as f64
    }
}

fn require_augmented(g: &KnowledgeGraph) -> Result<()> {
    if g.is_augmented() {
        Ok(())
    } else {
        Err(Error::Contract("this strategy requires reciprocal triples".into()))
    }
}

/// Builds a model from `spec` and trains it for `cfg.epochs` epochs. One
/// seeded generator drives initialization, shuffling, sampling and dropout.
pub fn fit(
    spec: &ModelSpec,
    g: &KnowledgeGraph,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(spec, g, &mut rng)?;
    let mut trainer = Trainer::new(&model, g, cfg.clone(), rng)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let loss = trainer.epoch(&mut model, g)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss} at epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

pub const PAPER_LRS: [f64; 3] = [0.1, 0.01, 0.011];
pub const PAPER_DIMS: [usize; 2] = [32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub dim: usize,
    pub valid: RankingReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridReport {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }
}

/// Index of the highest validation MRR; ties go to the lower learning
/// rate, then the lower dimension.
pub fn select_best(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).min_by(|&a, &b| {
        let (x, y) = (&cells[a], &cells[b]);
        y.valid
            .mrr
            .total_cmp(&x.valid.mrr)
            .then(x.lr.total_cmp(&y.lr))
            .then(x.dim.cmp(&y.dim))
    })
}

/// Trains one model per `(lr, dim)` cell and ranks them on the validation
/// split.
pub fn grid_search(
    g: &KnowledgeGraph,
    spec: &ModelSpec,
    base: &TrainConfig,
    lrs: &[f64],
    dims: &[usize],
    mut on_cell: impl FnMut(&GridCell),
) -> Result<GridReport> {
    if lrs.is_empty() || dims.is_empty() {
        return Err(Error::Config("grid search needs at least one lr and one dim".into()));
    }
    if g.split(Split::Valid).is_empty() {
        return Err(Error::Contract("grid search needs a validation split".into()));
    }
    let mut cells = Vec::new();
    for &lr in lrs {
        for &dim in dims {
            let spec = ModelSpec { dim, ..spec.clone() };
            let cfg = TrainConfig { lr, ..base.clone() };
            let (model, _) = fit(&spec, g, &cfg, |_| {})?;
            let cell = GridCell {
                lr,
                dim,
                valid: evaluate(&model, g, Split::Valid)?,
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let best = select_best(&cells).expect("grid is non-empty");
    Ok(GridReport { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::Family;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_string_triples([
            (Split::Train, &[("a", "r", "b"), ("a", "r", "c"), ("b", "s", "c")][..]),
            (Split::Valid, &[("c", "s", "a")][..]),
            (Split::Test, &[("b", "r", "a")][..]),
        ])
        .add_reciprocals()
        .unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let z = Tensor::zeros(&[2, 3]);
        assert!((bce_loss(&z, &Tensor::zeros(&[2, 3])).unwrap() - 2f64.ln()).abs() < 1e-15);
        let logits = Tensor::vector(vec![1e4, -1e4]);
        let y = Tensor::vector(vec![1.0, 0.0]);
        assert!(bce_loss(&logits, &y).unwrap() < 1e-12);
        let one = bce_loss(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((one - 0.1269280110429725).abs() < 1e-12);
        let pm = bce_loss(&Tensor::vector(vec![10.0, -10.0]), &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(pm < 1e-4);
        assert!(bce_loss(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![2.0])).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("KvsAll".parse::<Strategy>().unwrap(), Strategy::KvsAll);
        assert_eq!("1vsall".parse::<Strategy>().unwrap(), Strategy::OneVsAll);
        assert_eq!("negsample:3".parse::<Strategy>().unwrap(), Strategy::NegSample(3));
        assert!("negsample:0".parse::<Strategy>().is_err());
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!(Strategy::NegSample(4).to_string().parse::<Strategy>().unwrap(), Strategy::NegSample(4));
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let g = toy();
        let spec = ModelSpec::new(Family::DistMult, 4);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (model, logs) = fit(&spec, &g, &cfg, |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = Model::new(&spec, &g, &mut rng).unwrap();
        assert!(logs.is_empty());
        for id in model.params.ids() {
            assert_eq!(model.params.get(id), fresh.params.get(id));
        }
    }

    #[test]
    fn every_strategy_reduces_loss_and_is_deterministic() {
        let g = toy();
        for strategy in [Strategy::KvsAll, Strategy::OneVsAll, Strategy::NegSample(2)] {
            let spec = ModelSpec::new(Family::ComplEx, 8);
            let cfg = TrainConfig { strategy, epochs: 30, lr: 0.05, seed: 3, ..TrainConfig::default() };
            let (m1, l1) = fit(&spec, &g, &cfg, |_| {}).unwrap();
            let (m2, l2) = fit(&spec, &g, &cfg, |_| {}).unwrap();
            assert!(l1.last().unwrap().loss < l1[0].loss, "{strategy}");
            assert_eq!(l1.last().unwrap().loss, l2.last().unwrap().loss);
            for id in m1.params.ids() {
                assert_eq!(m1.params.get(id), m2.params.get(id));
            }
        }
    }

    #[test]
    fn negsample_on_single_triple() {
        let g = KnowledgeGraph::from_string_triples([(Split::Train, &[("x", "r", "y")][..])]);
        let spec = ModelSpec::new(Family::DistMult, 4);
        let cfg = TrainConfig { strategy: Strategy::NegSample(1), epochs: 50, lr: 0.05, ..TrainConfig::default() };
        let (_, logs) = fit(&spec, &g, &cfg, |_| {}).unwrap();
        assert!(logs.last().unwrap().loss < logs[0].loss);
    }

    #[test]
    fn onevsall_loss_dominates_kvsall_on_multi_tail_pair() {
        let g = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::new(&ModelSpec::new(Family::DistMult, 4), &g, &mut rng).unwrap();
        let pairs = [(0usize, 0usize)];
        let mut tape = Tape::with_params(&model.params);
        let logits = model.forward_all_tails(&mut tape, &pairs, None).unwrap();
        let logits = tape.value(logits).clone();
        let index = g.tail_index(&[Split::Train]);
        let multi = kvsall_targets(&g, &index, &pairs).labels;
        let tr = g.split(Split::Train);
        let single = onevsall_targets(&g, &tr[..2]).unwrap().labels;
        let both = Tensor::new(&[2, 3], [logits.data(), logits.data()].concat()).unwrap();
        let kv = bce_loss(&logits, &multi).unwrap();
        let ova = bce_loss(&both, &single).unwrap();
        // Each 1vsAll row is the KvsAll row with one true tail relabelled 0.
        let relabel: f64 = (0..2)
            .map(|i| {
                let z = logits.data()[tr[1 - i].tail];
                z / 3.0
            })
            .sum::<f64>()
            / 2.0;
        assert!((ova - (kv + relabel)).abs() < 1e-12);
    }

    #[test]
    fn grid_selection_rules() {
        let cell = |lr, dim, mrr| GridCell {
            lr,
            dim,
            valid: RankingReport { split: "valid".into(), mrr, h1: 0.0, h3: 0.0, h10: 0.0, n: 1 },
        };
        assert_eq!(select_best(&[cell(0.1, 32, 0.5)]), Some(0));
        let cells = [cell(0.1, 32, 0.5), cell(0.01, 64, 0.5), cell(0.01, 32, 0.5), cell(0.011, 32, 0.4)];
        assert_eq!(select_best(&cells), Some(2));
        assert_eq!(select_best(&[cell(0.1, 64, 0.6), cell(0.01, 32, 0.5)]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn grid_search_covers_every_cell() {
        let g = toy();
        let spec = ModelSpec::new(Family::DistMult, 4);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let report = grid_search(&g, &spec, &cfg, &PAPER_LRS, &[4, 8], |_| {}).unwrap();
        assert_eq!(report.cells.len(), 6);
        assert!(grid_search(&g, &spec, &cfg, &[], &[4], |_| {}).is_err());
    }
}
