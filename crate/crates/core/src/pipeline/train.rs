use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{ranking_loss_masked, CoarseModel};
use crate::error::{Error, Result};
use crate::fine::{
    extract_matches, ground_truth, is_matcher_param, matcher_loss, offset_loss, FineInput, FineModel, Match,
    MatchForward,
};
use crate::language::WordGroups;
use crate::scene::Cell;
use crate::tensor::{Tape, Tensor, Var};

use super::augment::{augment_batch, Sample};
use super::config::{Config, StageConfig};
use super::data::{derive_seed, Dataset};
use super::eval::{eval_coarse, eval_matcher, eval_regression, MatcherMetrics, RegressionMetrics, RECALL_KS};
use super::optim::{lr_schedule, Adam};

const CROSS_PREFIX: &str = "fine.cross.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEpoch {
    pub epoch: usize,
    pub lr: f64,
    /// Mean ranking loss per step.
    pub train_loss: f64,
    /// `(k, recall)` on the validation queries.
    pub val_recall: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct CoarseRun {
    pub model: CoarseModel,
    pub optimizer: Adam,
    /// Parameters of the epoch with the best validation recall@5.
    pub best: CoarseModel,
    pub history: Vec<CoarseEpoch>,
}

/// Groups training queries into batches whose ground-truth cells are
/// pairwise distinct. Batches smaller than `min` are dropped.
pub fn distinct_cell_batches(order: &[usize], cell_of: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    let mut pending: VecDeque<usize> = order.iter().copied().collect();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(size);
        let mut used = HashSet::new();
        let mut rest = VecDeque::with_capacity(pending.len());
        while let Some(i) = pending.pop_front() {
            if batch.len() < size && used.insert(cell_of[i]) {
                batch.push(i);
            } else {
                rest.push_back(i);
            }
        }
        pending = rest;
        if batch.len() < min {
            break;
        }
        out.push(batch);
    }
    out
}

fn hint_groups(s: &Sample) -> Vec<&WordGroups> {
    s.hints.iter().map(|h| &h.groups).collect()
}

fn coarse_step(model: &mut CoarseModel, opt: &mut Adam, raw: &[Sample], aug: &[Sample], alpha: f64) -> Result<f64> {
    let b = raw.len();
    let negatives: Vec<bool> = (0..b * b)
        .map(|i| {
            let (m, n) = (i / b, i % b);
            m != n && !raw[m].cell.contains(raw[n].target)
        })
        .collect();
    let mut tape = Tape::new();
    let p = tape.bind(&model.params);
    let cells: Vec<&Cell> = aug.iter().map(|s| &s.cell).collect();
    let queries: Vec<Vec<&WordGroups>> = aug.iter().map(hint_groups).collect();
    let c = model.encode_cells(&mut tape, &p, &cells)?;
    let q = model.encode_queries(&mut tape, &p, &queries)?;
    let loss = ranking_loss_masked(&mut tape, c, q, alpha, &negatives)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("ranking loss became {value}")));
    }
    tape.backward(loss)?;
    model.params.collect_grads(&tape, &p);
    opt.step(&mut model.params, |_| true)?;
    model.params.zero_grads();
    Ok(value)
}

/// Trains the retrieval model on the training queries, each paired with its
/// nearest-centre positive cell.
pub fn train_coarse(ds: &Dataset, cfg: &Config, on_epoch: &mut dyn FnMut(&CoarseEpoch)) -> Result<CoarseRun> {
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Config("coarse training needs non-empty train and val splits".into()));
    }
    let stage = &cfg.coarse_train;
    let mut model = CoarseModel::new(cfg.coarse.clone(), derive_seed(cfg.seed, 10))?;
    let mut opt = Adam::new(stage.lr, stage.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let samples: Vec<Sample> = ds.train.iter().map(|q| Sample::new(q, ds.gt_cell(q))).collect();
    let cell_of: Vec<usize> = samples.iter().map(|s| s.cell.id).collect();
    let all_cells = ds.all_cells();
    let mut history = Vec::with_capacity(stage.epochs);
    let mut best = (f64::NEG_INFINITY, model.clone());
    for epoch in 0..stage.epochs {
        opt.lr = lr_schedule(epoch, stage.lr, stage.decay_epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let batches = distinct_cell_batches(&order, &cell_of, stage.batch, 2);
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let raw: Vec<Sample> = batch.iter().map(|&i| samples[i].clone()).collect();
            let aug_seed = derive_seed(cfg.seed, 1_000_000 + (epoch * 100_000 + step) as u64);
            let aug = augment_batch(&raw, cfg.augment, aug_seed)?;
            total += coarse_step(&mut model, &mut opt, &raw, &aug, cfg.alpha)?;
        }
        let val_recall = eval_coarse(&model, &ds.val, &all_cells, &RECALL_KS)?;
        let r5 = val_recall.iter().find(|r| r.0 == 5).map_or(0.0, |r| r.1);
        if r5 > best.0 {
            best = (r5, model.clone());
        }
        let log = CoarseEpoch {
            epoch,
            lr: opt.lr,
            train_loss: total / batches.len().max(1) as f64,
            val_recall,
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok(CoarseRun {
        model,
        optimizer: opt,
        best: best.1,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEpoch {
    /// `matcher`, `regressor` or `joint`.
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_matcher: MatcherMetrics,
    pub val_regression: Option<RegressionMetrics>,
}

#[derive(Clone, Debug)]
pub struct FineRun {
    pub model: FineModel,
    pub optimizer: Adam,
    pub history: Vec<FineEpoch>,
}

struct FineBatch<'a> {
    inputs: Vec<FineInput<'a>>,
    samples: &'a [Sample],
}

fn fine_batch<'a>(model: &FineModel, aug: &'a [Sample], seed: u64) -> Result<FineBatch<'a>> {
    let mut inputs = Vec::with_capacity(aug.len());
    for (k, s) in aug.iter().enumerate() {
        inputs.push(FineInput {
            cell: &s.cell,
            slots: model.pad(&s.cell, derive_seed(seed, k as u64))?,
            hints: hint_groups(s),
        });
    }
    Ok(FineBatch { inputs, samples: aug })
}

fn mean_of(tape: &mut Tape, terms: Vec<Var>) -> Result<Option<Var>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / n as f64)))
}

fn matcher_terms(tape: &mut Tape, batch: &FineBatch, fwd: &[MatchForward]) -> Result<Vec<Var>> {
    let mut terms = Vec::with_capacity(fwd.len());
    for ((input, s), f) in batch.inputs.iter().zip(batch.samples).zip(fwd) {
        let gt = ground_truth(input.cell, &input.slots, &s.gt_ids());
        terms.push(matcher_loss(tape, f.plan, &gt.pairs, &gt.unmatched_instances, &gt.unmatched_hints)?);
    }
    Ok(terms)
}

/// Offset regression loss over the given `(hint, slot)` pairs of each sample.
fn regression_terms(
    tape: &mut Tape,
    p: &[Var],
    model: &FineModel,
    batch: &FineBatch,
    fwd: &[MatchForward],
    pairs: &[Vec<Match>],
) -> Result<Vec<Var>> {
    let mut terms = Vec::new();
    for (((input, s), f), m) in batch.inputs.iter().zip(batch.samples).zip(fwd).zip(pairs) {
        if m.is_empty() {
            continue;
        }
        let pred = model.regress(tape, p, f, m)?;
        let truth: Vec<f64> = m
            .iter()
            .flat_map(|mm| {
                let c = input.cell.instances[input.slots[mm.instance].source].center_2d();
                [s.target[0] - c[0], s.target[1] - c[1]]
            })
            .collect();
        let truth = tape.constant(Tensor::new(vec![m.len(), 2], truth)?);
        terms.push(offset_loss(tape, pred, truth)?);
    }
    Ok(terms)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Matcher,
    Regressor,
    Joint,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Matcher => "matcher",
            Phase::Regressor => "regressor",
            Phase::Joint => "joint",
        }
    }

    fn trains(self, name: &str) -> bool {
        match self {
            Phase::Matcher => is_matcher_param(name),
            Phase::Regressor => !is_matcher_param(name),
            Phase::Joint => true,
        }
    }
}

fn fine_step(model: &mut FineModel, opt: &mut Adam, aug: &[Sample], phase: Phase, pad: u64) -> Result<Option<f64>> {
    let batch = fine_batch(model, aug, pad)?;
    let cross = model.config.cross_attention;
    let trains = |n: &str| phase.trains(n) && (cross || !n.starts_with(CROSS_PREFIX));
    let mut tape = Tape::new();
    let p = tape.bind_with(&model.params, trains);
    let fwd = model.match_forward(&mut tape, &p, &batch.inputs)?;
    let loss = match phase {
        Phase::Matcher => {
            let terms = matcher_terms(&mut tape, &batch, &fwd)?;
            mean_of(&mut tape, terms)?
        }
        Phase::Regressor => {
            let matches: Vec<Vec<Match>> = fwd
                .iter()
                .map(|f| extract_matches(tape.value(f.plan), model.config.threshold))
                .collect();
            let terms = regression_terms(&mut tape, &p, model, &batch, &fwd, &matches)?;
            mean_of(&mut tape, terms)?
        }
        Phase::Joint => {
            let m_terms = matcher_terms(&mut tape, &batch, &fwd)?;
            let gt_pairs: Vec<Vec<Match>> = batch
                .inputs
                .iter()
                .zip(batch.samples)
                .map(|(input, s)| {
                    ground_truth(input.cell, &input.slots, &s.gt_ids())
                        .pairs
                        .iter()
                        .map(|&(hint, instance)| Match {
                            hint,
                            instance,
                            confidence: 1.0,
                        })
                        .collect()
                })
                .collect();
            let r_terms = regression_terms(&mut tape, &p, model, &batch, &fwd, &gt_pairs)?;
            let m = mean_of(&mut tape, m_terms)?;
            let r = mean_of(&mut tape, r_terms)?;
            match (m, r) {
                (Some(m), Some(r)) => Some(tape.add(m, r)?),
                (m, r) => m.or(r),
            }
        }
    };
    let Some(loss) = loss else {
        return Ok(None);
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("{} loss became {value}", phase.name())));
    }
    tape.backward(loss)?;
    model.params.collect_grads(&tape, &p);
    opt.step(&mut model.params, trains)?;
    model.params.zero_grads();
    Ok(Some(value))
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut FineModel,
    ds: &Dataset,
    cfg: &Config,
    samples: &[Sample],
    stage: &StageConfig,
    phase: Phase,
    history: &mut Vec<FineEpoch>,
    on_epoch: &mut dyn FnMut(&FineEpoch),
) -> Result<Adam> {
    let tag = match phase {
        Phase::Matcher => 20,
        Phase::Regressor => 30,
        Phase::Joint => 40,
    };
    let mut opt = Adam::new(stage.lr, stage.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag));
    for epoch in 0..stage.epochs {
        opt.lr = lr_schedule(epoch, stage.lr, stage.decay_epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, chunk) in order.chunks(stage.batch).enumerate() {
            let raw: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let seed = derive_seed(cfg.seed, tag * 10_000_000 + (epoch * 100_000 + step) as u64);
            let aug = augment_batch(&raw, cfg.augment, seed)?;
            if let Some(v) = fine_step(model, &mut opt, &aug, phase, derive_seed(seed, 7))? {
                total += v;
                steps += 1;
            }
        }
        let val_regression = match phase {
            Phase::Matcher => None,
            _ => Some(eval_regression(model, ds, &ds.val)?),
        };
        let log = FineEpoch {
            phase: phase.name().into(),
            epoch,
            lr: opt.lr,
            train_loss: total / steps.max(1) as f64,
            val_matcher: eval_matcher(model, ds, &ds.val)?,
            val_regression,
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok(opt)
}

/// Trains the fine stage on ground-truth cells: the matcher first, then the
/// cross-attention and regressor with the matcher frozen. With `cfg.joint`
/// both are optimised together for the matcher schedule instead.
pub fn train_fine(ds: &Dataset, cfg: &Config, on_epoch: &mut dyn FnMut(&FineEpoch)) -> Result<FineRun> {
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Config("fine training needs non-empty train and val splits".into()));
    }
    let mut model = FineModel::new(cfg.fine.clone(), derive_seed(cfg.seed, 12))?;
    let samples: Vec<Sample> = ds.train.iter().map(|q| Sample::new(q, ds.gt_cell(q))).collect();
    let mut history = Vec::new();
    let optimizer = if cfg.joint {
        run_phase(&mut model, ds, cfg, &samples, &cfg.matcher_train, Phase::Joint, &mut history, on_epoch)?
    } else {
        run_phase(&mut model, ds, cfg, &samples, &cfg.matcher_train, Phase::Matcher, &mut history, on_epoch)?;
        run_phase(&mut model, ds, cfg, &samples, &cfg.regressor_train, Phase::Regressor, &mut history, on_epoch)?
    };
    Ok(FineRun {
        model,
        optimizer,
        history,
    })
}

/// Trains only the regressor half of an existing model with the matcher
/// frozen.
pub fn train_regressor(model: &mut FineModel, ds: &Dataset, cfg: &Config, on_epoch: &mut dyn FnMut(&FineEpoch)) -> Result<Vec<FineEpoch>> {
    let samples: Vec<Sample> = ds.train.iter().map(|q| Sample::new(q, ds.gt_cell(q))).collect();
    let mut history = Vec::new();
    run_phase(model, ds, cfg, &samples, &cfg.regressor_train, Phase::Regressor, &mut history, on_epoch)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_distinct_cells() {
        let cell_of = vec![0, 0, 1, 2, 0, 3, 1, 4];
        let order: Vec<usize> = (0..8).collect();
        let b = distinct_cell_batches(&order, &cell_of, 3, 2);
        for batch in &b {
            let mut cells: Vec<usize> = batch.iter().map(|&i| cell_of[i]).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), batch.len());
        }
        assert_eq!(b[0], vec![0, 2, 3]);
        let used: usize = b.iter().map(Vec::len).sum();
        assert_eq!(used, 8);
    }
}
