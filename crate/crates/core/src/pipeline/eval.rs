use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{retrieve_topk, CellIndex, CoarseModel};
use crate::error::{Error, Result};
use crate::fine::{extract_matches, ground_truth, is_correct, CellEstimate, FineInput, FineModel};
use crate::language::WordGroups;
use crate::scene::{Cell, QuerySample};
use crate::tensor::Tape;

use super::data::{derive_seed, dist, Dataset};

pub const RECALL_KS: [usize; 3] = [1, 3, 5];
pub const LOCALIZATION_KS: [usize; 3] = [1, 5, 10];
pub const LOCALIZATION_EPS: [f64; 3] = [5.0, 10.0, 15.0];

/// Padding seed used whenever a query is localised inside a cell.
pub fn pad_seed(query_id: usize, cell_id: usize) -> u64 {
    derive_seed(query_id as u64, cell_id as u64 + 0x100)
}

fn groups(q: &QuerySample) -> Vec<&WordGroups> {
    q.hints.iter().map(|h| &h.groups).collect()
}

/// Top-`k` cell ids for every query, best first.
pub fn rank_cells(model: &CoarseModel, queries: &[QuerySample], cells: &[&Cell], k: usize) -> Result<Vec<Vec<usize>>> {
    let index = CellIndex::build(model, cells)?;
    let lists: Vec<Vec<&WordGroups>> = queries.iter().map(groups).collect();
    let emb = model.query_embeddings(&lists)?;
    if emb.iter().flatten().any(|v| !v.is_finite()) || index.embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(emb.par_iter().map(|e| retrieve_topk(e, &index, k)).collect())
}

/// Fraction of queries with a positive among the first `k` ranked cells.
pub fn recall_at(rankings: &[Vec<usize>], queries: &[QuerySample], k: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(queries)
        .filter(|(r, q)| r.iter().take(k).any(|id| q.positive_cell_ids.contains(id)))
        .count();
    hits as f64 / queries.len() as f64
}

/// Recall@k for each `k` in `ks`.
pub fn eval_coarse(model: &CoarseModel, queries: &[QuerySample], cells: &[&Cell], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let ranks = rank_cells(model, queries, cells, kmax)?;
    Ok(ks.iter().map(|&k| (k, recall_at(&ranks, queries, k))).collect())
}

/// Monte-Carlo recall@k of a ranking that orders `n_cells` cells uniformly
/// at random.
pub fn random_recall(queries: &[QuerySample], n_cells: usize, k: usize, trials: usize, seed: u64) -> f64 {
    if queries.is_empty() || n_cells == 0 || trials == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for t in 0..trials {
        let q = &queries[t % queries.len()];
        let pos = q.positive_cell_ids.len().min(n_cells);
        // positives occupy slots 0..pos of a uniformly permuted list
        if sample(&mut rng, n_cells, k.min(n_cells)).iter().any(|i| i < pos) {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatcherMetrics {
    pub precision: f64,
    pub recall: f64,
    pub emitted: usize,
    pub correct: usize,
    pub ground_truth: usize,
}

impl MatcherMetrics {
    /// Micro-averaged; precision is 0 when nothing was emitted.
    pub fn from_counts(emitted: usize, correct: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            precision: ratio(correct, emitted),
            recall: ratio(correct, ground_truth),
            emitted,
            correct,
            ground_truth,
        }
    }
}

/// Matches every query against its ground-truth cell.
pub fn eval_matcher(model: &FineModel, ds: &Dataset, queries: &[QuerySample]) -> Result<MatcherMetrics> {
    let counts: Vec<(usize, usize, usize)> = queries
        .par_chunks(16)
        .map(|chunk| {
            let mut tape = Tape::new();
            let p = tape.bind_frozen(&model.params);
            let mut inputs = Vec::with_capacity(chunk.len());
            for q in chunk {
                let cell = ds.gt_cell(q);
                inputs.push(FineInput {
                    cell,
                    slots: model.pad(cell, pad_seed(q.id, cell.id))?,
                    hints: groups(q),
                });
            }
            let fwd = model.match_forward(&mut tape, &p, &inputs)?;
            let mut acc = (0, 0, 0);
            for ((q, input), f) in chunk.iter().zip(&inputs).zip(&fwd) {
                let matches = extract_matches(tape.value(f.plan), model.config.threshold);
                let gt = ground_truth(input.cell, &input.slots, &q.gt_instance_ids);
                acc.0 += matches.len();
                acc.1 += matches
                    .iter()
                    .filter(|m| is_correct(m, input.cell, &input.slots, &q.gt_instance_ids))
                    .count();
                acc.2 += gt.pairs.len();
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (e, c, g) = counts.iter().fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(MatcherMetrics::from_counts(e, c, g))
}

/// Fine-stage output for one query over its ranked cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub query_id: usize,
    pub target: [f64; 2],
    pub cells: Vec<CellEstimate>,
}

/// Runs the fine stage on each of the given cells.
pub fn localize_query(model: &FineModel, ds: &Dataset, q: &QuerySample, cell_ids: &[usize]) -> Result<QueryPrediction> {
    let g = groups(q);
    let cells = cell_ids
        .iter()
        .map(|&id| {
            let cell = ds.cell(id).ok_or_else(|| Error::Data(format!("unknown cell {id}")))?;
            model.localize(&g, cell, pad_seed(q.id, id))
        })
        .collect::<Result<_>>()?;
    Ok(QueryPrediction {
        query_id: q.id,
        target: q.target,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    /// `(k, ε, recall)`.
    pub recall: Vec<(usize, f64, f64)>,
}

/// Success under `(k, ε)`: any of the first `k` positions lies within `ε`.
pub fn localization_recall(positions: &[Vec<[f64; 2]>], targets: &[[f64; 2]], ks: &[usize], eps: &[f64]) -> LocalizationMetrics {
    let n = targets.len().max(1) as f64;
    let mut recall = Vec::new();
    for &k in ks {
        for &e in eps {
            let hits = positions
                .iter()
                .zip(targets)
                .filter(|(ps, t)| ps.iter().take(k).any(|p| dist(*p, **t) < e))
                .count();
            recall.push((k, e, hits as f64 / n));
        }
    }
    LocalizationMetrics { recall }
}

impl LocalizationMetrics {
    pub fn get(&self, k: usize, eps: f64) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == k && r.1 == eps).map(|r| r.2)
    }
}

/// Fine predictions for every query over its ranked cells.
pub fn predict_all(model: &FineModel, ds: &Dataset, queries: &[QuerySample], rankings: &[Vec<usize>]) -> Result<Vec<QueryPrediction>> {
    queries
        .par_iter()
        .zip(rankings)
        .map(|(q, r)| localize_query(model, ds, q, r))
        .collect()
}

pub fn eval_localization(predictions: &[QueryPrediction], ks: &[usize], eps: &[f64]) -> LocalizationMetrics {
    let positions: Vec<Vec<[f64; 2]>> = predictions
        .iter()
        .map(|p| p.cells.iter().map(|c| c.prediction.position).collect())
        .collect();
    let targets: Vec<[f64; 2]> = predictions.iter().map(|p| p.target).collect();
    localization_recall(&positions, &targets, ks, eps)
}

/// Localisation recall when every retrieved cell predicts its own centre.
pub fn cell_center_recall(ds: &Dataset, queries: &[QuerySample], rankings: &[Vec<usize>], ks: &[usize], eps: &[f64]) -> LocalizationMetrics {
    let positions: Vec<Vec<[f64; 2]>> = rankings
        .iter()
        .map(|r| r.iter().filter_map(|id| ds.cell(*id)).map(Cell::center).collect())
        .collect();
    let targets: Vec<[f64; 2]> = queries.iter().map(|q| q.target).collect();
    localization_recall(&positions, &targets, ks, eps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// Mean 2D error of the fine prediction on the ground-truth cell.
    pub mean_error: f64,
    /// Mean 2D error of predicting the ground-truth cell centre.
    pub cell_center_error: f64,
    /// Fraction of queries with no surviving match.
    pub fallback_rate: f64,
}

pub fn eval_regression(model: &FineModel, ds: &Dataset, queries: &[QuerySample]) -> Result<RegressionMetrics> {
    let rows: Vec<(f64, f64, bool)> = queries
        .par_iter()
        .map(|q| {
            let cell = ds.gt_cell(q);
            let est = model.localize(&groups(q), cell, pad_seed(q.id, cell.id))?;
            Ok((dist(est.prediction.position, q.target), dist(cell.center(), q.target), est.prediction.fallback))
        })
        .collect::<Result<_>>()?;
    let n = rows.len().max(1) as f64;
    Ok(RegressionMetrics {
        mean_error: rows.iter().map(|r| r.0).sum::<f64>() / n,
        cell_center_error: rows.iter().map(|r| r.1).sum::<f64>() / n,
        fallback_rate: rows.iter().filter(|r| r.2).count() as f64 / n,
    })
}
