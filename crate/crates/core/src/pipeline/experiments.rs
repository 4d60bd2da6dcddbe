//! Evaluation reports and ablation runs shared by the CLI and the tests.

use crate::coarse::CoarseModel;
use crate::error::{Error, Result};
use crate::fine::{is_matcher_param, FineModel};

use super::config::Config;
use super::data::{derive_seed, Dataset};
use super::eval::{
    cell_center_recall, eval_localization, eval_matcher, eval_regression, predict_all, random_recall, rank_cells,
    recall_at, LocalizationMetrics, MatcherMetrics, QueryPrediction, RegressionMetrics, LOCALIZATION_EPS,
    RECALL_KS,
};
use super::report::{MetricsReport, Table};
use super::train::{train_coarse, train_fine, train_regressor, CoarseEpoch, FineEpoch, FineRun};

pub const NOT_REPRODUCIBLE: &str = "published, not reproducible at desk scale";

pub const RETRIEVAL_TABLE: &str = "Coarse retrieval (val)";
pub const LOCALIZATION_TABLE: &str = "Localization recall (val)";
pub const MATCHER_TABLE: &str = "Matcher (val, ground-truth cells)";
pub const REGRESSION_TABLE: &str = "Regression error on ground-truth cells (val, m)";
pub const RELATION_TABLE: &str = "Relation ablation (val retrieval)";
pub const TRAINING_TABLE: &str = "Training strategy (val matcher)";
pub const REGRESSOR_ABLATION_TABLE: &str = "Regressor ablation (val, mean error on ground-truth cells, m)";

/// Relation toggles in table order: `(label, point relations, hint relations)`.
pub const RELATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("no relations", false, false),
    ("no linguistic", true, false),
    ("no visual", false, true),
    ("full", true, true),
];

/// Monte-Carlo trials for the uniform-ranking baseline.
pub const RANDOM_TRIALS: usize = 20_000;

pub fn recall_columns() -> Vec<String> {
    RECALL_KS.iter().map(|k| format!("R@{k}")).collect()
}

pub fn localization_column(k: usize, eps: f64) -> String {
    format!("k={k} <{eps}m")
}

fn localization_columns(ks: &[usize], eps: &[f64]) -> Vec<String> {
    ks.iter().flat_map(|&k| eps.iter().map(move |&e| localization_column(k, e))).collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn localization_values(m: &LocalizationMetrics, ks: &[usize], eps: &[f64]) -> Vec<f64> {
    ks.iter()
        .flat_map(|&k| eps.iter().map(move |&e| m.get(k, e).unwrap_or(f64::NAN)))
        .collect()
}

/// Recall@{1,3,5} of a coarse model on the val queries, retrieving among all
/// cells.
pub fn coarse_recall(ds: &Dataset, model: &CoarseModel) -> Result<Vec<f64>> {
    let kmax = *RECALL_KS.iter().max().unwrap();
    let ranks = rank_cells(model, &ds.val, &ds.all_cells(), kmax)?;
    Ok(RECALL_KS.iter().map(|&k| recall_at(&ranks, &ds.val, k)).collect())
}

/// Uniform-ranking recall@{1,3,5} over the same database.
pub fn random_baseline(ds: &Dataset, seed: u64) -> Vec<f64> {
    RECALL_KS
        .iter()
        .map(|&k| random_recall(&ds.val, ds.cells.len(), k, RANDOM_TRIALS, derive_seed(seed, 50 + k as u64)))
        .collect()
}

/// Everything `eval` reports for one trained pipeline.
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<QueryPrediction>,
    pub localization: LocalizationMetrics,
    pub cell_center: LocalizationMetrics,
    pub matcher: MatcherMetrics,
    pub regression: RegressionMetrics,
}

/// Full report for a trained pipeline; `ks` and `eps` pick the localization
/// grid (the defaults are
/// [`LOCALIZATION_KS`](super::eval::LOCALIZATION_KS) and [`LOCALIZATION_EPS`]).
pub fn evaluate(
    ds: &Dataset,
    cfg: &Config,
    coarse: &CoarseModel,
    fine: &FineModel,
    ks: &[usize],
    eps: &[f64],
) -> Result<Evaluation> {
    if ks.is_empty() || eps.is_empty() || ks.contains(&0) || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("localization k and eps lists must be non-empty and positive".into()));
    }
    let kmax = *ks.iter().chain(&RECALL_KS).max().unwrap();
    let ranks = rank_cells(coarse, &ds.val, &ds.all_cells(), kmax)?;
    let mut report = MetricsReport::new(cfg);

    let cols = recall_columns();
    let mut t = Table::new(RETRIEVAL_TABLE, &strs(&cols));
    t.row("RET", &RECALL_KS.iter().map(|&k| recall_at(&ranks, &ds.val, k)).collect::<Vec<_>>());
    t.row("random ranking", &random_baseline(ds, cfg.seed));
    report.tables.push(t);

    let predictions = predict_all(fine, ds, &ds.val, &ranks)?;
    let localization = eval_localization(&predictions, ks, eps);
    let cell_center = cell_center_recall(ds, &ds.val, &ranks, ks, eps);
    let cols = localization_columns(ks, eps);
    let mut t = Table::new(LOCALIZATION_TABLE, &strs(&cols));
    t.row("RET", &localization_values(&localization, ks, eps));
    t.row("cell centre", &localization_values(&cell_center, ks, eps));
    // Published values exist for k=1 at 5/10/15 m only.
    let reference = |v: [f64; 3]| -> Vec<Option<f64>> {
        cols.iter()
            .map(|c| (0..3).find(|&i| *c == localization_column(1, LOCALIZATION_EPS[i])).map(|i| v[i]))
            .collect()
    };
    t.noted_row("Text2Pos (reference)", &reference([0.14, 0.25, 0.31]), NOT_REPRODUCIBLE);
    t.noted_row("RET (reference)", &reference([0.19, 0.30, 0.37]), NOT_REPRODUCIBLE);
    report.tables.push(t);

    let matcher = eval_matcher(fine, ds, &ds.val)?;
    let mut t = Table::new(MATCHER_TABLE, &["precision", "recall"]);
    t.row("cascade", &[matcher.precision, matcher.recall]);
    t.noted_row("cascade (reference)", &[Some(0.9218), Some(0.9301)], NOT_REPRODUCIBLE);
    report.tables.push(t);

    let regression = eval_regression(fine, ds, &ds.val)?;
    let mut t = Table::new(REGRESSION_TABLE, &["mean error", "fallback rate"]);
    t.row("RET", &[regression.mean_error, regression.fallback_rate]);
    t.row("cell centre", &[regression.cell_center_error, 0.0]);
    report.tables.push(t);

    Ok(Evaluation {
        report,
        predictions,
        localization,
        cell_center,
        matcher,
        regression,
    })
}

/// Trains one coarse model per relation setting and tabulates val recall.
pub fn ablate_relations(
    ds: &Dataset,
    cfg: &Config,
    variants: &[(&str, bool, bool)],
    on_epoch: &mut dyn FnMut(&str, &CoarseEpoch),
) -> Result<Table> {
    let cols = recall_columns();
    let mut t = Table::new(RELATION_TABLE, &strs(&cols));
    for &(label, point, hint) in variants {
        let mut c = cfg.clone();
        c.coarse.point_relations = point;
        c.coarse.hint_relations = hint;
        let run = train_coarse(ds, &c, &mut |e| on_epoch(label, e))?;
        t.row(label, &coarse_recall(ds, &run.model)?);
    }
    Ok(t)
}

/// Copies every matcher parameter of `from` into `to`.
pub fn copy_matcher(from: &FineModel, to: &mut FineModel) {
    for p in to.params.iter_mut().filter(|p| is_matcher_param(&p.name)) {
        p.value = from.params.by_name(&p.name).expect("same architecture").value.clone();
    }
}

/// Regressor trained without cross-attention on top of an existing matcher.
pub fn train_without_cross_attention(ds: &Dataset, cfg: &Config, matcher: &FineModel, on_epoch: &mut dyn FnMut(&FineEpoch)) -> Result<FineModel> {
    let mut c = cfg.clone();
    c.fine.cross_attention = false;
    let mut model = FineModel::new(c.fine.clone(), derive_seed(c.seed, 12))?;
    copy_matcher(matcher, &mut model);
    train_regressor(&mut model, ds, &c, on_epoch)?;
    Ok(model)
}

/// Trains the joint variant and compares its matcher with `cascade`'s.
pub fn ablate_training(ds: &Dataset, cfg: &Config, cascade: &FineModel, on_epoch: &mut dyn FnMut(&FineEpoch)) -> Result<(Table, FineRun)> {
    let mut c = cfg.clone();
    c.joint = true;
    let joint = train_fine(ds, &c, on_epoch)?;
    let mut t = Table::new(TRAINING_TABLE, &["precision", "recall"]);
    let j = eval_matcher(&joint.model, ds, &ds.val)?;
    let k = eval_matcher(cascade, ds, &ds.val)?;
    t.row("joint", &[j.precision, j.recall]);
    t.row("cascade", &[k.precision, k.recall]);
    t.noted_row("joint (reference)", &[Some(0.8813), Some(0.8901)], NOT_REPRODUCIBLE);
    t.noted_row("cascade (reference)", &[Some(0.9218), Some(0.9301)], NOT_REPRODUCIBLE);
    Ok((t, joint))
}

/// Mean gt-cell error of the cell-centre baseline, a regressor without
/// cross-attention and the full regressor.
pub fn ablate_regression(ds: &Dataset, full: &FineModel, no_cross: &FineModel) -> Result<Table> {
    let f = eval_regression(full, ds, &ds.val)?;
    let n = eval_regression(no_cross, ds, &ds.val)?;
    let mut t = Table::new(REGRESSOR_ABLATION_TABLE, &["mean error"]);
    t.row("cell centre", &[f.cell_center_error]);
    t.row("no cross-attention", &[n.mean_error]);
    t.row("full", &[f.mean_error]);
    Ok(t)
}
