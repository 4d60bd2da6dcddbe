use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, Instance, QuerySample, Scene};
use crate::error::{Error, Result};
use crate::language::generate_hint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub hints: usize,
    /// Only instances whose 2D centre lies within this distance are described.
    pub radius: f64,
    /// Target redraws allowed per sample before giving up.
    pub max_retries: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            hints: 6,
            radius: 40.0,
            max_retries: 1000,
        }
    }
}

/// Ids of the cells whose footprint contains `target`, in cell order.
pub fn positive_cells(cells: &[Cell], target: [f64; 2]) -> Vec<usize> {
    cells.iter().filter(|c| c.contains(target)).map(|c| c.id).collect()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Draws `n` query samples with targets uniform over the union of the cell
/// footprints. Each query describes the target relative to the nearest
/// instances (by scene-level 2D centre) that are present in a positive cell.
pub fn sample_queries(
    scene: &Scene,
    cells: &[Cell],
    n: usize,
    seed: u64,
    cfg: &QueryConfig,
) -> Result<Vec<QuerySample>> {
    if cells.is_empty() {
        return Err(Error::Data("cannot sample queries without cells".into()));
    }
    if cfg.hints == 0 || cfg.radius <= 0.0 {
        return Err(Error::Config("query sampling needs hints ≥ 1 and radius > 0".into()));
    }
    let by_id: HashMap<usize, &Instance> = scene.instances.iter().map(|i| (i.id, i)).collect();
    let lo = [
        cells.iter().map(|c| c.origin[0]).fold(f64::INFINITY, f64::min),
        cells.iter().map(|c| c.origin[1]).fold(f64::INFINITY, f64::min),
    ];
    let hi = [
        cells.iter().map(|c| c.origin[0] + c.size).fold(f64::NEG_INFINITY, f64::max),
        cells.iter().map(|c| c.origin[1] + c.size).fold(f64::NEG_INFINITY, f64::max),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let r2 = cfg.radius * cfg.radius;

    'sample: for id in 0..n {
        for _ in 0..=cfg.max_retries {
            let target = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            let positives = positive_cells(cells, target);
            if positives.is_empty() {
                continue;
            }
            let visible: BTreeSet<usize> = cells
                .iter()
                .filter(|c| positives.contains(&c.id))
                .flat_map(|c| c.instances.iter().map(|i| i.id))
                .collect();
            let mut near: Vec<(f64, &Instance)> = visible
                .iter()
                .filter_map(|id| by_id.get(id).copied())
                .map(|i| (dist2(i.center_2d(), target), i))
                .filter(|(d, _)| *d <= r2)
                .collect();
            if near.len() < cfg.hints {
                continue;
            }
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
            let chosen = &near[..cfg.hints];
            let Ok(hints) = chosen.iter().map(|(_, i)| generate_hint(target, i)).collect::<Result<Vec<_>>>()
            else {
                continue;
            };
            out.push(QuerySample {
                id,
                target,
                gt_instance_ids: chosen.iter().map(|(_, i)| i.id).collect(),
                hints,
                positive_cell_ids: positives,
            });
            continue 'sample;
        }
        return Err(Error::Data(format!(
            "no target with {} instances within {} m after {} draws",
            cfg.hints, cfg.radius, cfg.max_retries
        )));
    }
    Ok(out)
}
