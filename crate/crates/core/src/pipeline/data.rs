use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::io::QuerySet;
use crate::scene::{cluster_stuff, generate_scene, reject_sparse, sample_queries, slice_cells, Cell, QuerySample, Scene};

use super::config::DataConfig;

/// Mixes a stream tag into a run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Cells and queries of one synthetic city.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: Scene,
    /// Every retained cell; val queries retrieve among all of them.
    pub cells: Vec<Cell>,
    /// Indices into `cells` of cells fully outside the held-out quadrant.
    pub train_cells: Vec<usize>,
    /// Indices into `cells` of cells fully inside the held-out quadrant.
    pub val_cells: Vec<usize>,
    pub train: Vec<QuerySample>,
    pub val: Vec<QuerySample>,
    index: HashMap<usize, usize>,
}

/// Splits cell indices by the upper-right quadrant `[w/2, w) × [h/2, h)`:
/// cells inside it are held out, cells overlapping it belong to neither side.
pub fn quadrant_split(cells: &[Cell], bounds: [f64; 2]) -> (Vec<usize>, Vec<usize>) {
    let (qx, qy) = (bounds[0] / 2.0, bounds[1] / 2.0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        let [x0, y0] = c.origin;
        let (x1, y1) = (x0 + c.size, y0 + c.size);
        if x0 >= qx && y0 >= qy {
            val.push(k);
        } else if x1 <= qx || y1 <= qy {
            train.push(k);
        }
    }
    (train, val)
}

impl Dataset {
    /// Generates the scene and cells, then samples both query sets.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let scene = cluster_stuff(&generate_scene(&cfg.scene, derive_seed(seed, 0))?)?;
        let (train, val) = Self::sample(&scene, cfg, seed)?;
        Self::assemble(scene, cfg, QuerySet { train, val })
    }

    fn sample(scene: &Scene, cfg: &DataConfig, seed: u64) -> Result<(Vec<QuerySample>, Vec<QuerySample>)> {
        let cells = Self::cells_of(scene, cfg)?;
        let (tr, va) = quadrant_split(&cells, scene.bounds);
        let pick = |idx: &[usize]| idx.iter().map(|&k| cells[k].clone()).collect::<Vec<_>>();
        let train = sample_queries(scene, &pick(&tr), cfg.train_queries, derive_seed(seed, 1), &cfg.queries)?;
        let mut val = sample_queries(scene, &pick(&va), cfg.val_queries, derive_seed(seed, 2), &cfg.queries)?;
        for q in &mut val {
            q.positive_cell_ids = cells.iter().filter(|c| c.contains(q.target)).map(|c| c.id).collect();
        }
        Ok((train, val))
    }

    fn cells_of(scene: &Scene, cfg: &DataConfig) -> Result<Vec<Cell>> {
        reject_sparse(slice_cells(scene, cfg.cell_size, cfg.cell_stride)?, cfg.min_instances)
    }

    /// Rebuilds a dataset from a stored scene and query set.
    pub fn assemble(scene: Scene, cfg: &DataConfig, queries: QuerySet) -> Result<Self> {
        let cells = Self::cells_of(&scene, cfg)?;
        let (train_cells, val_cells) = quadrant_split(&cells, scene.bounds);
        if train_cells.is_empty() || val_cells.is_empty() {
            return Err(Error::Config("quadrant split left an empty train or val cell set".into()));
        }
        let index = cells.iter().enumerate().map(|(k, c)| (c.id, k)).collect();
        let ds = Self {
            scene,
            cells,
            train_cells,
            val_cells,
            train: queries.train,
            val: queries.val,
            index,
        };
        for q in ds.train.iter().chain(&ds.val) {
            if q.positive_cell_ids.iter().any(|id| !ds.index.contains_key(id)) || q.positive_cell_ids.is_empty() {
                return Err(Error::Data(format!("query {} refers to cells missing from the scene", q.id)));
            }
        }
        Ok(ds)
    }

    pub fn queries(&self) -> QuerySet {
        QuerySet {
            train: self.train.clone(),
            val: self.val.clone(),
        }
    }

    pub fn cell(&self, id: usize) -> Option<&Cell> {
        self.index.get(&id).map(|&k| &self.cells[k])
    }

    /// The positive cell whose centre is nearest the target (ties to the
    /// lower id).
    pub fn gt_cell(&self, q: &QuerySample) -> &Cell {
        q.positive_cell_ids
            .iter()
            .map(|id| self.cell(*id).expect("validated at assembly"))
            .min_by(|a, b| {
                let da = dist(a.center(), q.target);
                let db = dist(b.center(), q.target);
                da.total_cmp(&db).then(a.id.cmp(&b.id))
            })
            .expect("validated at assembly")
    }

    pub fn all_cells(&self) -> Vec<&Cell> {
        self.cells.iter().collect()
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_queries: 40,
            val_queries: 20,
            ..DataConfig::default()
        }
    }

    #[test]
    fn split_has_no_spatial_overlap() {
        let ds = Dataset::generate(&small(), 5).unwrap();
        let [w, h] = ds.scene.bounds;
        for &k in &ds.val_cells {
            let c = &ds.cells[k];
            assert!(c.origin[0] >= w / 2.0 && c.origin[1] >= h / 2.0);
        }
        for &k in &ds.train_cells {
            let c = &ds.cells[k];
            assert!(c.origin[0] + c.size <= w / 2.0 || c.origin[1] + c.size <= h / 2.0);
        }
        for q in &ds.val {
            assert!(q.target[0] >= w / 2.0 && q.target[1] >= h / 2.0);
        }
        for q in &ds.train {
            assert!(q.target[0] < w / 2.0 || q.target[1] < h / 2.0);
            assert!(q.positive_cell_ids.iter().all(|id| {
                let k = ds.cells.iter().position(|c| c.id == *id).unwrap();
                ds.train_cells.contains(&k)
            }));
        }
    }

    #[test]
    fn gt_cell_contains_target_and_is_nearest() {
        let ds = Dataset::generate(&small(), 6).unwrap();
        for q in ds.train.iter().chain(&ds.val) {
            let c = ds.gt_cell(q);
            assert!(c.contains(q.target));
            for id in &q.positive_cell_ids {
                assert!(dist(ds.cell(*id).unwrap().center(), q.target) >= dist(c.center(), q.target));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(&small(), 9).unwrap();
        let b = Dataset::generate(&small(), 9).unwrap();
        assert_eq!(a.queries(), b.queries());
        assert_eq!(a.cells, b.cells);
    }
}
