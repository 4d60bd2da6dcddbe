use std::collections::BTreeMap;

use super::{Cell, Instance, Point, Scene};
use crate::error::{Error, Result};

/// Number of window positions along an axis of the given extent.
fn windows(extent: f64, size: f64, stride: f64) -> usize {
    if extent < size {
        0
    } else {
        ((extent - size) / stride + 1e-9).floor() as usize + 1
    }
}

/// Index range of windows `[i·stride, i·stride + size)` that may contain `x`.
/// Candidates are verified exactly by the caller.
fn candidates(x: f64, size: f64, stride: f64, count: usize) -> std::ops::RangeInclusive<usize> {
    let lo = ((x - size) / stride).floor().max(0.0) as usize;
    let hi = ((x / stride).floor().max(0.0) as usize).min(count.saturating_sub(1));
    lo..=hi
}

/// Sliding-window division of the scene into square cells. Cell ids are
/// row-major window indices, `id = row · columns + column`. An instance joins
/// every cell holding at least one of its points, cropped to the footprint.
pub fn slice_cells(scene: &Scene, cell_size: f64, stride: f64) -> Result<Vec<Cell>> {
    if cell_size <= 0.0 || stride <= 0.0 || stride > cell_size {
        return Err(Error::Config(format!(
            "need cell_size > 0 and 0 < stride ≤ cell_size, got size {cell_size}, stride {stride}"
        )));
    }
    let nx = windows(scene.bounds[0], cell_size, stride);
    let ny = windows(scene.bounds[1], cell_size, stride);
    let origin = |i: usize| i as f64 * stride;
    let inside = |o: f64, x: f64| x >= o && x < o + cell_size;

    // cell id → (instance index → cropped points)
    let mut members: BTreeMap<usize, BTreeMap<usize, Vec<Point>>> = BTreeMap::new();
    for (k, inst) in scene.instances.iter().enumerate() {
        for p in inst.points() {
            for j in candidates(p[1], cell_size, stride, ny) {
                if !inside(origin(j), p[1]) {
                    continue;
                }
                for i in candidates(p[0], cell_size, stride, nx) {
                    if inside(origin(i), p[0]) {
                        members
                            .entry(j * nx + i)
                            .or_default()
                            .entry(k)
                            .or_default()
                            .push(*p);
                    }
                }
            }
        }
    }

    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let id = j * nx + i;
            let instances = members
                .remove(&id)
                .unwrap_or_default()
                .into_iter()
                .map(|(k, pts)| scene.instances[k].with_points(pts))
                .collect::<Result<Vec<Instance>>>()?;
            cells.push(Cell {
                id,
                origin: [origin(i), origin(j)],
                size: cell_size,
                instances,
            });
        }
    }
    Ok(cells)
}

/// Keeps cells with at least `min_instances` instances, preserving order.
pub fn reject_sparse(cells: Vec<Cell>, min_instances: usize) -> Result<Vec<Cell>> {
    if min_instances == 0 {
        return Err(Error::Config("min_instances must be at least 1".into()));
    }
    Ok(cells
        .into_iter()
        .filter(|c| c.instances.len() >= min_instances)
        .collect())
}
