use std::collections::{HashMap, VecDeque};

use super::{Instance, Point, Scene};
use crate::error::Result;

/// Points closer than this (in the ground plane) belong to the same piece.
pub const CLUSTER_RADIUS: f64 = 2.0;
/// Pieces smaller than this are merged into the nearest larger piece.
pub const MIN_COMPONENT_POINTS: usize = 8;

/// Connected components of the radius graph over the 2D projection, each as a
/// sorted list of point indices, ordered by their first index.
fn components(points: &[Point], radius: f64) -> Vec<Vec<usize>> {
    let key = |p: &Point| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut label = vec![usize::MAX; points.len()];
    let mut comps = Vec::new();
    for seed in 0..points.len() {
        if label[seed] != usize::MAX {
            continue;
        }
        let c = comps.len();
        label[seed] = c;
        let mut members = vec![seed];
        let mut queue = VecDeque::from([seed]);
        while let Some(i) = queue.pop_front() {
            let (gx, gy) = key(&points[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(gx + dx, gy + dy)) else { continue };
                    for &j in bucket {
                        if label[j] == usize::MAX {
                            let d2 = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
                            if d2 <= r2 {
                                label[j] = c;
                                members.push(j);
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

fn min_dist2(points: &[Point], a: &[usize], b: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &i in a {
        for &j in b {
            let d = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
            best = best.min(d);
        }
    }
    best
}

/// Splits every stuff instance into spatially connected pieces. The first
/// piece keeps the original id, further pieces get fresh ids after the
/// largest id in the scene. Thing instances pass through unchanged.
pub fn cluster_stuff(scene: &Scene) -> Result<Scene> {
    let mut next_id = scene.instances.iter().map(|i| i.id + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        if !inst.is_stuff() {
            out.push(inst.clone());
            continue;
        }
        let pts = inst.points();
        let comps = components(pts, CLUSTER_RADIUS);
        let (big, small): (Vec<_>, Vec<_>) = comps.into_iter().partition(|c| c.len() >= MIN_COMPONENT_POINTS);
        if big.is_empty() {
            out.push(inst.clone());
            continue;
        }
        let mut groups = big;
        for s in small {
            let nearest = (0..groups.len())
                .min_by(|&a, &b| {
                    min_dist2(pts, &s, &groups[a])
                        .partial_cmp(&min_dist2(pts, &s, &groups[b]))
                        .unwrap()
                })
                .unwrap();
            groups[nearest].extend(s);
        }
        for (k, mut g) in groups.into_iter().enumerate() {
            g.sort_unstable();
            let id = if k == 0 {
                inst.id
            } else {
                next_id += 1;
                next_id - 1
            };
            out.push(Instance::new(id, inst.class, g.iter().map(|&i| pts[i]).collect())?);
        }
    }
    Ok(Scene {
        bounds: scene.bounds,
        seed: scene.seed,
        instances: out,
    })
}
