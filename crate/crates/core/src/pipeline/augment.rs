use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::rotate_z;
use crate::error::Result;
use crate::language::{flip_hint, shuffle_hints, Axis, Hint};
use crate::scene::{Cell, Instance, QuerySample};

use super::config::AugmentConfig;

/// A query paired with the cell it is trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub query_id: usize,
    pub cell: Cell,
    pub hints: Vec<Hint>,
    pub target: [f64; 2],
}

impl Sample {
    pub fn new(q: &QuerySample, cell: &Cell) -> Self {
        Self {
            query_id: q.id,
            cell: cell.clone(),
            hints: q.hints.clone(),
            target: q.target,
        }
    }

    /// Referred instance of each hint, in current hint order.
    pub fn gt_ids(&self) -> Vec<usize> {
        self.hints.iter().map(|h| h.referred_instance_id).collect()
    }
}

fn mirror(v: f64, center: f64) -> f64 {
    2.0 * center - v
}

/// Mirrors cell geometry about the cell centre, together with the target and
/// the direction words of the hints.
pub fn flip_sample(s: &Sample, axis: Axis) -> Result<Sample> {
    let k = match axis {
        Axis::X => 0,
        Axis::Y => 1,
    };
    let c = s.cell.center()[k];
    let instances = s
        .cell
        .instances
        .iter()
        .map(|i| {
            let pts = i
                .points()
                .iter()
                .map(|p| {
                    let mut q = *p;
                    q[k] = mirror(q[k], c);
                    q
                })
                .collect();
            i.with_points(pts)
        })
        .collect::<Result<Vec<Instance>>>()?;
    let mut target = s.target;
    target[k] = mirror(target[k], c);
    Ok(Sample {
        query_id: s.query_id,
        cell: Cell {
            instances,
            ..s.cell.clone()
        },
        hints: s.hints.iter().map(|h| flip_hint(h, axis)).collect(),
        target,
    })
}

/// Applies random flips, hint shuffling and per-instance z-rotation.
pub fn augment_sample(s: &Sample, cfg: AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let mut out = s.clone();
    if cfg.flip {
        if rng.gen_bool(0.5) {
            out = flip_sample(&out, Axis::X)?;
        }
        if rng.gen_bool(0.5) {
            out = flip_sample(&out, Axis::Y)?;
        }
    }
    if cfg.shuffle_hints {
        shuffle_hints(&mut out.hints, rng);
    }
    if cfg.rotate {
        for inst in &mut out.cell.instances {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            *inst = inst.with_points(rotate_z(inst.points(), angle))?;
        }
    }
    Ok(out)
}

pub fn augment_batch(samples: &[Sample], cfg: AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.iter().map(|s| augment_sample(s, cfg, &mut rng)).collect()
}
