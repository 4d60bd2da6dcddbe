#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retloc::language::{Color, Direction, WordGroups};
use retloc::scene::{Cell, ClassLabel, Instance, Point};
use retloc::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

const CLASSES: [ClassLabel; 4] = [ClassLabel::Building, ClassLabel::Pole, ClassLabel::Car, ClassLabel::Terrain];

/// A cell with `n` small random instances.
pub fn toy_cell(id: usize, n: usize, rng: &mut impl Rng) -> Cell {
    let origin = [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)];
    let instances = (0..n)
        .map(|k| {
            let c = [origin[0] + rng.gen_range(2.0..28.0), origin[1] + rng.gen_range(2.0..28.0)];
            let rgb = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let pts: Vec<Point> = (0..8)
                .map(|_| {
                    [
                        c[0] + rng.gen_range(-1.5..1.5),
                        c[1] + rng.gen_range(-1.5..1.5),
                        rng.gen_range(0.0..3.0),
                        rgb[0],
                        rgb[1],
                        rgb[2],
                    ]
                })
                .collect();
            Instance::new(id * 100 + k, CLASSES[k % CLASSES.len()], pts).unwrap()
        })
        .collect();
    Cell {
        id,
        origin,
        size: 30.0,
        instances,
    }
}

pub fn toy_hints(n: usize, rng: &mut impl Rng) -> Vec<WordGroups> {
    let dirs = [Direction::East, Direction::North, Direction::Southwest, Direction::OnTop];
    let colors = [Color::Gray, Color::DarkGreen, Color::Red];
    (0..n)
        .map(|_| {
            WordGroups::single(
                dirs[rng.gen_range(0..dirs.len())],
                colors[rng.gen_range(0..colors.len())],
                CLASSES[rng.gen_range(0..CLASSES.len())],
            )
        })
        .collect()
}

/// A configuration small enough to train in seconds.
pub fn tiny_config(seed: u64) -> retloc::pipeline::Config {
    use retloc::pipeline::{Config, StageConfig};
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.data.scene.width = 120.0;
    cfg.data.scene.height = 120.0;
    cfg.data.train_queries = 120;
    cfg.data.val_queries = 40;
    cfg.coarse.d = 12;
    cfg.coarse.heads = 2;
    cfg.coarse.layers = 1;
    cfg.coarse.hidden = 24;
    cfg.fine.d = 12;
    cfg.fine.d_m = 8;
    cfg.coarse_train = StageConfig {
        epochs: 2,
        decay_epoch: Some(1),
        ..StageConfig::default()
    };
    cfg.matcher_train.epochs = 2;
    cfg.regressor_train.epochs = 2;
    cfg
}
