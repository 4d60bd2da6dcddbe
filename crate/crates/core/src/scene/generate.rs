use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, Instance, Point, Scene};
use crate::error::{Error, Result};
use crate::language::Color;

/// Relative frequency of each thing class; must sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingMix {
    pub building: f64,
    pub pole: f64,
    pub traffic_sign: f64,
    pub car: f64,
    pub trash_bin: f64,
}

impl Default for ThingMix {
    fn default() -> Self {
        Self {
            building: 0.15,
            pole: 0.2,
            traffic_sign: 0.15,
            car: 0.3,
            trash_bin: 0.2,
        }
    }
}

impl ThingMix {
    fn weights(&self) -> [(ClassLabel, f64); 5] {
        [
            (ClassLabel::Building, self.building),
            (ClassLabel::Pole, self.pole),
            (ClassLabel::TrafficSign, self.traffic_sign),
            (ClassLabel::Car, self.car),
            (ClassLabel::TrashBin, self.trash_bin),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub things_per_hectare: f64,
    pub class_mix: ThingMix,
    /// Straight road strips, alternating between x- and y-aligned.
    pub roads: usize,
    pub terrain_patches: usize,
    pub vegetation_patches: usize,
    /// Probability that a stuff patch is made of two separated blobs.
    pub split_patch_prob: f64,
    /// Spacing of the jittered sampling grid for ground patches.
    pub stuff_spacing: f64,
    /// Standard deviation of per-instance and per-point colour noise.
    pub color_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 200.0,
            height: 200.0,
            things_per_hectare: 60.0,
            class_mix: ThingMix::default(),
            roads: 2,
            terrain_patches: 8,
            vegetation_patches: 8,
            split_patch_prob: 0.35,
            stuff_spacing: 1.4,
            color_noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 60.0 || self.height < 60.0 {
            return Err(Error::Config(format!(
                "scene bounds {}×{} m are below the 60×60 m minimum",
                self.width, self.height
            )));
        }
        let sum: f64 = self.class_mix.weights().iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.weights().iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::Config(format!("class mix weights sum to {sum}, expected 1")));
        }
        if self.stuff_spacing <= 0.0 || self.stuff_spacing > 1.4 {
            return Err(Error::Config("stuff_spacing must lie in (0, 1.4] m".into()));
        }
        Ok(())
    }

    /// Number of thing instances of each class the generator places.
    pub fn thing_counts(&self) -> Vec<(ClassLabel, usize)> {
        let hectares = self.width * self.height / 10_000.0;
        self.class_mix
            .weights()
            .iter()
            .map(|(c, w)| (*c, (hectares * self.things_per_hectare * w).round() as usize))
            .collect()
    }
}

fn palette(class: ClassLabel) -> &'static [Color] {
    use Color::*;
    match class {
        ClassLabel::Building => &[Gray, Beige, Red, White, Brown, Yellow, Blue],
        ClassLabel::Pole => &[Gray, Black, White, Brown],
        ClassLabel::TrafficSign => &[Red, Blue, Yellow, White, Green],
        ClassLabel::Car => &[Red, Blue, Black, White, Gray, Yellow, Green, Brown],
        ClassLabel::TrashBin => &[Green, Gray, Black, Blue, Red, Yellow],
        ClassLabel::Terrain => &[Beige, Brown, DarkGreen],
        ClassLabel::Road => &[Gray, Black],
        ClassLabel::Vegetation => &[DarkGreen, Green],
    }
}

struct Painter {
    base: [f64; 3],
    point_noise: Normal<f64>,
}

impl Painter {
    fn new(class: ClassLabel, noise: f64, rng: &mut impl Rng) -> Self {
        let color = *palette(class).choose(rng).unwrap();
        let inst_noise = Normal::new(0.0, noise).unwrap();
        let rgb = color.rgb();
        let base = [0, 1, 2].map(|k| (rgb[k] + inst_noise.sample(rng)).clamp(0.0, 1.0));
        Self {
            base,
            point_noise: Normal::new(0.0, noise * 1.3).unwrap(),
        }
    }

    fn point(&self, xyz: [f64; 3], rng: &mut impl Rng) -> Point {
        let c = [0, 1, 2].map(|k| (self.base[k] + self.point_noise.sample(rng)).clamp(0.0, 1.0));
        [xyz[0], xyz[1], xyz[2], c[0], c[1], c[2]]
    }
}

/// Uniform sample on the four walls and roof of an axis-aligned box centred at
/// the origin in x/y and standing on z = 0.
fn box_surface(size: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    let [sx, sy, sz] = size;
    let faces = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy];
    let total: f64 = faces.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while pick >= faces[face] && face < 4 {
        pick -= faces[face];
        face += 1;
    }
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let h = rng.gen_range(0.0..1.0);
    match face {
        0 => [-sx / 2.0, u * sy, h * sz],
        1 => [sx / 2.0, u * sy, h * sz],
        2 => [u * sx, -sy / 2.0, h * sz],
        3 => [u * sx, sy / 2.0, h * sz],
        _ => [u * sx, v * sy, sz],
    }
}

fn rotate(p: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

struct Bounds {
    w: f64,
    h: f64,
}

impl Bounds {
    fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        let eps = 1e-6;
        [p[0].clamp(0.0, self.w - eps), p[1].clamp(0.0, self.h - eps), p[2]]
    }
}

fn make_thing(class: ClassLabel, cfg: &SceneConfig, b: &Bounds, rng: &mut impl Rng) -> Vec<Point> {
    let paint = Painter::new(class, cfg.color_noise, rng);
    let cx = rng.gen_range(3.0..b.w - 3.0);
    let cy = rng.gen_range(3.0..b.h - 3.0);
    let yaw = rng.gen_range(0.0..std::f64::consts::PI);
    let local: Vec<[f64; 3]> = match class {
        ClassLabel::Building => {
            let size = [rng.gen_range(6.0..14.0), rng.gen_range(6.0..14.0), rng.gen_range(5.0..12.0)];
            (0..96).map(|_| box_surface(size, rng)).collect()
        }
        ClassLabel::Car => {
            let size = [rng.gen_range(3.8..4.8), rng.gen_range(1.7..2.0), rng.gen_range(1.3..1.7)];
            (0..48).map(|_| box_surface(size, rng)).collect()
        }
        ClassLabel::Pole => {
            let h = rng.gen_range(5.0..8.0);
            (0..20)
                .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..h)])
                .collect()
        }
        ClassLabel::TrafficSign => {
            let h = rng.gen_range(2.2..2.8);
            let mut pts: Vec<[f64; 3]> = (0..12)
                .map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.0..h)])
                .collect();
            pts.extend((0..12).map(|_| [rng.gen_range(-0.4..0.4), rng.gen_range(-0.05..0.05), h + rng.gen_range(0.0..0.8)]));
            pts
        }
        ClassLabel::TrashBin => (0..16)
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [0.35 * a.cos(), 0.35 * a.sin(), rng.gen_range(0.0..1.0)]
            })
            .collect(),
        _ => unreachable!("stuff classes are generated as patches"),
    };
    local
        .into_iter()
        .map(|p| {
            let r = rotate(p, yaw);
            paint.point(b.clamp([r[0] + cx, r[1] + cy, r[2]]), rng)
        })
        .collect()
}

/// Jittered grid over the axis-aligned rectangle `[x0, x1) × [y0, y1)`,
/// clipped to the scene, filtered by `keep`.
fn ground_grid(
    rect: [f64; 4],
    cfg: &SceneConfig,
    b: &Bounds,
    keep: impl Fn(f64, f64) -> bool,
    height: impl Fn(&mut ChaCha8Rng) -> f64,
    paint: &Painter,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    let s = cfg.stuff_spacing;
    let jitter = 0.18 * s;
    let x0 = rect[0].max(0.0);
    let y0 = rect[1].max(0.0);
    let x1 = rect[2].min(b.w);
    let y1 = rect[3].min(b.h);
    let mut pts = Vec::new();
    let mut y = y0 + s / 2.0;
    while y < y1 {
        let mut x = x0 + s / 2.0;
        while x < x1 {
            let px = x + rng.gen_range(-jitter..jitter);
            let py = y + rng.gen_range(-jitter..jitter);
            if keep(px, py) {
                let z = height(rng);
                pts.push(paint.point(b.clamp([px, py, z]), rng));
            }
            x += s;
        }
        y += s;
    }
    pts
}

fn make_stuff(class: ClassLabel, index: usize, cfg: &SceneConfig, b: &Bounds, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let paint = Painter::new(class, cfg.color_noise, rng);
    let flat = |r: &mut ChaCha8Rng| r.gen_range(-0.05..0.05);
    match class {
        ClassLabel::Road => {
            let half = 3.5;
            if index % 2 == 0 {
                let y = rng.gen_range(20.0..b.h - 20.0);
                ground_grid([0.0, y - half, b.w, y + half], cfg, b, |_, _| true, flat, &paint, rng)
            } else {
                let x = rng.gen_range(20.0..b.w - 20.0);
                ground_grid([x - half, 0.0, x + half, b.h], cfg, b, |_, _| true, flat, &paint, rng)
            }
        }
        ClassLabel::Terrain | ClassLabel::Vegetation => {
            let blobs = if rng.gen_bool(cfg.split_patch_prob) { 2 } else { 1 };
            let mut pts = Vec::new();
            let first = [rng.gen_range(15.0..b.w - 15.0), rng.gen_range(15.0..b.h - 15.0)];
            for k in 0..blobs {
                let c = if k == 0 {
                    first
                } else {
                    // Second blob at least 40 m away so the pieces never touch.
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = rng.gen_range(40.0..60.0);
                    [
                        (first[0] + r * a.cos()).clamp(12.0, b.w - 12.0),
                        (first[1] + r * a.sin()).clamp(12.0, b.h - 12.0),
                    ]
                };
                if class == ClassLabel::Terrain {
                    let hw = rng.gen_range(5.0..12.0);
                    let hh = rng.gen_range(5.0..12.0);
                    pts.extend(ground_grid([c[0] - hw, c[1] - hh, c[0] + hw, c[1] + hh], cfg, b, |_, _| true, flat, &paint, rng));
                } else {
                    let r = rng.gen_range(4.0..9.0);
                    let inside = move |x: f64, y: f64| (x - c[0]).hypot(y - c[1]) < r;
                    let bumpy = |r: &mut ChaCha8Rng| r.gen_range(0.0..1.5);
                    pts.extend(ground_grid([c[0] - r, c[1] - r, c[0] + r, c[1] + r], cfg, b, inside, bumpy, &paint, rng));
                }
            }
            pts
        }
        _ => unreachable!("thing classes are generated as objects"),
    }
}

/// Builds a synthetic city. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Bounds {
        w: config.width,
        h: config.height,
    };
    let mut instances = Vec::new();
    for (class, count) in config.thing_counts() {
        for _ in 0..count {
            let pts = make_thing(class, config, &b, &mut rng);
            instances.push(Instance::new(instances.len(), class, pts)?);
        }
    }
    let stuff = [
        (ClassLabel::Road, config.roads),
        (ClassLabel::Terrain, config.terrain_patches),
        (ClassLabel::Vegetation, config.vegetation_patches),
    ];
    for (class, count) in stuff {
        for k in 0..count {
            let pts = make_stuff(class, k, config, &b, &mut rng);
            if pts.len() >= 8 {
                instances.push(Instance::new(instances.len(), class, pts)?);
            }
        }
    }
    Ok(Scene {
        bounds: [config.width, config.height],
        seed,
        instances,
    })
}
