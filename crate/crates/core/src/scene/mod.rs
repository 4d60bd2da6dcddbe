//! Synthetic city point clouds and their preprocessing into map cells and
//! query samples.

mod cells;
mod cluster;
mod generate;
pub mod io;
mod queries;

pub use cells::{reject_sparse, slice_cells};
pub use cluster::{cluster_stuff, CLUSTER_RADIUS, MIN_COMPONENT_POINTS};
pub use generate::{generate_scene, SceneConfig, ThingMix};
pub use queries::{sample_queries, QueryConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Hint;

/// `[x, y, z, r, g, b]`: metres and colour channels in `[0, 1]`.
pub type Point = [f64; 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLabel {
    Building,
    Pole,
    TrafficSign,
    Car,
    TrashBin,
    Terrain,
    Road,
    Vegetation,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 8] = [
        ClassLabel::Building,
        ClassLabel::Pole,
        ClassLabel::TrafficSign,
        ClassLabel::Car,
        ClassLabel::TrashBin,
        ClassLabel::Terrain,
        ClassLabel::Road,
        ClassLabel::Vegetation,
    ];

    pub const THINGS: [ClassLabel; 5] = [
        ClassLabel::Building,
        ClassLabel::Pole,
        ClassLabel::TrafficSign,
        ClassLabel::Car,
        ClassLabel::TrashBin,
    ];

    pub fn is_stuff(self) -> bool {
        matches!(self, ClassLabel::Terrain | ClassLabel::Road | ClassLabel::Vegetation)
    }

    pub fn token(self) -> &'static str {
        match self {
            ClassLabel::Building => "building",
            ClassLabel::Pole => "pole",
            ClassLabel::TrafficSign => "traffic-sign",
            ClassLabel::Car => "car",
            ClassLabel::TrashBin => "trash-bin",
            ClassLabel::Terrain => "terrain",
            ClassLabel::Road => "road",
            ClassLabel::Vegetation => "vegetation",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.token() == s)
    }
}

/// A point-cloud object. Centre and average colour are always the exact means
/// of the stored points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct Instance {
    pub id: usize,
    pub class: ClassLabel,
    points: Vec<Point>,
    center: [f64; 3],
    avg_color: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: usize,
    class: ClassLabel,
    points: Vec<Point>,
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = Error;
    fn try_from(r: InstanceRecord) -> Result<Self> {
        Instance::new(r.id, r.class, r.points)
    }
}

impl From<Instance> for InstanceRecord {
    fn from(i: Instance) -> Self {
        InstanceRecord {
            id: i.id,
            class: i.class,
            points: i.points,
        }
    }
}

impl Instance {
    pub fn new(id: usize, class: ClassLabel, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput(format!("instance {id} has no points")));
        }
        let n = points.len() as f64;
        let mut sums = [0.0; 6];
        for p in &points {
            for k in 0..6 {
                sums[k] += p[k];
            }
        }
        Ok(Self {
            id,
            class,
            center: [sums[0] / n, sums[1] / n, sums[2] / n],
            avg_color: [sums[3] / n, sums[4] / n, sums[5] / n],
            points,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn center_2d(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }

    pub fn avg_color(&self) -> [f64; 3] {
        self.avg_color
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn is_stuff(&self) -> bool {
        self.class.is_stuff()
    }

    /// Same instance with its points replaced (statistics recomputed).
    pub fn with_points(&self, points: Vec<Point>) -> Result<Self> {
        Self::new(self.id, self.class, points)
    }
}

/// A square map tile and the (cropped) instances that touch it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub origin: [f64; 2],
    pub size: f64,
    pub instances: Vec<Instance>,
}

impl Cell {
    pub fn center(&self) -> [f64; 2] {
        [self.origin[0] + self.size / 2.0, self.origin[1] + self.size / 2.0]
    }

    /// Half-open footprint test `[origin, origin + size)`.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.origin[0]
            && p[0] < self.origin[0] + self.size
            && p[1] >= self.origin[1]
            && p[1] < self.origin[1] + self.size
    }

    pub fn point_count(&self) -> usize {
        self.instances.iter().map(Instance::point_count).sum()
    }

    pub fn instance(&self, id: usize) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Extent `[width, height]` in metres; the scene spans `[0, w) × [0, h)`.
    pub bounds: [f64; 2],
    pub seed: u64,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn point_count(&self) -> usize {
        self.instances.iter().map(Instance::point_count).sum()
    }

    pub fn instance(&self, id: usize) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

/// A textual query: hints about a target position plus its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: usize,
    pub target: [f64; 2],
    pub hints: Vec<Hint>,
    /// Referred instance of each hint, in hint order.
    pub gt_instance_ids: Vec<usize>,
    /// Cells whose footprint contains the target.
    pub positive_cell_ids: Vec<usize>,
}
