//! Instance features: a point-set network over scale-normalised points plus
//! linear embeddings of average colour, cell-local centre and point count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{split_even, Linear};
use crate::scene::{Cell, Instance, Point};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Point count at which the count feature reaches 1.
pub const COUNT_MAX: f64 = 4096.0;
/// Hidden width of the per-point perceptron.
pub const POINT_HIDDEN: usize = 64;
/// Heights are divided by this in the centre feature.
pub const HEIGHT_SCALE: f64 = 10.0;

/// Log-normalised point count, 0 at n = 0 and 1 at n = [`COUNT_MAX`].
pub fn count_feature(n: usize) -> f64 {
    (1.0 + n as f64).ln() / (1.0 + COUNT_MAX).ln()
}

/// Maps xyz into the unit cube with one shared scale (the largest extent), so
/// aspect ratios survive. Colours are untouched. A set with zero extent maps
/// every point to 0.5.
pub fn normalize_scale(points: &[Point]) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot normalise an empty point set".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    Ok(points
        .iter()
        .map(|p| {
            let mut q = *p;
            for k in 0..3 {
                q[k] = if extent > 0.0 { (p[k] - lo[k]) / extent } else { 0.5 };
            }
            q
        })
        .collect())
}

/// Rotates xy about the xy centroid by `angle` radians.
pub fn rotate_z(points: &[Point], angle: f64) -> Vec<Point> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - cx, p[1] - cy);
            let mut q = *p;
            q[0] = cx + c * dx - s * dy;
            q[1] = cy + s * dx + c * dy;
            q
        })
        .collect()
}

/// Centre in cell coordinates: `(c − origin)/size` in xy, `z/10` in height.
pub fn cell_local_center(center: [f64; 3], origin: [f64; 2], size: f64) -> [f64; 3] {
    [
        (center[0] - origin[0]) / size,
        (center[1] - origin[1]) / size,
        center[2] / HEIGHT_SCALE,
    ]
}

/// Shared per-point perceptron `6 → 64 → d_p` followed by a max-pool.
#[derive(Clone, Debug)]
pub struct PointSetEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl PointSetEncoder {
    pub fn new(prefix: &str, d_p: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(params, &format!("{prefix}.l1"), 6, POINT_HIDDEN, true, rng),
            out: Linear::new(params, &format!("{prefix}.l2"), POINT_HIDDEN, d_p, true, rng),
        }
    }

    /// One `d_p` row per point set. Points are used as given (callers
    /// normalise first).
    pub fn forward(&self, tape: &mut Tape, p: &[Var], sets: &[Vec<Point>]) -> Result<Var> {
        let lens: Vec<usize> = sets.iter().map(Vec::len).collect();
        if lens.iter().any(|&n| n == 0) {
            return Err(Error::InvalidInput("point set with no points".into()));
        }
        let data: Vec<f64> = sets.iter().flatten().flat_map(|q| q.iter().copied()).collect();
        let x = tape.constant(Tensor::new(vec![data.len() / 6, 6], data)?);
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        let y = self.out.forward(tape, p, h)?;
        Ok(tape.segment_max_rows(y, &lens)?)
    }
}

/// `p_i = [point feature ; W^color a_i ; W^center c_i ; W^count σ(n_i)]`. The
/// point feature takes half of `d`; the other three slots split the rest
/// evenly (widths may differ by one when `d` is not a multiple of 6).
#[derive(Clone, Debug)]
pub struct InstanceEncoder {
    pub d: usize,
    pub points: PointSetEncoder,
    pub color: Linear,
    pub center: Linear,
    pub count: Linear,
}

/// An instance together with the frame of the cell it is seen in.
#[derive(Clone, Copy, Debug)]
pub struct Framed<'a> {
    pub instance: &'a Instance,
    pub origin: [f64; 2],
    pub size: f64,
}

impl InstanceEncoder {
    pub fn new(prefix: &str, d: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        if d < 6 {
            return Err(Error::Config(format!("instance width {d} must be at least 6")));
        }
        let rest = split_even(d - d / 2, 3);
        Ok(Self {
            d,
            points: PointSetEncoder::new(&format!("{prefix}.points"), d / 2, params, rng),
            color: Linear::new(params, &format!("{prefix}.color"), 3, rest[0], false, rng),
            center: Linear::new(params, &format!("{prefix}.center"), 3, rest[1], false, rng),
            count: Linear::new(params, &format!("{prefix}.count"), 1, rest[2], false, rng),
        })
    }

    /// Encodes instances into an `[n × d]` matrix.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], items: &[Framed]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidInput("no instances to encode".into()));
        }
        let sets = items
            .iter()
            .map(|f| normalize_scale(f.instance.points()))
            .collect::<Result<Vec<_>>>()?;
        let geo = self.points.forward(tape, p, &sets)?;
        let n = items.len();
        let mut colors = Vec::with_capacity(n * 3);
        let mut centers = Vec::with_capacity(n * 3);
        let mut counts = Vec::with_capacity(n);
        for f in items {
            colors.extend(f.instance.avg_color());
            centers.extend(cell_local_center(f.instance.center(), f.origin, f.size));
            counts.push(count_feature(f.instance.point_count()));
        }
        let colors = tape.constant(Tensor::new(vec![n, 3], colors)?);
        let centers = tape.constant(Tensor::new(vec![n, 3], centers)?);
        let counts = tape.constant(Tensor::new(vec![n, 1], counts)?);
        let a = self.color.forward(tape, p, colors)?;
        let c = self.center.forward(tape, p, centers)?;
        let k = self.count.forward(tape, p, counts)?;
        Ok(tape.concat_cols(&[geo, a, c, k])?)
    }

    /// Encodes the instances of several cells, stacked in cell order.
    pub fn forward_cells(&self, tape: &mut Tape, p: &[Var], cells: &[&Cell]) -> Result<Var> {
        let items: Vec<Framed> = cells
            .iter()
            .flat_map(|c| {
                c.instances.iter().map(|i| Framed {
                    instance: i,
                    origin: c.origin,
                    size: c.size,
                })
            })
            .collect();
        self.forward(tape, p, &items)
    }
}

/// Encodes one instance seen in the given cell frame into a `[d]` vector.
pub fn encode_instance(
    tape: &mut Tape,
    p: &[Var],
    instance: &Instance,
    origin: [f64; 2],
    size: f64,
    encoder: &InstanceEncoder,
) -> Result<Var> {
    let m = encoder.forward(tape, p, &[Framed { instance, origin, size }])?;
    Ok(tape.reshape(m, vec![encoder.d])?)
}
