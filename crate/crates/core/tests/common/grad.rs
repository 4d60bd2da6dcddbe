//! Gradient-check cases shared by the gradcheck tests and the acceptance run.

use rand::Rng;
use retloc::coarse::{attention, hint_relations, point_relations, ranking_loss, rsa, CoarseConfig, CoarseModel};
use retloc::fine::{
    cross_attend, log_sinkhorn, matcher_loss, offset_loss, regress_offset, sinkhorn_match, CrossAttention, Regressor,
};
use retloc::nn::gather_rows;
use retloc::tensor::{grad_check, GradCheckReport, ParamSet, Tape, Tensor, TensorError, Var};

use super::{random, rng, toy_cell, toy_hints};

pub const TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> retloc::Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

impl Case {
    fn new(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> retloc::Result<Var> + 'static) -> Self {
        Self {
            name,
            inputs,
            forward: Box::new(f),
        }
    }

    fn op(name: &'static str, inputs: Vec<Tensor>, f: fn(&mut Tape, &[Var]) -> retloc::tensor::Result<Var>) -> Self {
        Self::new(name, inputs, move |t, v| Ok(f(t, v)?))
    }

    pub fn check(&self) -> GradCheckReport {
        grad_check(
            |t, v| {
                let y = (self.forward)(t, v).map_err(|e| TensorError::Usage(e.to_string()))?;
                readout(t, y)
            },
            &self.inputs,
            FD_EPS,
        )
        .unwrap()
    }
}

/// `Σ y ⊙ W` with a fixed pseudo-random `W`, so every output coordinate
/// carries a different weight.
fn readout(t: &mut Tape, y: Var) -> retloc::tensor::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = random(&shape, &mut rng(shape.iter().product::<usize>() as u64));
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

/// Entries bounded away from zero, so relu kinks stay far from the
/// finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = r.gen_range(0.1..1.0);
            if r.gen() {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn elementwise() -> Vec<Case> {
    let mut g = rng(1);
    let a = random(&[3, 4], &mut g);
    let b = random(&[3, 4], &mut g);
    let m = random(&[4, 2], &mut g);
    let row = random(&[4], &mut g);
    let col = random(&[3], &mut g);
    let pos = Tensor::new(vec![6], vec![0.2, 0.5, 1.0, 2.0, 0.7, 3.0]).unwrap();
    vec![
        Case::op("matmul", vec![a.clone(), m], |t, v| t.matmul(v[0], v[1])),
        Case::op("transpose", vec![a.clone()], |t, v| t.transpose(v[0])),
        Case::op("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        Case::op("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        Case::op("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1])),
        Case::op("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7))),
        Case::op("add_scalar", vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        Case::op("add_row", vec![a.clone(), row], |t, v| t.add_row(v[0], v[1])),
        Case::op("add_col", vec![a.clone(), col], |t, v| t.add_col(v[0], v[1])),
        Case::op("relu", vec![away_from_zero(&[3, 4], 2)], |t, v| Ok(t.relu(v[0]))),
        Case::op("exp", vec![a.clone()], |t, v| Ok(t.exp(v[0]))),
        Case::op("log_clamped", vec![pos], |t, v| Ok(t.log_clamped(v[0], 1e-9))),
        Case::op("dot", vec![random(&[5], &mut g), random(&[5], &mut g)], |t, v| t.dot(v[0], v[1])),
        Case::op("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))),
        Case::op("mean", vec![a], |t, v| Ok(t.mean(v[0]))),
    ]
}

pub fn normalisation() -> Vec<Case> {
    let mut g = rng(5);
    let a = random(&[3, 5], &mut g);
    let gamma = random(&[5], &mut g);
    let beta = random(&[5], &mut g);
    vec![
        Case::op("softmax_rows", vec![a.clone()], |t, v| t.softmax_rows(v[0])),
        Case::op("logsumexp_rows", vec![a.clone()], |t, v| t.logsumexp_rows(v[0])),
        Case::op("logsumexp_cols", vec![a.clone()], |t, v| t.logsumexp_cols(v[0])),
        Case::op("layer_norm", vec![a, gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    ]
}

pub fn shapes() -> Vec<Case> {
    let mut g = rng(7);
    let a = random(&[4, 3], &mut g);
    let b = random(&[4, 2], &mut g);
    let c = random(&[2, 3], &mut g);
    vec![
        Case::op("concat_cols", vec![a.clone(), b], |t, v| t.concat_cols(&[v[0], v[1]])),
        Case::op("concat_rows", vec![a.clone(), c], |t, v| t.concat_rows(&[v[0], v[1]])),
        Case::op("slice_cols", vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2)),
        Case::op("slice_rows", vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2)),
        Case::op("reshape", vec![a.clone()], |t, v| t.reshape(v[0], vec![2, 6])),
        Case::op("pick", vec![a.clone()], |t, v| t.pick(v[0], &[0, 5, 5, 11])),
        Case::op("gather_rows", vec![a], |t, v| gather_rows(t, v[0], &[3, 0, 3])),
    ]
}

pub fn pooling() -> Vec<Case> {
    let mut g = rng(9);
    let a = random(&[5, 3], &mut g);
    vec![
        Case::op("mean_rows", vec![a.clone()], |t, v| t.mean_rows(v[0])),
        Case::op("max_rows", vec![a.clone()], |t, v| t.max_rows(v[0])),
        Case::op("segment_mean_rows", vec![a.clone()], |t, v| t.segment_mean_rows(v[0], &[2, 3])),
        Case::op("segment_max_rows", vec![a.clone()], |t, v| t.segment_max_rows(v[0], &[1, 4])),
        Case::op("gather_mean", vec![a.clone()], |t, v| t.gather_mean(v[0], &[vec![0, 2], vec![4], vec![1, 1, 3]])),
        Case::op("pair_concat", vec![a.clone()], |t, v| t.pair_concat(v[0])),
        Case::op("pair_diff", vec![a], |t, v| t.pair_diff(v[0])),
        Case::op("mean_axis1", vec![random(&[3, 3, 2], &mut g)], |t, v| t.mean_axis1(v[0])),
    ]
}

pub fn attention_cases() -> Vec<Case> {
    let mut g = rng(11);
    let q = random(&[3, 4], &mut g);
    let k = random(&[3, 4], &mut g);
    let v = random(&[3, 2], &mut g);
    let r = random(&[3, 3, 2], &mut g);
    vec![
        Case::new("attention", vec![q.clone(), k.clone(), v.clone()], |t, x| attention(t, x[0], x[1], x[2])),
        Case::new("rsa", vec![q, k, v, r], |t, x| rsa(t, x[0], x[1], x[2], x[3])),
        Case::new("point_relations", vec![random(&[4, 3], &mut g), random(&[3, 2], &mut g)], |t, x| {
            point_relations(t, x[0], x[1])
        }),
        Case::new("hint_relations", vec![random(&[3, 2], &mut g), random(&[4, 3], &mut g)], |t, x| {
            hint_relations(t, x[0], x[1])
        }),
    ]
}

pub fn losses() -> Vec<Case> {
    let mut g = rng(13);
    let hints = random(&[2, 3], &mut g);
    let inst = random(&[4, 3], &mut g);
    let z = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
    let truth = random(&[3, 2], &mut g);
    vec![
        Case::new("log_sinkhorn", vec![random(&[3, 5], &mut g)], |t, x| log_sinkhorn(t, x[0], 30)),
        Case::new("sinkhorn_match", vec![hints.clone(), inst.clone(), z.clone()], |t, x| {
            sinkhorn_match(t, x[0], x[1], x[2], 30)
        }),
        Case::new("matcher_loss", vec![hints, inst, z], |t, x| {
            let plan = sinkhorn_match(t, x[0], x[1], x[2], 30)?;
            matcher_loss(t, plan, &[(0, 2)], &[0, 1, 3], &[1])
        }),
        Case::new("ranking_loss", vec![random(&[3, 4], &mut g), random(&[3, 4], &mut g)], |t, x| {
            ranking_loss(t, x[0], x[1], 0.35)
        }),
        Case::new("offset_loss", vec![random(&[3, 2], &mut g)], move |t, x| {
            let y = t.constant(truth.clone());
            offset_loss(t, x[0], y)
        }),
    ]
}

pub fn all_ops() -> Vec<Case> {
    [elementwise(), normalisation(), shapes(), pooling(), attention_cases(), losses()].into_iter().flatten().collect()
}

/// Both encoders of the tiny coarse model (d=12, h=2, L=1) on 2 cells × 3
/// instances and 2 queries × 3 hints, differentiated w.r.t. every parameter.
pub fn tiny_coarse() -> Case {
    let cfg = CoarseConfig {
        d: 12,
        heads: 2,
        layers: 1,
        hidden: 16,
        ..CoarseConfig::default()
    };
    let model = CoarseModel::new(cfg, 3).unwrap();
    let mut g = rng(17);
    let cells: Vec<_> = (0..2).map(|i| toy_cell(i, 3, &mut g)).collect();
    let hints: Vec<Vec<_>> = (0..2).map(|_| toy_hints(3, &mut g)).collect();
    let inputs = model.params.values();
    Case::new("coarse model", inputs, move |t, p| {
        let c = model.encode_cells(t, p, &cells.iter().collect::<Vec<_>>())?;
        let q = model.encode_queries(t, p, &hints.iter().map(|h| h.iter().collect()).collect::<Vec<_>>())?;
        Ok(t.concat_rows(&[c, q])?)
    })
}

/// Replaces every parameter with small random values so zero-initialised
/// layers do not hide gradients.
fn randomize(params: &mut ParamSet, seed: u64) {
    let mut g = rng(seed);
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let mut v = random(&shape, &mut g);
        for x in v.data_mut() {
            *x *= 0.5;
        }
        p.value = v;
    }
}

/// Cross-attention followed by the offset regressor, w.r.t. their parameters
/// and both feature inputs.
pub fn cross_attention_regressor() -> Case {
    let d = 6;
    let mut g = rng(19);
    let mut params = ParamSet::new();
    let ca = CrossAttention::new("ca", d, &mut params, &mut g);
    let reg = Regressor::new("reg", d, &mut params, &mut g);
    randomize(&mut params, 23);
    let n = params.len();
    let mut inputs = params.values();
    inputs.push(random(&[2, d], &mut g));
    inputs.push(random(&[5, d], &mut g));
    Case::new("cross-attention + regressor", inputs, move |t, v| {
        let fused = cross_attend(t, &v[..n], v[n], v[n + 1], &ca)?;
        regress_offset(t, &v[..n], fused, &reg)
    })
}
