//! Cross-attention fusion, offset regression and the weighted position
//! estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::attention;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamSet, Tape, Var};

/// `H̃ = LN(H + Attn(H W^Q, P W^K, P W^V))`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ln: LayerNorm,
}

impl CrossAttention {
    pub fn new(prefix: &str, d: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(params, &format!("{prefix}.wq"), d, d, false, rng),
            wk: Linear::new(params, &format!("{prefix}.wk"), d, d, false, rng),
            wv: Linear::new(params, &format!("{prefix}.wv"), d, d, false, rng),
            ln: LayerNorm::new(params, &format!("{prefix}.ln"), d),
        }
    }
}

/// Updates hint features `[m × d]` with information from all instances `[n × d]`.
pub fn cross_attend(tape: &mut Tape, p: &[Var], hints: Var, instances: Var, block: &CrossAttention) -> Result<Var> {
    let q = block.wq.forward(tape, p, hints)?;
    let k = block.wk.forward(tape, p, instances)?;
    let v = block.wv.forward(tape, p, instances)?;
    let ca = attention(tape, q, k, v)?;
    let sum = tape.add(hints, ca)?;
    Ok(block.ln.forward(tape, p, sum)?)
}

/// Three-layer perceptron `d → d → d → 2`; the last layer starts at zero.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Regressor {
    pub fn new(prefix: &str, d: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(params, &format!("{prefix}.l1"), d, d, true, rng),
            l2: Linear::new(params, &format!("{prefix}.l2"), d, d, true, rng),
            l3: Linear::zeros(params, &format!("{prefix}.l3"), d, 2, true),
        }
    }
}

/// Offsets `[m × 2]` (metres, instance centre → target) for fused hints `[m × d]`.
pub fn regress_offset(tape: &mut Tape, p: &[Var], fused: Var, regressor: &Regressor) -> Result<Var> {
    let h = regressor.l1.forward(tape, p, fused)?;
    let h = tape.relu(h);
    let h = regressor.l2.forward(tape, p, h)?;
    let h = tape.relu(h);
    Ok(regressor.l3.forward(tape, p, h)?)
}

/// Mean over pairs of the squared Euclidean error between predicted and
/// ground-truth offsets (both `[m × 2]`).
pub fn offset_loss(tape: &mut Tape, predicted: Var, truth: Var) -> Result<Var> {
    let m = tape.value(predicted).rows().max(1);
    let diff = tape.sub(predicted, truth)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / m as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub position: [f64; 2],
    /// No match survived; `position` is the cell centre.
    pub fallback: bool,
}

/// One surviving match: instance centre, regressed offset and confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote {
    pub center: [f64; 2],
    pub offset: [f64; 2],
    pub confidence: f64,
}

/// Confidence-weighted mean of `center + offset` over the votes, or the cell
/// centre (flagged) when there are none.
pub fn combine_prediction(votes: &[Vote], cell_center: [f64; 2]) -> Prediction {
    let total: f64 = votes.iter().map(|v| v.confidence).sum();
    if votes.is_empty() || total <= 0.0 {
        return Prediction {
            position: cell_center,
            fallback: true,
        };
    }
    let mut pos = [0.0; 2];
    for v in votes {
        let w = v.confidence / total;
        for k in 0..2 {
            pos[k] += w * (v.center[k] + v.offset[k]);
        }
    }
    Prediction {
        position: pos,
        fallback: false,
    }
}
