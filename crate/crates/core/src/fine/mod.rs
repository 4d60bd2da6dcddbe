//! Fine localisation inside one cell: hint–instance matching, cross-attention
//! fusion and per-match offset regression.

mod matching;
mod regress;

pub use matching::{
    augment_scores, extract_matches, log_sinkhorn, matcher_loss, pad_instances, sinkhorn_match, Match, Slot,
    LOG_FLOOR,
};
pub use regress::{
    combine_prediction, cross_attend, offset_loss, regress_offset, CrossAttention, Prediction, Regressor, Vote,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Framed, InstanceEncoder};
use crate::error::{Error, Result};
use crate::language::{HintEmbedder, WordGroups};
use crate::nn::{gather_rows, Linear};
use crate::scene::Cell;
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    pub d: usize,
    /// Width of the matching space.
    pub d_m: usize,
    pub sinkhorn_iters: usize,
    /// Instances per cell after padding.
    pub pad_to: usize,
    /// Matches need a plan mass strictly above this.
    pub threshold: f64,
    /// Off for the ablation that regresses from the hint features alone.
    pub cross_attention: bool,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self {
            d: 128,
            d_m: 64,
            sinkhorn_iters: 100,
            pad_to: 16,
            threshold: 0.2,
            cross_attention: true,
        }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 6 || self.d_m == 0 || self.pad_to == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::Config(
                "fine stage needs d ≥ 6 and positive d_m, pad_to and sinkhorn_iters".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("match threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Parameter-name prefixes of the matching half of the model. These are
/// frozen while the regressor trains.
pub const MATCHER_PREFIXES: [&str; 3] = ["fine.instance.", "fine.text.", "fine.matcher."];

pub fn is_matcher_param(name: &str) -> bool {
    MATCHER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct FineModel {
    pub config: FineConfig,
    pub params: ParamSet,
    pub instances: InstanceEncoder,
    pub words: HintEmbedder,
    pub hint_proj: Linear,
    pub instance_proj: Linear,
    /// Dustbin score `z`, `[1 × 1]`.
    pub dustbin: ParamId,
    pub cross: CrossAttention,
    pub regressor: Regressor,
}

/// A query paired with one cell, instances already padded.
#[derive(Clone, Debug)]
pub struct FineInput<'a> {
    pub cell: &'a Cell,
    pub slots: Vec<Slot>,
    pub hints: Vec<&'a WordGroups>,
}

/// Tape handles produced by the matching half for one input.
#[derive(Clone, Copy, Debug)]
pub struct MatchForward {
    /// Hint features `[h × d]`.
    pub hints: Var,
    /// Padded instance features `[pad_to × d]`.
    pub instances: Var,
    /// Transport plan `[(h+1) × (pad_to+1)]`.
    pub plan: Var,
}

/// Ground-truth assignment of hints to padded slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_instances: Vec<usize>,
    pub unmatched_hints: Vec<usize>,
}

/// Hint `j` referring to instance id `gt_ids[j]` matches the original (never
/// a repeat) slot holding that instance, if the cell kept it.
pub fn ground_truth(cell: &Cell, slots: &[Slot], gt_ids: &[usize]) -> GroundTruth {
    let mut gt = GroundTruth::default();
    let mut used = vec![false; slots.len()];
    for (j, &id) in gt_ids.iter().enumerate() {
        let hit = slots
            .iter()
            .position(|s| !s.is_copy && cell.instances[s.source].id == id);
        match hit {
            Some(i) => {
                gt.pairs.push((j, i));
                used[i] = true;
            }
            None => gt.unmatched_hints.push(j),
        }
    }
    gt.unmatched_instances = (0..slots.len()).filter(|&i| !used[i]).collect();
    gt
}

/// Whether a match points at the instance the hint refers to (any copy).
pub fn is_correct(m: &Match, cell: &Cell, slots: &[Slot], gt_ids: &[usize]) -> bool {
    cell.instances[slots[m.instance].source].id == gt_ids[m.hint]
}

/// Result of localising a query within one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub cell_id: usize,
    /// Matches with `instance` mapped back to the scene instance id.
    pub matches: Vec<Match>,
    pub prediction: Prediction,
}

impl FineModel {
    pub fn new(config: FineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d;
        let instances = InstanceEncoder::new("fine.instance", d, &mut params, &mut rng)?;
        let words = HintEmbedder::new("fine.text", d, &mut params, &mut rng)?;
        let hint_proj = Linear::new(&mut params, "fine.matcher.hint_proj", d, config.d_m, true, &mut rng);
        let instance_proj = Linear::new(&mut params, "fine.matcher.instance_proj", d, config.d_m, true, &mut rng);
        let dustbin = params.add("fine.matcher.dustbin", Tensor::filled(&[1, 1], 1.0));
        let cross = CrossAttention::new("fine.cross", d, &mut params, &mut rng);
        let regressor = Regressor::new("fine.regressor", d, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            instances,
            words,
            hint_proj,
            instance_proj,
            dustbin,
            cross,
            regressor,
        })
    }

    /// Pads a cell with a seeded generator.
    pub fn pad(&self, cell: &Cell, seed: u64) -> Result<Vec<Slot>> {
        pad_instances(cell, self.config.pad_to, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Runs the matching half for a batch of inputs.
    pub fn match_forward(&self, tape: &mut Tape, p: &[Var], batch: &[FineInput]) -> Result<Vec<MatchForward>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = batch.iter().find(|b| b.hints.is_empty() || b.slots.is_empty()) {
            return Err(Error::InvalidInput(format!("fine input for cell {} has no hints or slots", bad.cell.id)));
        }
        let items: Vec<Framed> = batch
            .iter()
            .flat_map(|b| {
                b.cell.instances.iter().map(|i| Framed {
                    instance: i,
                    origin: b.cell.origin,
                    size: b.cell.size,
                })
            })
            .collect();
        let all_inst = self.instances.forward(tape, p, &items)?;
        let hint_groups: Vec<&WordGroups> = batch.iter().flat_map(|b| b.hints.iter().copied()).collect();
        let all_hints = self.words.encode(tape, p, &hint_groups)?;
        let mut out = Vec::with_capacity(batch.len());
        let (mut inst_off, mut hint_off) = (0, 0);
        for b in batch {
            let rows: Vec<usize> = b.slots.iter().map(|s| inst_off + s.source).collect();
            let inst = gather_rows(tape, all_inst, &rows)?;
            let hints = tape.slice_rows(all_hints, hint_off, b.hints.len())?;
            let hp = self.hint_proj.forward(tape, p, hints)?;
            let ip = self.instance_proj.forward(tape, p, inst)?;
            let plan = sinkhorn_match(tape, hp, ip, p[self.dustbin], self.config.sinkhorn_iters)?;
            out.push(MatchForward {
                hints,
                instances: inst,
                plan,
            });
            inst_off += b.cell.instances.len();
            hint_off += b.hints.len();
        }
        Ok(out)
    }

    /// Offsets `[m × 2]` for the hints of `matches`.
    pub fn regress(&self, tape: &mut Tape, p: &[Var], fwd: &MatchForward, matches: &[Match]) -> Result<Var> {
        if matches.is_empty() {
            return Err(Error::InvalidInput("regression needs at least one match".into()));
        }
        let rows: Vec<usize> = matches.iter().map(|m| m.hint).collect();
        let h = gather_rows(tape, fwd.hints, &rows)?;
        let fused = if self.config.cross_attention {
            cross_attend(tape, p, h, fwd.instances, &self.cross)?
        } else {
            h
        };
        regress_offset(tape, p, fused, &self.regressor)
    }

    /// Matches, regresses and combines for one query inside one cell.
    pub fn localize(&self, hints: &[&WordGroups], cell: &Cell, pad_seed: u64) -> Result<CellEstimate> {
        let slots = self.pad(cell, pad_seed)?;
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.params);
        let input = FineInput {
            cell,
            slots: slots.clone(),
            hints: hints.to_vec(),
        };
        let fwd = self.match_forward(&mut tape, &p, std::slice::from_ref(&input))?[0];
        let plan = tape.value(fwd.plan).clone();
        if plan.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite transport plan for cell {}", cell.id)));
        }
        let matches = extract_matches(&plan, self.config.threshold);
        let votes = if matches.is_empty() {
            Vec::new()
        } else {
            let off = self.regress(&mut tape, &p, &fwd, &matches)?;
            let off = tape.value(off);
            matches
                .iter()
                .enumerate()
                .map(|(k, m)| Vote {
                    center: cell.instances[slots[m.instance].source].center_2d(),
                    offset: [off.at(k, 0), off.at(k, 1)],
                    confidence: m.confidence,
                })
                .collect()
        };
        let prediction = combine_prediction(&votes, cell.center());
        Ok(CellEstimate {
            cell_id: cell.id,
            matches: matches
                .iter()
                .map(|m| Match {
                    instance: cell.instances[slots[m.instance].source].id,
                    ..*m
                })
                .collect(),
            prediction,
        })
    }
}
