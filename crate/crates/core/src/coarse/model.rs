use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{attention, hint_relations, point_relations, rsa};
use crate::encoder::{cell_local_center, InstanceEncoder};
use crate::error::{Error, Result};
use crate::language::{HintEmbedder, WordGroups};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::scene::Cell;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Items encoded per tape during inference.
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Geometric relations in the cell branch.
    pub point_relations: bool,
    /// Linguistic relations in the query branch.
    pub hint_relations: bool,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            layers: 2,
            hidden: 2048,
            point_relations: true,
            hint_relations: true,
        }
    }
}

impl CoarseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 6 {
            return Err(Error::Config(format!("d = {} must be at least 6", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("layers and hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationSource {
    /// `W (c_i − c_j)` from cell-local instance centres.
    Points,
    /// `W [h_i ; h_j]` from the normalised layer input.
    Hints,
}

/// Pre-norm transformer block with relation-enhanced self-attention:
/// `x + RSA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct RsaLayer {
    pub d: usize,
    pub heads: usize,
    pub source: RelationSource,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `None` turns the block into plain self-attention.
    pub relation: Option<Linear>,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl RsaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        source: RelationSource,
        with_relations: bool,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rel_in = match source {
            RelationSource::Points => 3,
            RelationSource::Hints => 2 * d,
        };
        Self {
            d,
            heads,
            source,
            wq: Linear::new(params, &format!("{name}.wq"), d, d, true, rng),
            wk: Linear::new(params, &format!("{name}.wk"), d, d, true, rng),
            wv: Linear::new(params, &format!("{name}.wv"), d, d, true, rng),
            wo: Linear::new(params, &format!("{name}.wo"), d, d, true, rng),
            relation: with_relations.then(|| Linear::new(params, &format!("{name}.rel"), rel_in, d, false, rng)),
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), d),
            ln_ffn: LayerNorm::new(params, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(params, &format!("{name}.ffn"), d, hidden, d, rng),
        }
    }

    /// Applies the block to stacked sets of sizes `lens`; attention stays
    /// within each set. `centers` (`[Σn × 3]`) is required for point relations.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, lens: &[usize], centers: Option<Var>) -> Result<Var> {
        let y = self.ln_attn.forward(tape, p, x)?;
        let q = self.wq.forward(tape, p, y)?;
        let k = self.wk.forward(tape, p, y)?;
        let v = self.wv.forward(tape, p, y)?;
        let dh = self.d / self.heads;
        let head_w: Vec<Var> = match &self.relation {
            Some(rel) => (0..self.heads)
                .map(|h| tape.slice_cols(p[rel.w], h * dh, dh))
                .collect::<std::result::Result<_, _>>()?,
            None => Vec::new(),
        };
        let mut segments = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &n in lens {
            let qs = tape.slice_rows(q, off, n)?;
            let ks = tape.slice_rows(k, off, n)?;
            let vs = tape.slice_rows(v, off, n)?;
            let rel_input = match (&self.relation, self.source) {
                (None, _) => None,
                (Some(_), RelationSource::Points) => {
                    let c = centers.ok_or_else(|| Error::InvalidInput("point relations need centres".into()))?;
                    Some(tape.slice_rows(c, off, n)?)
                }
                (Some(_), RelationSource::Hints) => Some(tape.slice_rows(y, off, n)?),
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(qs, h * dh, dh)?;
                let kh = tape.slice_cols(ks, h * dh, dh)?;
                let vh = tape.slice_cols(vs, h * dh, dh)?;
                let out = match rel_input {
                    None => attention(tape, qh, kh, vh)?,
                    Some(src) => {
                        let r = match self.source {
                            RelationSource::Points => point_relations(tape, src, head_w[h])?,
                            RelationSource::Hints => hint_relations(tape, src, head_w[h])?,
                        };
                        rsa(tape, qh, kh, vh, r)?
                    }
                };
                heads.push(out);
            }
            segments.push(tape.concat_cols(&heads)?);
            off += n;
        }
        let attn = tape.concat_rows(&segments)?;
        let attn = self.wo.forward(tape, p, attn)?;
        let x = tape.add(x, attn)?;
        let z = self.ln_ffn.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, z)?;
        Ok(tape.add(x, f)?)
    }
}

/// Two-branch retrieval model: cells and text queries are embedded into a
/// shared `d`-dimensional space.
#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub config: CoarseConfig,
    pub params: ParamSet,
    pub instances: InstanceEncoder,
    pub words: HintEmbedder,
    pub cell_layers: Vec<RsaLayer>,
    pub query_layers: Vec<RsaLayer>,
}

impl CoarseModel {
    pub fn new(config: CoarseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let instances = InstanceEncoder::new("coarse.instance", c.d, &mut params, &mut rng)?;
        let words = HintEmbedder::new("coarse.text", c.d, &mut params, &mut rng)?;
        let cell_layers = (0..c.layers)
            .map(|l| {
                let name = format!("coarse.cell.layer{l}");
                RsaLayer::new(&name, c.d, c.heads, c.hidden, RelationSource::Points, c.point_relations, &mut params, &mut rng)
            })
            .collect();
        let query_layers = (0..c.layers)
            .map(|l| {
                let name = format!("coarse.query.layer{l}");
                RsaLayer::new(&name, c.d, c.heads, c.hidden, RelationSource::Hints, c.hint_relations, &mut params, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            params,
            instances,
            words,
            cell_layers,
            query_layers,
        })
    }

    /// `[B × d]` cell embeddings.
    pub fn encode_cells(&self, tape: &mut Tape, p: &[Var], cells: &[&Cell]) -> Result<Var> {
        if cells.iter().any(|c| c.instances.is_empty()) || cells.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty cell".into()));
        }
        let lens: Vec<usize> = cells.iter().map(|c| c.instances.len()).collect();
        let mut x = self.instances.forward_cells(tape, p, cells)?;
        let centers: Vec<f64> = cells
            .iter()
            .flat_map(|c| c.instances.iter().flat_map(|i| cell_local_center(i.center(), c.origin, c.size)))
            .collect();
        let centers = tape.constant(Tensor::new(vec![centers.len() / 3, 3], centers)?);
        for layer in &self.cell_layers {
            x = layer.forward(tape, p, x, &lens, Some(centers))?;
        }
        Ok(tape.segment_mean_rows(x, &lens)?)
    }

    /// `[B × d]` query embeddings, one row per hint list.
    pub fn encode_queries(&self, tape: &mut Tape, p: &[Var], queries: &[Vec<&WordGroups>]) -> Result<Var> {
        if queries.is_empty() || queries.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("cannot encode an empty hint list".into()));
        }
        let lens: Vec<usize> = queries.iter().map(Vec::len).collect();
        let flat: Vec<&WordGroups> = queries.iter().flatten().copied().collect();
        let mut x = self.words.encode(tape, p, &flat)?;
        for layer in &self.query_layers {
            x = layer.forward(tape, p, x, &lens, None)?;
        }
        Ok(tape.segment_mean_rows(x, &lens)?)
    }

    /// Inference-time cell embeddings (parameters read-only).
    pub fn cell_embeddings(&self, cells: &[&Cell]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Vec<Vec<f64>>> = cells
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let p = tape.bind_frozen(&self.params);
                let e = self.encode_cells(&mut tape, &p, chunk)?;
                Ok(rows(tape.value(e)))
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Inference-time query embeddings (parameters read-only).
    pub fn query_embeddings(&self, queries: &[Vec<&WordGroups>]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Vec<Vec<f64>>> = queries
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let p = tape.bind_frozen(&self.params);
                let e = self.encode_queries(&mut tape, &p, chunk)?;
                Ok(rows(tape.value(e)))
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}
