//! Relation-enhanced transformer for text-to-cell retrieval.

mod attention;
mod model;

pub use attention::{attention, hint_relations, point_relations, rsa};
pub use model::{CoarseConfig, CoarseModel, RelationSource, RsaLayer};

use crate::error::{Error, Result};
use crate::language::{Hint, WordGroups};
use crate::scene::Cell;
use crate::tensor::{Tape, Tensor, Var};

/// Margin of the ranking loss.
pub const DEFAULT_MARGIN: f64 = 0.35;

/// Embedding of a single cell.
pub fn encode_cell(cell: &Cell, model: &CoarseModel) -> Result<Vec<f64>> {
    Ok(model.cell_embeddings(&[cell])?.remove(0))
}

/// Embedding of a single hint list.
pub fn encode_query(hints: &[Hint], model: &CoarseModel) -> Result<Vec<f64>> {
    let groups: Vec<&WordGroups> = hints.iter().map(|h| &h.groups).collect();
    Ok(model.query_embeddings(&[groups])?.remove(0))
}

/// Bidirectional hinge ranking loss over a batch of matched rows:
/// `Σ_m Σ_{n≠m} [α − ⟨C_m,T_m⟩ + ⟨C_m,T_n⟩]₊ + [α − ⟨C_m,T_m⟩ + ⟨C_n,T_m⟩]₊`.
pub fn ranking_loss(tape: &mut Tape, cells: Var, queries: Var, alpha: f64) -> Result<Var> {
    let b = tape.value(cells).rows();
    let negatives: Vec<bool> = (0..b * b).map(|i| i / b != i % b).collect();
    ranking_loss_masked(tape, cells, queries, alpha, &negatives)
}

/// [`ranking_loss`] restricted to the pairs flagged in `negatives`
/// (row-major `[cell m][query n]`). Pairs where cell `m` also contains the
/// target of query `n` should be left out.
pub fn ranking_loss_masked(tape: &mut Tape, cells: Var, queries: Var, alpha: f64, negatives: &[bool]) -> Result<Var> {
    let (cv, tv) = (tape.value(cells), tape.value(queries));
    if cv.shape() != tv.shape() || cv.shape().len() != 2 {
        return Err(Error::InvalidInput(format!(
            "ranking loss needs equal [B × d] inputs, got {:?} and {:?}",
            cv.shape(),
            tv.shape()
        )));
    }
    let b = cv.rows();
    if b < 2 {
        return Err(Error::InvalidInput("ranking loss needs a batch of at least 2".into()));
    }
    let qt = tape.transpose(queries)?;
    let s = tape.matmul(cells, qt)?; // s[m][n] = ⟨C_m, T_n⟩
    let diag = tape.pick(s, &(0..b).map(|m| m * b + m).collect::<Vec<_>>())?;
    let neg_diag = tape.scale(diag, -1.0);
    if negatives.len() != b * b || (0..b).any(|m| negatives[m * b + m]) {
        return Err(Error::InvalidInput("negative mask must be B×B with a false diagonal".into()));
    }
    let off_diag = tape.constant(Tensor::new(
        vec![b, b],
        negatives.iter().map(|&n| if n { 1.0 } else { 0.0 }).collect(),
    )?);
    // cell m against the other queries: row-wise positive
    let by_row = tape.add_col(s, neg_diag)?;
    // query m against the other cells: column-wise positive
    let by_col = tape.add_row(s, neg_diag)?;
    let mut total = None;
    for x in [by_row, by_col] {
        let x = tape.add_scalar(x, alpha);
        let x = tape.relu(x);
        let x = tape.mul(x, off_diag)?;
        let sx = tape.sum(x);
        total = Some(match total {
            None => sx,
            Some(t) => tape.add(t, sx)?,
        });
    }
    Ok(total.unwrap())
}

/// Cell embeddings indexed for retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct CellIndex {
    pub ids: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

impl CellIndex {
    pub fn build(model: &CoarseModel, cells: &[&Cell]) -> Result<Self> {
        Ok(Self {
            ids: cells.iter().map(|c| c.id).collect(),
            embeddings: model.cell_embeddings(cells)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ids of the `k` cells with the largest inner product with `query`,
/// best first. Ties go to the lower cell id.
pub fn retrieve_topk(query: &[f64], index: &CellIndex, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = index
        .embeddings
        .iter()
        .zip(&index.ids)
        .map(|(e, &id)| (e.iter().zip(query).map(|(a, b)| a * b).sum(), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}
