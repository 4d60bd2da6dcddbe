//! Hint–instance matching as partial optimal transport with dustbins.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Cell;
use crate::tensor::{Tape, Tensor, Var};

/// Plan entries are clamped at this value before taking logs in the loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// One slot of a padded instance list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    /// Index into the cell's instance list.
    pub source: usize,
    /// Repeats are never ground-truth matches.
    pub is_copy: bool,
}

/// Brings a cell to exactly `target` instance slots: a random subset when it
/// has more, random repeats appended when it has fewer. Originals come first
/// in cell order; repeats cycle through random permutations of the cell, so
/// copy counts differ by at most one.
pub fn pad_instances(cell: &Cell, target: usize, rng: &mut impl Rng) -> Result<Vec<Slot>> {
    let n = cell.instances.len();
    if n == 0 {
        return Err(Error::InvalidInput(format!("cell {} has no instances to pad", cell.id)));
    }
    if target == 0 {
        return Err(Error::Config("padding target must be positive".into()));
    }
    if n >= target {
        let mut keep: Vec<usize> = (0..n).collect();
        if n > target {
            keep.shuffle(rng);
            keep.truncate(target);
            keep.sort_unstable();
        }
        return Ok(keep.into_iter().map(|source| Slot { source, is_copy: false }).collect());
    }
    let mut slots: Vec<Slot> = (0..n).map(|source| Slot { source, is_copy: false }).collect();
    let mut order: Vec<usize> = Vec::new();
    while slots.len() < target {
        if order.is_empty() {
            order = (0..n).collect();
            order.shuffle(rng);
        }
        slots.push(Slot {
            source: order.pop().unwrap(),
            is_copy: true,
        });
    }
    Ok(slots)
}

/// Scores `[h × p]` bordered by a dustbin row and column filled with the
/// scalar `z` (`[1 × 1]`), giving `[(h+1) × (p+1)]`.
pub fn augment_scores(tape: &mut Tape, scores: Var, z: Var) -> Result<Var> {
    let (h, p) = (tape.value(scores).rows(), tape.value(scores).cols());
    let col_ones = tape.constant(Tensor::filled(&[h, 1], 1.0));
    let row_ones = tape.constant(Tensor::filled(&[1, p + 1], 1.0));
    let col = tape.matmul(col_ones, z)?;
    let with_col = tape.concat_cols(&[scores, col])?;
    let row = tape.matmul(z, row_ones)?;
    Ok(tape.concat_rows(&[with_col, row])?)
}

/// Log-domain Sinkhorn normalisation of an augmented score matrix. Interior
/// rows and columns carry mass 1; the dustbin row carries the number of
/// instance columns and the dustbin column the number of hint rows, so both
/// sides total `h + p`. Returns the log transport plan.
pub fn log_sinkhorn(tape: &mut Tape, augmented: Var, iters: usize) -> Result<Var> {
    let (r, c) = (tape.value(augmented).rows(), tape.value(augmented).cols());
    if r < 2 || c < 2 {
        return Err(Error::InvalidInput("augmented score matrix needs at least one interior entry".into()));
    }
    let (h, p) = (r - 1, c - 1);
    let mut log_mu = vec![0.0; r];
    log_mu[h] = (p as f64).ln();
    let mut log_nu = vec![0.0; c];
    log_nu[p] = (h as f64).ln();
    let log_mu = tape.constant(Tensor::vector(log_mu));
    let log_nu = tape.constant(Tensor::vector(log_nu));
    let mut v = tape.constant(Tensor::zeros(&[c]));
    let mut u = tape.constant(Tensor::zeros(&[r]));
    for _ in 0..iters {
        let zv = tape.add_row(augmented, v)?;
        let lse = tape.logsumexp_rows(zv)?;
        u = tape.sub(log_mu, lse)?;
        let zu = tape.add_col(augmented, u)?;
        let lse = tape.logsumexp_cols(zu)?;
        v = tape.sub(log_nu, lse)?;
    }
    let zu = tape.add_col(augmented, u)?;
    Ok(tape.add_row(zu, v)?)
}

/// `(h+1) × (p+1)` transport plan from projected hint and instance features.
/// Scores are `⟨h_j, p_i⟩ / √d_m`.
pub fn sinkhorn_match(tape: &mut Tape, hints: Var, instances: Var, z: Var, iters: usize) -> Result<Var> {
    let dm = tape.value(hints).cols();
    let pt = tape.transpose(instances)?;
    let s = tape.matmul(hints, pt)?;
    let s = tape.scale(s, 1.0 / (dm as f64).sqrt());
    let aug = augment_scores(tape, s, z)?;
    let log_plan = log_sinkhorn(tape, aug, iters)?;
    Ok(tape.exp(log_plan))
}

/// Negative log-likelihood of the ground-truth assignment, averaged over its
/// terms: matched `(hint j, instance i)` pairs, unmatched instances against
/// the dustbin row, and unmatched hints against the dustbin column.
pub fn matcher_loss(
    tape: &mut Tape,
    plan: Var,
    gt_pairs: &[(usize, usize)],
    unmatched_instances: &[usize],
    unmatched_hints: &[usize],
) -> Result<Var> {
    let (r, c) = (tape.value(plan).rows(), tape.value(plan).cols());
    let (h, p) = (r - 1, c - 1);
    let mut idx = Vec::with_capacity(gt_pairs.len() + unmatched_instances.len() + unmatched_hints.len());
    for &(j, i) in gt_pairs {
        if j >= h || i >= p {
            return Err(Error::InvalidInput(format!("ground-truth pair ({j}, {i}) outside a {h}×{p} plan")));
        }
        idx.push(j * c + i);
    }
    for &i in unmatched_instances {
        if i >= p {
            return Err(Error::InvalidInput(format!("instance {i} outside a plan with {p} instances")));
        }
        idx.push(h * c + i);
    }
    for &j in unmatched_hints {
        if j >= h {
            return Err(Error::InvalidInput(format!("hint {j} outside a plan with {h} hints")));
        }
        idx.push(j * c + p);
    }
    if idx.is_empty() {
        return Err(Error::InvalidInput("matcher loss without any terms".into()));
    }
    let picked = tape.pick(plan, &idx)?;
    let logs = tape.log_clamped(picked, LOG_FLOOR);
    let m = tape.mean(logs);
    Ok(tape.scale(m, -1.0))
}

/// One accepted hint–instance correspondence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub hint: usize,
    pub instance: usize,
    pub confidence: f64,
}

/// Mutually best interior entries of the plan whose mass exceeds `threshold`.
pub fn extract_matches(plan: &Tensor, threshold: f64) -> Vec<Match> {
    let (r, c) = (plan.rows(), plan.cols());
    if r < 2 || c < 2 {
        return Vec::new();
    }
    let (h, p) = (r - 1, c - 1);
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        vals.fold((usize::MAX, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
    };
    let mut out = Vec::new();
    for j in 0..h {
        let (i, w) = argmax(&mut (0..p).map(|i| (i, plan.at(j, i))));
        if i == usize::MAX {
            continue;
        }
        let (back, _) = argmax(&mut (0..h).map(|k| (k, plan.at(k, i))));
        if back == j && w > threshold {
            out.push(Match {
                hint: j,
                instance: i,
                confidence: w,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ClassLabel, Instance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(n: usize) -> Cell {
        Cell {
            id: 0,
            origin: [0.0, 0.0],
            size: 30.0,
            instances: (0..n)
                .map(|k| Instance::new(k, ClassLabel::Car, vec![[k as f64, 0.0, 0.0, 0.0, 0.0, 0.0]]).unwrap())
                .collect(),
        }
    }

    #[test]
    fn padding_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = pad_instances(&cell(16), 16, &mut rng).unwrap();
        assert_eq!(same.iter().map(|s| s.source).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
        assert!(same.iter().all(|s| !s.is_copy));

        let grown = pad_instances(&cell(5), 16, &mut rng).unwrap();
        assert_eq!(grown.len(), 16);
        for k in 0..5 {
            assert_eq!(grown[k], Slot { source: k, is_copy: false });
            let copies = grown.iter().filter(|s| s.source == k).count();
            assert!((3..=4).contains(&copies));
        }
        assert!(grown[5..].iter().all(|s| s.is_copy));

        let shrunk = pad_instances(&cell(20), 16, &mut rng).unwrap();
        assert_eq!(shrunk.len(), 16);
        assert!(shrunk.windows(2).all(|w| w[0].source < w[1].source));
        assert!(pad_instances(&cell(0), 16, &mut rng).is_err());
    }

    fn plan_of(scores: Tensor, iters: usize) -> Tensor {
        let mut tape = Tape::new();
        let s = tape.constant(scores);
        let lp = log_sinkhorn(&mut tape, s, iters).unwrap();
        let plan = tape.exp(lp);
        tape.value(plan).clone()
    }

    #[test]
    fn dominant_entries_take_the_mass() {
        let mut rows = vec![vec![0.0; 5]; 4];
        for (j, row) in rows.iter_mut().enumerate().take(3) {
            row[j] = 8.0;
        }
        let plan = plan_of(Tensor::from_rows(&rows).unwrap(), 100);
        for j in 0..3 {
            assert!(plan.at(j, j) > 0.9, "{}", plan.at(j, j));
        }
        let m = extract_matches(&plan, 0.2);
        assert_eq!(m.iter().map(|m| (m.hint, m.instance)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn extraction_is_strict_and_injective() {
        let plan = Tensor::from_rows(&[
            vec![0.2, 0.1, 0.7],
            vec![0.1, 0.6, 0.3],
            vec![0.7, 0.3, 1.0],
        ])
        .unwrap();
        let m = extract_matches(&plan, 0.2);
        assert_eq!(m, vec![Match { hint: 1, instance: 1, confidence: 0.6 }]);
        let flat = Tensor::from_rows(&[vec![0.2, 0.1, 0.7], vec![0.1, 0.15, 0.75], vec![0.7, 0.75, 0.0]]).unwrap();
        assert!(extract_matches(&flat, 0.2).is_empty());
    }

    #[test]
    fn perfect_plan_has_zero_loss() {
        let plan = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(plan);
        let l = matcher_loss(&mut tape, p, &[(0, 0)], &[1], &[1]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        assert!(matcher_loss(&mut tape, p, &[(2, 0)], &[], &[]).is_err());
    }

    #[test]
    fn uniform_plan_loss_is_log_p() {
        let p = 16;
        let rows: Vec<Vec<f64>> = (0..7).map(|_| vec![1.0 / p as f64; p + 1]).collect();
        let mut tape = Tape::new();
        let plan = tape.constant(Tensor::from_rows(&rows).unwrap());
        let pairs: Vec<(usize, usize)> = (0..6).map(|j| (j, j)).collect();
        let l = matcher_loss(&mut tape, plan, &pairs, &[], &[]).unwrap();
        assert!((tape.value(l).item() - (p as f64).ln()).abs() < 1e-12);
    }
}
