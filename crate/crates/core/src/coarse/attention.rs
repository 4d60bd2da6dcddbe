//! Scaled dot-product attention, its relation-enhanced variant, and the two
//! kinds of pairwise relation tensors.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn check_widths(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize)> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let ok = qv.shape().len() == 2
        && kv.shape().len() == 2
        && vv.shape().len() == 2
        && qv.cols() == kv.cols()
        && kv.rows() == vv.rows()
        && kv.rows() > 0;
    if !ok {
        return Err(Error::InvalidInput(format!(
            "attention widths disagree: Q {:?}, K {:?}, V {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    Ok((kv.rows(), qv.cols()))
}

/// `softmax_rows(Q Kᵀ / √d_h) · V`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dh) = check_widths(tape, q, k, v)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
    let a = tape.softmax_rows(s)?;
    Ok(tape.matmul(a, v)?)
}

/// Attention whose values are corrected by the relation tensor mean-pooled
/// over its second axis: `softmax(Q Kᵀ / √d_h) · (V + Pool(R, 1))`.
/// `r` has shape `[N × N × d_v]` with `N` the number of keys.
pub fn rsa(tape: &mut Tape, q: Var, k: Var, v: Var, r: Var) -> Result<Var> {
    let (n, _) = check_widths(tape, q, k, v)?;
    let dv = tape.value(v).cols();
    if tape.value(r).shape() != [n, n, dv] {
        return Err(Error::InvalidInput(format!(
            "relation tensor {:?} does not match {n} keys of width {dv}",
            tape.value(r).shape()
        )));
    }
    let pooled = tape.mean_axis1(r)?;
    let v = tape.add(v, pooled)?;
    attention(tape, q, k, v)
}

/// Geometric relations `R[i][j] = W (c_i − c_j)` for centres `[N × 3]` and a
/// projection `W: [3 × d]`, as an `[N × N × d]` tensor.
pub fn point_relations(tape: &mut Tape, centers: Var, w: Var) -> Result<Var> {
    let n = tape.value(centers).rows();
    let d = tape.value(w).cols();
    let diffs = tape.pair_diff(centers)?;
    let r = tape.matmul(diffs, w)?;
    Ok(tape.reshape(r, vec![n, n, d])?)
}

/// Linguistic relations `R[i][j] = W [h_i ; h_j]` for hints `[N × d]` and a
/// projection `W: [2d × d_r]`, as an `[N × N × d_r]` tensor.
pub fn hint_relations(tape: &mut Tape, hints: Var, w: Var) -> Result<Var> {
    let n = tape.value(hints).rows();
    let d = tape.value(w).cols();
    let pairs = tape.pair_concat(hints)?;
    let r = tape.matmul(pairs, w)?;
    Ok(tape.reshape(r, vec![n, n, d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at3(t: &Tensor, i: usize, j: usize, k: usize) -> f64 {
        let s = t.shape();
        t.data()[(i * s[1] + j) * s[2] + k]
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let q = t.constant(rand_t(&mut rng, &[3, 4]));
        let k = t.constant(rand_t(&mut rng, &[1, 4]));
        let v = t.constant(rand_t(&mut rng, &[1, 5]));
        let out = attention(&mut t, q, k, v).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(out).row(i), t.value(v).row(0));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let q = t.constant(rand_t(&mut rng, &[2, 4]));
        let row = rand_t(&mut rng, &[1, 4]);
        let k = t.constant(Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec(), row.data().to_vec()]).unwrap());
        let vt = rand_t(&mut rng, &[3, 2]);
        let v = t.constant(vt.clone());
        let out = attention(&mut t, q, k, v).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| vt.at(r, c)).sum::<f64>() / 3.0;
            assert!((t.value(out).at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_relations_shift_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let q = t.constant(rand_t(&mut rng, &[4, 3]));
        let k = t.constant(rand_t(&mut rng, &[4, 3]));
        let v = t.constant(rand_t(&mut rng, &[4, 3]));
        let r_row = [0.3, -1.2, 2.0];
        let r = t.constant(Tensor::new(vec![4, 4, 3], (0..48).map(|i| r_row[i % 3]).collect()).unwrap());
        let plain = attention(&mut t, q, k, v).unwrap();
        let rel = rsa(&mut t, q, k, v, r).unwrap();
        for (i, (a, b)) in t.value(plain).data().iter().zip(t.value(rel).data()).enumerate() {
            assert!((b - a - r_row[i % 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[2, 3]));
        let k = t.constant(Tensor::zeros(&[2, 4]));
        let v = t.constant(Tensor::zeros(&[2, 3]));
        assert!(attention(&mut t, q, k, v).is_err());
        let r = t.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(rsa(&mut t, q, q, v, r).is_err());
    }

    #[test]
    fn point_relation_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let c = t.constant(rand_t(&mut rng, &[5, 3]));
        let w = t.constant(rand_t(&mut rng, &[3, 4]));
        let r = point_relations(&mut t, c, w).unwrap();
        let rv = t.value(r).clone();
        for i in 0..5 {
            for k in 0..4 {
                assert_eq!(at3(&rv, i, i, k), 0.0);
                for j in 0..5 {
                    assert!((at3(&rv, i, j, k) + at3(&rv, j, i, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hint_relations_with_left_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let hv = rand_t(&mut rng, &[3, 2]);
        let h = t.constant(hv.clone());
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let r = hint_relations(&mut t, h, w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..2 {
                    assert_eq!(at3(&t.value(r), i, j, k), hv.at(i, k));
                }
            }
        }
    }
}
