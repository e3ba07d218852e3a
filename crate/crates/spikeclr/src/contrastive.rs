//! Normalized-temperature cross-entropy over paired embeddings, plus the
//! time aggregation used to pool per-step spiking features before the loss.
//!
//! Rows of the embedding matrix are laid out in positive pairs: rows 2k and
//! 2k + 1 come from two views of the same source. For anchor i with partner
//! j the loss is
//!   l_i = -log( exp(S[i][j] / tau) / sum_{k != i} exp(S[i][k] / tau) )
//! with S the cosine similarity matrix, averaged over all 2N anchors.

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};

/// Additive mask that removes self-similarity from the denominator.
const DIAG_MASK: f64 = -1e30;

fn check_pairs(shape: &[usize]) -> Result<usize> {
    if shape.len() != 2 {
        return Err(Error::shape("nt_xent", format!("need [2N, D] embeddings, got {:?}", shape)));
    }
    let rows = shape[0];
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::shape(
            "nt_xent",
            format!("need an even row count of at least 2, got {rows}"),
        ));
    }
    Ok(rows)
}

/// Pairwise cosine similarities between rows of `z`.
pub fn cosine_sim_matrix(z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zid = tape.constant(z.clone());
    let zn = tape.l2_normalize_rows(zid)?;
    let zt = tape.transpose2(zn)?;
    let s = tape.matmul(zn, zt)?;
    Ok(tape.value(s).clone())
}

/// Contrastive loss on the tape, differentiable end to end.
pub fn nt_xent_tape(tape: &mut Tape, z: ValueId, tau: f64) -> Result<ValueId> {
    let rows = check_pairs(tape.value(z).shape())?;
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let zn = tape.l2_normalize_rows(z)?;
    let zt = tape.transpose2(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let sim = tape.scale(sim, 1.0 / tau);

    let mut diag = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        diag.data_mut()[i * rows + i] = DIAG_MASK;
    }
    let diag = tape.constant(diag);
    let masked = tape.add(sim, diag)?;

    let mut pairs = Tensor::zeros(&[rows, rows]);
    for k in 0..rows / 2 {
        pairs.data_mut()[(2 * k) * rows + 2 * k + 1] = 1.0;
        pairs.data_mut()[(2 * k + 1) * rows + 2 * k] = 1.0;
    }
    let pairs = tape.constant(pairs);

    let lse = tape.row_logsumexp(masked)?;
    let picked = tape.mul(masked, pairs)?;
    let pos = tape.sum_axis(picked, 1)?;
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_anchor))
}

/// Loss value for a fixed embedding matrix.
pub fn nt_xent(z: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zid = tape.constant(z.clone());
    let loss = nt_xent_tape(&mut tape, zid, tau)?;
    tape.value(loss).item()
}

/// Mean of per-step embeddings over time. With one step the values pass
/// through unchanged.
pub fn aggregate_time_mean(tape: &mut Tape, steps: &[ValueId]) -> Result<ValueId> {
    if steps.is_empty() {
        return Err(Error::shape("aggregate_time_mean", "no steps given"));
    }
    let mut acc = steps[0];
    for &s in &steps[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / steps.len() as f64))
}

/// Per-step contrastive loss averaged over time:
/// (1/T) * sum_t nt_xent(z_t).
pub fn temporal_nt_xent(tape: &mut Tape, steps: &[ValueId], tau: f64) -> Result<ValueId> {
    if steps.is_empty() {
        return Err(Error::shape("temporal_nt_xent", "no steps given"));
    }
    let mut acc = nt_xent_tape(tape, steps[0], tau)?;
    for &s in &steps[1..] {
        let l = nt_xent_tape(tape, s, tau)?;
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / steps.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_embeddings(seed: u64, rows: usize, d: usize) -> Tensor {
        let mut rng = stream_rng(seed, "ntx-test", &[]);
        let data = (0..rows * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![rows, d], data).unwrap()
    }

    /// Direct transcription of the loss definition: normalize, dot products,
    /// plain exp sums. Shares no code with the tape path.
    fn brute_force(z: &Tensor, tau: f64) -> f64 {
        let (rows, d) = (z.shape()[0], z.shape()[1]);
        let mut zn = vec![vec![0.0; d]; rows];
        for i in 0..rows {
            let row = &z.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                zn[i][0] = 1.0;
            } else {
                for (o, &v) in zn[i].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let sim = |i: usize, k: usize| zn[i].iter().zip(&zn[k]).map(|(a, b)| a * b).sum::<f64>();
        let mut total = 0.0;
        for i in 0..rows {
            let j = if i % 2 == 0 { i + 1 } else { i - 1 };
            let num = (sim(i, j) / tau).exp();
            let den: f64 = (0..rows).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / rows as f64
    }

    #[test]
    fn orthonormal_rows_give_identity_similarity() {
        let mut z = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            z.data_mut()[i * 3 + i] = if i == 0 { 1.0 } else { -2.0 };
        }
        let s = cosine_sim_matrix(&z).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_rows_have_unit_similarity() {
        let z = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.5, 2.0, 0.3, -1.2, 0.5, 2.0]).unwrap();
        let s = cosine_sim_matrix(&z).unwrap();
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_over_batch_grid() {
        let mut case = 0;
        for n in [2usize, 4, 8] {
            for d in [4usize, 8, 16] {
                for tau in [0.1, 0.5, 1.0] {
                    for seed in 0..3 {
                        let z = random_embeddings(100 * case + seed, 2 * n, d);
                        let got = nt_xent(&z, tau).unwrap();
                        let want = brute_force(&z, tau);
                        assert!(
                            (got - want).abs() <= 1e-6,
                            "n={n} d={d} tau={tau}: {got} vs {want}"
                        );
                        case += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        for seed in 0..20 {
            let z = random_embeddings(7000 + seed, 2, 8);
            assert_eq!(nt_xent(&z, 0.5).unwrap(), 0.0);
        }
    }

    /// tau = 1, two aligned pairs on orthogonal axes: every anchor sees one
    /// positive at similarity 1 and two negatives at 0, so the loss is
    /// ln(e + 2) - 1.
    #[test]
    fn two_pair_closed_form() {
        let z = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let got = nt_xent(&z, 1.0).unwrap();
        let want = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.551_444_713_932_050_9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes_and_temperature() {
        let z = random_embeddings(1, 3, 4);
        assert!(nt_xent(&z, 0.5).is_err());
        let z = random_embeddings(2, 4, 4);
        assert!(nt_xent(&z, 0.0).is_err());
        let flat = Tensor::zeros(&[4]);
        assert!(nt_xent(&flat, 0.5).is_err());
    }

    #[test]
    fn zero_row_is_handled_and_loss_stays_finite() {
        let mut z = random_embeddings(3, 4, 4);
        for i in 0..4 {
            z.data_mut()[i] = 0.0;
        }
        let got = nt_xent(&z, 0.5).unwrap();
        assert!(got.is_finite());
        assert!((got - brute_force(&z, 0.5)).abs() <= 1e-6);
    }

    #[test]
    fn time_mean_passes_through_single_step() {
        let mut tape = Tape::new();
        let z = random_embeddings(11, 4, 8);
        let id = tape.constant(z.clone());
        let out = aggregate_time_mean(&mut tape, &[id]).unwrap();
        assert_eq!(tape.value(out), &z);
    }

    #[test]
    fn time_mean_matches_manual_average() {
        let mut tape = Tape::new();
        let steps: Vec<Tensor> = (0..3).map(|t| random_embeddings(20 + t, 4, 6)).collect();
        let ids: Vec<ValueId> = steps.iter().map(|t| tape.constant(t.clone())).collect();
        let out = aggregate_time_mean(&mut tape, &ids).unwrap();
        for i in 0..24 {
            let want = (steps[0].data()[i] + steps[1].data()[i] + steps[2].data()[i]) / 3.0;
            assert!((tape.value(out).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn per_step_loss_equals_loop_of_single_step_losses() {
        for t_bins in [1usize, 2, 4, 8] {
            let steps: Vec<Tensor> =
                (0..t_bins).map(|t| random_embeddings(40 + t as u64, 8, 8)).collect();
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = steps.iter().map(|s| tape.constant(s.clone())).collect();
            let fused = temporal_nt_xent(&mut tape, &ids, 0.5).unwrap();
            let looped = steps.iter().map(|s| nt_xent(s, 0.5).unwrap()).sum::<f64>() / t_bins as f64;
            assert!((tape.value(fused).item().unwrap() - looped).abs() < 1e-12);
        }
    }

    /// Swapping two whole pairs permutes the anchors but not the loss.
    #[test]
    fn pair_permutation_invariance() {
        for seed in 0..50 {
            let z = random_embeddings(60 + seed, 8, 8);
            let mut swapped = z.clone();
            for col in 0..8 {
                for r in 0..2 {
                    let a = (0 + r) * 8 + col;
                    let b = (4 + r) * 8 + col;
                    swapped.data_mut().swap(a, b);
                }
            }
            let la = nt_xent(&z, 0.5).unwrap();
            let lb = nt_xent(&swapped, 0.5).unwrap();
            assert!((la - lb).abs() < 1e-9);
        }
    }

    /// Cosine similarity ignores row magnitudes, so rescaling any row by a
    /// positive constant leaves the loss unchanged.
    #[test]
    fn positive_rescaling_invariance() {
        for seed in 0..50 {
            let z = random_embeddings(120 + seed, 6, 5);
            let mut scaled = z.clone();
            let factors = [3.0, 0.25, 10.0, 1.0, 0.5, 7.0];
            for (i, f) in factors.iter().enumerate() {
                for c in 0..5 {
                    scaled.data_mut()[i * 5 + c] *= f;
                }
            }
            let la = nt_xent(&z, 0.5).unwrap();
            let lb = nt_xent(&scaled, 0.5).unwrap();
            assert!((la - lb).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_are_finite_and_pull_positives_together() {
        let z = random_embeddings(200, 8, 8);
        let mut tape = Tape::new();
        let id = tape.leaf(z.clone());
        let loss = nt_xent_tape(&mut tape, id, 0.5).unwrap();
        let before = tape.value(loss).item().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(id).unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));

        let mut nudged = z.clone();
        for (o, gv) in nudged.data_mut().iter_mut().zip(g.data()) {
            *o -= 0.05 * gv;
        }
        let after = nt_xent(&nudged, 0.5).unwrap();
        assert!(after < before, "gradient step did not reduce loss: {before} -> {after}");
    }
}
