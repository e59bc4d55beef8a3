//! Routing by agreement. Coefficients are computed by a fixed-point value
//! iteration in f64 and then treated as constants: gradients flow through
//! the final weighted sum and squash only.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn squash_gain(s: &[f64], eps: f64) -> f64 {
    let sumsq: f64 = s.iter().map(|&v| v * v).sum();
    let n = sumsq.sqrt();
    sumsq / ((1.0 + sumsq) * (n + eps))
}

/// Agreement iteration over prediction vectors `preds[i, j, :]` (row-major
/// [n_in, n_out, d]). Returns the coupling coefficients of the last
/// iteration, row-major [n_in, n_out]. Each input capsule's coefficients
/// sum to one.
pub fn routing_coefficients(
    preds: &[f32],
    n_in: usize,
    n_out: usize,
    d: usize,
    iters: usize,
    eps: f64,
) -> Vec<f32> {
    assert_eq!(preds.len(), n_in * n_out * d, "preds shape mismatch");
    assert!(iters >= 1, "routing needs at least one iteration");
    let mut logits = vec![0.0f64; n_in * n_out];
    let mut c = vec![0.0f64; n_in * n_out];
    for it in 0..iters {
        for i in 0..n_in {
            let row = &logits[i * n_out..(i + 1) * n_out];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..n_out {
                c[i * n_out + j] = (row[j] - max).exp() / denom;
            }
        }
        if it + 1 == iters {
            break;
        }
        for j in 0..n_out {
            let mut s = vec![0.0f64; d];
            for i in 0..n_in {
                let cij = c[i * n_out + j];
                let base = (i * n_out + j) * d;
                for e in 0..d {
                    s[e] += cij * preds[base + e] as f64;
                }
            }
            let gain = squash_gain(&s, eps);
            for i in 0..n_in {
                let base = (i * n_out + j) * d;
                let mut dot = 0.0f64;
                for e in 0..d {
                    dot += preds[base + e] as f64 * gain * s[e];
                }
                logits[i * n_out + j] += dot;
            }
        }
    }
    c.into_iter().map(|v| v as f32).collect()
}

/// Routes `preds` ([n_in, n_out, d]) into output capsules [n_out, d].
pub fn dynamic_routing(tape: &mut Tape, preds: Var, iters: usize, eps: f64) -> Result<Var> {
    if iters == 0 {
        return Err(Error::Config("routing_iters must be at least 1".into()));
    }
    let (n_in, n_out, d) = match tape.shape(preds) {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(Error::shape(
                "dynamic_routing",
                format!("preds {:?} is not [n_in, n_out, d]", s),
            ))
        }
    };
    let coeffs = routing_coefficients(tape.data(preds), n_in, n_out, d, iters, eps);
    let s = tape.weighted_caps_sum(preds, &coeffs)?;
    tape.squash(s, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-7;

    fn squash_ref(s: &[f64]) -> Vec<f64> {
        let g = squash_gain(s, EPS);
        s.iter().map(|&v| g * v).collect()
    }

    #[test]
    fn first_iteration_is_uniform() {
        let preds: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.1).collect();
        let c = routing_coefficients(&preds, 2, 3, 4, 1, EPS);
        for &v in &c {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn coefficients_sum_to_one_per_input() {
        let preds: Vec<f32> = (0..5 * 4 * 3).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.3).collect();
        for iters in 1..=5 {
            let c = routing_coefficients(&preds, 5, 4, 3, iters, EPS);
            for i in 0..5 {
                let sum: f64 = (0..4).map(|j| c[i * 4 + j] as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6, "iters {iters} input {i}: {sum}");
            }
        }
    }

    #[test]
    fn single_output_equals_squash_of_sum() {
        let n_in = 6;
        let d = 5;
        let preds: Vec<f32> = (0..n_in * d).map(|i| ((i * 13 % 17) as f32 - 8.0) * 0.2).collect();
        let mut sum = vec![0.0f64; d];
        for i in 0..n_in {
            for e in 0..d {
                sum[e] += preds[i * d + e] as f64;
            }
        }
        let want = squash_ref(&sum);
        for iters in [1, 3, 5] {
            let mut tape = Tape::new();
            let p = tape.leaf(vec![n_in, 1, d], preds.clone()).unwrap();
            let v = dynamic_routing(&mut tape, p, iters, EPS).unwrap();
            assert_eq!(tape.shape(v), &[1, d]);
            for (got, want) in tape.data(v).iter().zip(&want) {
                assert!((*got as f64 - want).abs() < 1e-6, "iters {iters}");
            }
        }
    }

    #[test]
    fn agreement_attracts_coefficients() {
        // Three inputs, two output slots. All inputs predict the same vector
        // for slot 0 and mutually cancelling vectors for slot 1, so routing
        // should shift weight toward slot 0.
        let n_in = 3;
        let n_out = 2;
        let d = 2;
        let mut preds = vec![0.0f32; n_in * n_out * d];
        let slot1 = [[2.0f32, 0.0], [-2.0, 0.0], [0.0, -2.0]];
        for i in 0..n_in {
            preds[(i * n_out) * d] = 2.0;
            preds[(i * n_out + 1) * d] = slot1[i][0];
            preds[(i * n_out + 1) * d + 1] = slot1[i][1];
        }
        let c = routing_coefficients(&preds, n_in, n_out, d, 3, EPS);
        for i in 0..n_in {
            assert!(
                c[i * n_out] > 0.5 && c[i * n_out] > c[i * n_out + 1],
                "input {i}: {:?}",
                &c[i * n_out..(i + 1) * n_out]
            );
        }
    }

    #[test]
    fn routed_output_matches_manual_weighted_squash() {
        let (n_in, n_out, d) = (4, 3, 5);
        let preds: Vec<f32> = (0..n_in * n_out * d)
            .map(|i| ((i * 29 % 23) as f32 - 11.0) * 0.15)
            .collect();
        let c = routing_coefficients(&preds, n_in, n_out, d, 3, EPS);
        let mut tape = Tape::new();
        let p = tape.leaf(vec![n_in, n_out, d], preds.clone()).unwrap();
        let v = dynamic_routing(&mut tape, p, 3, EPS).unwrap();
        for j in 0..n_out {
            let mut s = vec![0.0f64; d];
            for i in 0..n_in {
                for e in 0..d {
                    // Mirror the tape's f32 weighted sum before the f64 squash.
                    s[e] += (c[i * n_out + j] * preds[(i * n_out + j) * d + e]) as f64;
                }
            }
            let want = squash_ref(&s);
            for (e, &w) in want.iter().enumerate() {
                let got = tape.data(v)[j * d + e] as f64;
                assert!((got - w).abs() < 1e-5, "slot {j} dim {e}");
            }
        }
    }

    #[test]
    fn zero_iterations_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(dynamic_routing(&mut tape, p, 0, EPS).is_err());
    }

    #[test]
    fn coefficients_are_bitwise_deterministic() {
        let preds: Vec<f32> = (0..8 * 2 * 4).map(|i| (i as f32).sin()).collect();
        let a = routing_coefficients(&preds, 8, 2, 4, 4, EPS);
        let b = routing_coefficients(&preds, 8, 2, 4, 4, EPS);
        assert_eq!(a, b);
    }
}
