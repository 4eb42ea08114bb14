//! Minimal reverse-mode differentiation over a flat parameter store.
//!
//! The tape records vector-valued primitive operations; scalars are length-1
//! vectors. A backward pass visits nodes in reverse construction order (a
//! Wengert list is already topologically sorted) and accumulates parameter
//! gradients into one flat array aligned with the store.

mod adam;
mod net;
mod store;
mod tape;

pub use adam::{adam_step, AdamState};
pub use net::{Activation, FlowModel, HeadValues, Heads, NetSpec};
pub use store::ParamStore;
pub use tape::{NodeId, Tape};

/// Policy logits are clamped to this absolute value before any softmax, so
/// masked probabilities can never become non-finite.
pub const LOGIT_CLIP: f64 = 50.0;

/// Log-domain masked softmax used outside the tape (sampling paths).
///
/// Probabilities are positive exactly on legal entries and sum to 1. The
/// optional temperature divides the logits; `eps` mixes the result with the
/// uniform distribution over legal entries.
pub fn softmax_masked(
    logits: &[f64],
    mask: &[bool],
    temperature: f64,
    eps: f64,
) -> crate::Result<Vec<f64>> {
    assert_eq!(logits.len(), mask.len());
    let legal = mask.iter().filter(|&&m| m).count();
    if legal == 0 {
        return Err(crate::Error::contract("softmax over an all-masked row"));
    }
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(mask) {
        if m {
            max = max.max(l.clamp(-LOGIT_CLIP, LOGIT_CLIP) / temperature);
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            let e = ((l.clamp(-LOGIT_CLIP, LOGIT_CLIP) / temperature) - max).exp();
            out[i] = e;
            z += e;
        }
    }
    let unif = eps / legal as f64;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out[i] = (1.0 - eps) * out[i] / z + unif;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_masked_basics() {
        let p = softmax_masked(&[0.0, 0.0], &[true, true], 1.0, 0.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        // one legal entry: probability 1 regardless of logit
        let p = softmax_masked(&[-40.0, 3.0], &[true, false], 1.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);

        assert!(softmax_masked(&[1.0], &[false], 1.0, 0.0).is_err());
    }

    #[test]
    fn softmax_epsilon_one_is_uniform() {
        let p = softmax_masked(&[9.0, -3.0, 2.0], &[true, true, true], 1.0, 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clipped_logits_stay_finite() {
        let p = softmax_masked(&[1e30, -1e30, f64::MAX], &[true, true, true], 0.1, 0.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn masked_probabilities_sum_to_one(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
            seed in 0u64..1000,
        ) {
            let n = logits.len();
            let mut mask = vec![false; n];
            // deterministic nonempty mask from the seed
            for (i, m) in mask.iter_mut().enumerate() {
                *m = (seed >> (i % 10)) & 1 == 1;
            }
            mask[seed as usize % n] = true;
            let p = softmax_masked(&logits, &mask, 1.0, 0.0).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (v, m) in p.iter().zip(&mask) {
                let ok = if *m { *v > 0.0 } else { *v == 0.0 };
                prop_assert!(ok);
            }
        }
    }
}
