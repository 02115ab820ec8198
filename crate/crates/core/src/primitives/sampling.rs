//! Weighted sampling without replacement (Efraimidis-Spirakis A-ES).
//!
//! Each item draws `u ~ U(0,1]` and gets key `ln(u) / w`; the `k` largest
//! keys win. For `k = 1` this selects item `i` with probability
//! `w_i / sum(w)`, and inclusion probability is monotone in weight for any
//! `k`. One draw is consumed per item regardless of its weight, so stream
//! positions do not depend on the weights.

use crate::scalar::Scalar;

use super::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplingError {
    #[error("insufficient population: requested {requested}, only {eligible} eligible")]
    InsufficientPopulation { requested: usize, eligible: usize },
    #[error("weight at index {0} is negative or not finite")]
    InvalidWeight(usize),
    #[error("population has {population} items but {weights} weights")]
    LengthMismatch { population: usize, weights: usize },
}

/// Indices of all positive-weight items, ordered by descending A-ES key.
/// Ties break towards the lower index.
pub fn weighted_order<F: Scalar>(rng: &mut SeededRng, weights: &[F]) -> Result<Vec<usize>, SamplingError> {
    let mut keyed: Vec<(F, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let u = rng.next_f64_open0();
        if !w.is_finite() || w < F::zero() {
            return Err(SamplingError::InvalidWeight(i));
        }
        if w > F::zero() {
            keyed.push((F::lit(u.ln()) / w, i));
        }
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite keys").then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Draw `k` distinct members of `population`, weighted by `weights`.
pub fn sample_without_replacement<T: Clone, F: Scalar>(
    rng: &mut SeededRng,
    population: &[T],
    weights: &[F],
    k: usize,
) -> Result<Vec<T>, SamplingError> {
    if population.len() != weights.len() {
        return Err(SamplingError::LengthMismatch {
            population: population.len(),
            weights: weights.len(),
        });
    }
    let order = weighted_order(rng, weights)?;
    if order.len() < k {
        return Err(SamplingError::InsufficientPopulation {
            requested: k,
            eligible: order.len(),
        });
    }
    Ok(order[..k].iter().map(|&i| population[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_draw_returns_everything() {
        let mut rng = SeededRng::new(1);
        let pop: Vec<u32> = (0..7).collect();
        let w = vec![0.3f64; 7];
        let mut got = sample_without_replacement(&mut rng, &pop, &w, 7).unwrap();
        got.sort();
        assert_eq!(got, pop);
    }

    #[test]
    fn zero_weight_never_selected() {
        let pop = ["a", "b", "c"];
        let w = [1.0f64, 0.0, 2.0];
        for seed in 0..10_000 {
            let mut rng = SeededRng::new(seed);
            let got = sample_without_replacement(&mut rng, &pop, &w, 2).unwrap();
            assert!(!got.contains(&"b"));
        }
    }

    #[test]
    fn insufficient_population() {
        let mut rng = SeededRng::new(1);
        let err = sample_without_replacement(&mut rng, &[1, 2, 3], &[1.0f64, 0.0, 1.0], 3).unwrap_err();
        assert_eq!(
            err,
            SamplingError::InsufficientPopulation {
                requested: 3,
                eligible: 2
            }
        );
    }

    #[test]
    fn rejects_bad_weights() {
        let mut rng = SeededRng::new(1);
        assert_eq!(
            weighted_order(&mut rng, &[1.0f64, -1.0]).unwrap_err(),
            SamplingError::InvalidWeight(1)
        );
        assert_eq!(
            weighted_order(&mut rng, &[f64::NAN]).unwrap_err(),
            SamplingError::InvalidWeight(0)
        );
        assert!(matches!(
            sample_without_replacement(&mut rng, &[1], &[1.0f64, 1.0], 1),
            Err(SamplingError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn works_with_f32_weights() {
        let mut rng = SeededRng::new(4);
        let got = sample_without_replacement(&mut rng, &[1, 2, 3], &[1.0f32, 2.0, 3.0], 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_ne!(got[0], got[1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let pop: Vec<u32> = (0..20).collect();
        let w: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let a = sample_without_replacement(&mut SeededRng::new(77), &pop, &w, 5).unwrap();
        let b = sample_without_replacement(&mut SeededRng::new(77), &pop, &w, 5).unwrap();
        assert_eq!(a, b);
    }
}
