use rand::Rng;

use crate::backends::{TokenId, WordDistribution};

/// Slack on the top-p cumulative comparison so sums like `0.5 + 0.3`
/// still reach `p = 0.8`.
const TOP_P_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Restriction {
    /// Keep the `k` most probable tokens.
    TopK(usize),
    /// Keep the smallest probability-sorted prefix with mass `>= p`.
    TopP(f64),
}

/// Zero everything outside the restricted set and renormalize.
///
/// Sorting breaks ties by lower token index.
pub fn restrict_vocab(dist: &WordDistribution, restriction: Restriction) -> WordDistribution {
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let keep = match restriction {
        Restriction::TopK(k) => k.clamp(1, probs.len()),
        Restriction::TopP(p) => {
            let mut cum = 0.0;
            let mut n = order.len();
            for (i, &tok) in order.iter().enumerate() {
                cum += probs[tok];
                if cum >= p - TOP_P_SLACK {
                    n = i + 1;
                    break;
                }
            }
            n
        }
    };

    if keep == probs.len() {
        return dist.clone();
    }
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &tok in &order[..keep] {
        out[tok] = probs[tok];
        mass += probs[tok];
    }
    for v in &mut out {
        *v /= mass;
    }
    WordDistribution::new(out).expect("renormalized subset of a valid distribution")
}

/// Inverse-CDF draw in token-index order.
pub fn sample_next<R: Rng + ?Sized>(dist: &WordDistribution, rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i as TokenId;
            }
        }
    }
    // rounding left the total marginally below u
    last_positive as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> WordDistribution {
        WordDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn top_k_full_vocab_is_identity() {
        let d = dist(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(restrict_vocab(&d, Restriction::TopK(4)), d);
        assert_eq!(restrict_vocab(&d, Restriction::TopK(40)), d);
    }

    #[test]
    fn top_p_prefix() {
        // 0.5 + 0.3 = 0.8 >= 0.7 -> keep {0, 1}, renormalize by 0.8
        let out = restrict_vocab(&dist(&[0.5, 0.3, 0.2]), Restriction::TopP(0.7));
        let expected = [0.625, 0.375, 0.0];
        for (o, e) in out.probs().iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }
        let exact = restrict_vocab(&dist(&[0.5, 0.3, 0.2]), Restriction::TopP(0.8));
        assert_eq!(exact.probs()[2], 0.0);
    }

    #[test]
    fn one_hot_unchanged() {
        let d = WordDistribution::one_hot(5, 3);
        for r in [
            Restriction::TopK(1),
            Restriction::TopK(3),
            Restriction::TopP(0.2),
            Restriction::TopP(1.0),
        ] {
            assert_eq!(restrict_vocab(&d, r), d);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let out = restrict_vocab(&dist(&[0.25, 0.25, 0.25, 0.25]), Restriction::TopK(2));
        assert_eq!(out.probs(), &[0.5, 0.5, 0.0, 0.0]);
        let out = restrict_vocab(&dist(&[0.2, 0.4, 0.4]), Restriction::TopP(0.3));
        assert_eq!(out.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sample_one_hot_and_determinism() {
        let d = WordDistribution::one_hot(7, 4);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_next(&d, &mut rng), 4);
        }
        let d = dist(&[0.1, 0.2, 0.3, 0.4]);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..100).map(|_| sample_next(&d, &mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..100).map(|_| sample_next(&d, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        let probs = [0.05, 0.0, 0.15, 0.3, 0.5];
        let d = dist(&probs);
        let n = 100_000usize;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..n {
            counts[sample_next(&d, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs expected {mean}");
        }
        assert_eq!(counts[1], 0);
    }

    proptest! {
        #[test]
        fn restriction_preserves_ratios(
            w in prop::collection::vec(0.01f64..1.0, 2..12),
            k in 1usize..12,
            p in 0.05f64..=1.0,
            use_p in any::<bool>(),
        ) {
            let d = WordDistribution::from_weights(w).unwrap();
            let r = if use_p { Restriction::TopP(p) } else { Restriction::TopK(k) };
            let out = restrict_vocab(&d, r);
            prop_assert!(WordDistribution::check(out.probs()).is_ok());
            let kept: Vec<usize> = (0..d.len()).filter(|&i| out.probs()[i] > 0.0).collect();
            prop_assert!(!kept.is_empty());
            let (a, b) = (kept[0], *kept.last().unwrap());
            let before = d.probs()[a] / d.probs()[b];
            let after = out.probs()[a] / out.probs()[b];
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
            if use_p {
                let mass: f64 = kept.iter().map(|&i| d.probs()[i]).sum();
                prop_assert!(mass >= p - 1e-9);
            } else {
                prop_assert_eq!(kept.len(), k.min(d.len()));
            }
        }
    }
}
