//! Objective functions for the in-scope environments.
//!
//! All objectives are deterministic: repeated evaluation on the same state is
//! bit-identical. The bag objective freezes its stochastic component through
//! a seeded hash of the canonical (sorted) multiset.

use super::NamedObjective;
use crate::error::{Error, Result};

/// Plateau/peak objective on grids with coordinates in `[0, 1]`:
/// `R0 + 0.5 * prod 1[|x - 0.5| in (0.25, 0.5]] + 2 * prod 1[|x - 0.5| in (0.3, 0.4)]`.
pub fn grid_plateau(xs: &[f64], r0: f64) -> f64 {
    let mut plateau = 1.0;
    let mut peak = 1.0;
    for &x in xs {
        let d = (x - 0.5).abs();
        if !(d > 0.25 && d <= 0.5) {
            plateau = 0.0;
        }
        if !(d > 0.3 && d < 0.4) {
            peak = 0.0;
        }
    }
    r0 + 0.5 * plateau + 2.0 * peak
}

/// Standard normal density.
fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Cosine landscape on grids: `R0 + prod_d (cos(50 x^d) + 1)(phi(0) - phi(5 x^d))`.
pub fn grid_cosine(xs: &[f64], r0: f64) -> f64 {
    let mut prod = 1.0;
    for &x in xs {
        prod *= ((50.0 * x).cos() + 1.0) * (phi(0.0) - phi(5.0 * x));
    }
    r0 + prod
}

pub fn named(which: NamedObjective, x1: f64, x2: f64) -> Result<f64> {
    Ok(match which {
        NamedObjective::Branin => branin(x1, x2),
        NamedObjective::Currin => currin(x1, x2),
        NamedObjective::Shubert => shubert(x1, x2),
        NamedObjective::Beale => beale(x1, x2),
    })
}

pub fn branin(x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    let t1 = 15.0 * x2 - 5.1 / (4.0 * PI * PI) * (15.0 * x1 - 5.0).powi(2)
        + 5.0 / PI * (15.0 * x1 - 5.0)
        - 6.0;
    let t2 = (10.0 - 10.0 / (8.0 * PI)) * (15.0 * x1 - 5.0).cos();
    1.0 - (t1 * t1 + t2 + 10.0) / 308.13
}

/// The `1 - exp(-1/(2 x2))` factor is defined as 1 at `x2 = 0`, its right
/// limit, since the grid includes the boundary.
pub fn currin(x1: f64, x2: f64) -> f64 {
    let f = if x2 == 0.0 {
        1.0
    } else {
        1.0 - (-1.0 / (2.0 * x2)).exp()
    };
    let num = 2300.0 * x1.powi(3) + 1900.0 * x1 * x1 + 2092.0 * x1 + 60.0;
    let den = 100.0 * x1.powi(3) + 500.0 * x1 * x1 + 4.0 * x1 + 20.0;
    f * num / (13.77 * den)
}

pub fn shubert(x1: f64, x2: f64) -> f64 {
    let sum = |x: f64| -> f64 {
        (1..=5)
            .map(|i| i as f64 * ((i as f64 + 1.0) * x + i as f64).cos())
            .sum()
    };
    sum(x1) * sum(x2) / 397.0 + 186.8 / 397.0
}

pub fn beale(x1: f64, x2: f64) -> f64 {
    let a = 1.5 - x1 + x1 * x2;
    let b = 2.25 - x1 + x1 * x2 * x2;
    let c = 2.625 - x1 + x1 * x2 * x2 * x2;
    (a * a + b * b + c * c) / 38.8
}

/// splitmix64; a small, stable, portable mixer for frozen randomness.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Bag objective on a size-13 multiset over 7 symbols. Base value 0.01; a bag
/// with any symbol repeated 7 or more times is worth 30 with probability 1/4
/// and 10 otherwise, decided once per multiset by a seeded hash of the sorted
/// symbol counts.
pub fn bag(symbols: &[u16], seed: u64) -> Result<f64> {
    if symbols.len() != 13 {
        return Err(Error::contract(format!(
            "bag objective requires exactly 13 symbols, got {}",
            symbols.len()
        )));
    }
    let mut counts = [0u8; 7];
    for &s in symbols {
        if s >= 7 {
            return Err(Error::contract("bag symbol outside the 7-letter alphabet"));
        }
        counts[s as usize] += 1;
    }
    if counts.iter().all(|&c| c < 7) {
        return Ok(0.01);
    }
    // Hash the multiset, not the sequence: two orderings of the same bag
    // must agree.
    let mut h = splitmix64(seed ^ 0x6261675f6f626a); // "bag_obj"
    for (sym, &c) in counts.iter().enumerate() {
        h = splitmix64(h ^ ((sym as u64) << 8 | c as u64));
    }
    Ok(if h % 4 == 0 { 30.0 } else { 10.0 })
}

/// Overlapping occurrence count of `gram` in `symbols`, normalized by the
/// maximum possible count `l - |gram| + 1` and clipped to `[0, 1]`.
pub fn ngram(symbols: &[u16], gram: &[u16], max_len: usize) -> f64 {
    let raw = ngram_count(symbols, gram);
    let denom = (max_len + 1).saturating_sub(gram.len()) as f64;
    if denom <= 0.0 {
        return 0.0;
    }
    (raw as f64 / denom).clamp(0.0, 1.0)
}

/// Raw overlapping occurrence count.
pub fn ngram_count(symbols: &[u16], gram: &[u16]) -> usize {
    if gram.is_empty() || gram.len() > symbols.len() {
        return 0;
    }
    symbols.windows(gram.len()).filter(|w| *w == gram).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_examples() {
        assert_eq!(grid_plateau(&[0.5, 0.5], 0.1), 0.1);
        assert_eq!(grid_plateau(&[0.85, 0.85], 0.01), 2.51);
        // |0.3| is outside the open interval (0.3, 0.4): plateau only
        assert_eq!(grid_plateau(&[0.2, 0.2], 0.1), 0.6);
    }

    #[test]
    fn plateau_mode_count_h64() {
        // number of maximal terminals on D=2, H=64 by exhaustive enumeration,
        // and the four mode regions are disjoint per-dimension corner bands
        let h = 64;
        let mut maximal = Vec::new();
        for i in 0..h {
            for j in 0..h {
                let x = [i as f64 / 63.0, j as f64 / 63.0];
                if grid_plateau(&x, 0.1) == 2.6 {
                    maximal.push((i, j));
                }
            }
        }
        assert_eq!(maximal.len(), 144);
        let low: Vec<i32> = (7..=12).collect();
        let high: Vec<i32> = (51..=56).collect();
        for (i, j) in maximal {
            assert!(low.contains(&i) || high.contains(&i));
            assert!(low.contains(&j) || high.contains(&j));
        }
    }

    #[test]
    fn cosine_examples() {
        // phi(0) - phi(0) = 0 at the origin
        assert_eq!(grid_cosine(&[0.0, 0.0], 1.0), 1.0);
        // frozen high-precision reference value for (0.2, 0.2), R0 = 1
        let v = grid_cosine(&[0.2, 0.2], 1.0);
        assert!((v - 1.000638127844836).abs() < 1e-14, "got {v}");
    }

    #[test]
    fn cosine_is_bounded_below_by_r0_on_h32() {
        // Each factor (cos+1) >= 0 and phi(0) - phi(z) >= 0, so u >= R0.
        for i in 0..32 {
            for j in 0..32 {
                let x = [i as f64 / 31.0, j as f64 / 31.0];
                for &c in &x {
                    assert!((50.0 * c).cos() + 1.0 >= 0.0);
                    assert!(phi(0.0) - phi(5.0 * c) >= 0.0);
                }
                assert!(grid_cosine(&x, 1.0) >= 1.0);
            }
        }
    }

    #[test]
    fn named_objective_ranges_on_h32() {
        // branin, shubert and beale stay inside [0, 1] on the 32x32 grid;
        // currin's published normalization constant leaves a small overshoot
        // (max 1.00153 near x1 = 0.2, x2 = 0), so it gets a wider band.
        let h = 32;
        let mut currin_max: f64 = 0.0;
        for i in 0..h {
            for j in 0..h {
                let (x1, x2) = (i as f64 / 31.0, j as f64 / 31.0);
                for (v, lo, hi) in [
                    (branin(x1, x2), -1e-9, 1.0 + 1e-9),
                    (currin(x1, x2), -1e-9, 1.0 + 2e-3),
                    (shubert(x1, x2), -1e-9, 1.0 + 1e-9),
                    (beale(x1, x2), -1e-9, 1.0 + 1e-9),
                ] {
                    assert!(v >= lo && v <= hi, "value {v} outside [{lo}, {hi}]");
                }
                currin_max = currin_max.max(currin(x1, x2));
            }
        }
        assert!((currin_max - 1.0015253801).abs() < 1e-9);
    }

    #[test]
    fn currin_boundary_limit() {
        // the 1 - exp(-1/(2 x2)) factor evaluates to its limit 1 at x2 = 0
        let v0 = currin(0.3, 0.0);
        let v_eps = currin(0.3, 1e-12);
        assert!((v0 - v_eps).abs() < 1e-9);
        assert!(v0.is_finite());
    }

    #[test]
    fn shubert_matches_bruteforce_double_sum() {
        for i in 0..32 {
            for j in 0..32 {
                let (x1, x2) = (i as f64 / 31.0, j as f64 / 31.0);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for k in 1..=5u32 {
                    let kf = k as f64;
                    s1 += kf * ((kf + 1.0) * x1 + kf).cos();
                    s2 += kf * ((kf + 1.0) * x2 + kf).cos();
                }
                let expect = s1 * s2 / 397.0 + 186.8 / 397.0;
                assert_eq!(shubert(x1, x2), expect);
            }
        }
    }

    #[test]
    fn bag_examples() {
        // max repeat 6: base value
        let bagv = bag(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2], 0).unwrap();
        assert_eq!(bagv, 0.01);
        // orderings of one multiset agree
        let a = bag(&[0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6], 7).unwrap();
        let b = bag(&[6, 5, 4, 3, 2, 1, 0, 0, 0, 0, 0, 0, 0], 7).unwrap();
        assert_eq!(a, b);
        assert!(a == 10.0 || a == 30.0);
        assert!(bag(&[0; 12], 0).is_err());
    }

    #[test]
    fn bag_value30_census_is_frozen() {
        // Exhaustive enumeration over all multisets of size 13 on 7 symbols.
        // 6468 bags have a symbol repeated >= 7 times; under seed 0 the
        // seeded hash marks 1581 of them with value 30. Regression constants.
        let mut with_substructure = 0usize;
        let mut value30 = 0usize;
        let mut counts = [0u8; 7];
        fn rec(
            pos: usize,
            remaining: u8,
            counts: &mut [u8; 7],
            with_sub: &mut usize,
            v30: &mut usize,
        ) {
            if pos == 6 {
                counts[6] = remaining;
                if counts.iter().any(|&c| c >= 7) {
                    *with_sub += 1;
                    let mut symbols = Vec::new();
                    for (s, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            symbols.push(s as u16);
                        }
                    }
                    if bag(&symbols, 0).unwrap() == 30.0 {
                        *v30 += 1;
                    }
                }
                return;
            }
            for c in 0..=remaining {
                counts[pos] = c;
                rec(pos + 1, remaining - c, counts, with_sub, v30);
            }
        }
        rec(0, 13, &mut counts, &mut with_substructure, &mut value30);
        assert_eq!(with_substructure, 6468);
        assert_eq!(value30, 1581);
    }

    #[test]
    fn ngram_examples() {
        // "ACAC" / "AC": count 2
        assert_eq!(ngram_count(&[0, 1, 0, 1], &[0, 1]), 2);
        // "AAAA" / "AA": overlapping count 3
        assert_eq!(ngram_count(&[0, 0, 0, 0], &[0, 0]), 3);
        // no occurrences
        assert_eq!(ngram_count(&[2, 2, 2], &[0, 1]), 0);
        // normalization: l = 4 bigram divisor is 3
        assert!((ngram(&[0, 0, 0, 0], &[0, 0], 4) - 1.0).abs() < 1e-15);
        assert!((ngram(&[0, 1, 0, 1], &[0, 1], 4) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn objective_determinism() {
        let x = [0.37, 0.81];
        for _ in 0..10 {
            assert_eq!(grid_cosine(&x, 0.5).to_bits(), grid_cosine(&x, 0.5).to_bits());
            assert_eq!(branin(x[0], x[1]).to_bits(), branin(x[0], x[1]).to_bits());
        }
    }
}
