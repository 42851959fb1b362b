//! Standard normal helpers and a truncated-normal sampler that stays accurate
//! arbitrarily far into the tails.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use libm::erfc;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 − Φ(x)` without cancellation.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)` by Wichura's AS241 rational approximations
/// (relative error about 1e-16).
pub fn ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        let r = r - 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_5,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_46,
    45_921.953_931_549_87,
    67_265.770_927_008_7,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const AS241_B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_597,
    39_307.895_800_092_71,
    28_729.085_735_721_943,
    5_226.495_278_852_545,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    7.745_450_142_783_414e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_08,
    0.015_198_666_563_616_457,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_9,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    0.599_832_206_555_888,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// Mills ratio `(1 − Φ(x))/φ(x)` for `x ≥ 3` by continued fraction.
fn mills_ratio(x: f64) -> f64 {
    // Lentz evaluation of 1/(x + 1/(x + 2/(x + 3/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// `ln(1 − Φ(x))`, accurate for large positive `x`.
pub fn log_sf(x: f64) -> f64 {
    if x < 5.0 {
        sf(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio(x).ln()
    }
}

/// Below this standardised bound the inverse-CDF formula in probability
/// space is used; above it the tail is inverted in log space.
const TAIL_SWITCH: f64 = 5.0;

/// Maps a uniform `u ∈ (0, 1)` to a draw from `N(0, 1)` truncated to `[a, ∞)`.
pub fn std_lower_truncated_from_uniform(a: f64, u: f64) -> f64 {
    let u = u.clamp(f64::MIN_POSITIVE, 1.0);
    if a == f64::NEG_INFINITY {
        return ppf(u.min(1.0 - f64::EPSILON));
    }
    if a < TAIL_SWITCH {
        // 1 − Φ(x) = u·(1 − Φ(a))
        let target = u * sf(a);
        let x = if target > 0.5 {
            ppf(1.0 - target)
        } else {
            -ppf(target)
        };
        return if x.is_finite() { x.max(a) } else { a };
    }
    // ln(1 − Φ(x)) = ln u + ln(1 − Φ(a)); Newton from the exponential-tail guess.
    let target = u.ln() + log_sf(a);
    let mut x = a - u.ln() / a;
    for _ in 0..50 {
        let f = log_sf(x) - target;
        // d/dx ln(1 − Φ(x)) = −1/R(x)
        let step = f * mills_ratio(x);
        x += step;
        if step.abs() <= 1e-14 * x.abs() {
            break;
        }
    }
    x.max(a)
}

/// Draws from `N(mean, 1)` truncated to `[lower, ∞)`.
pub fn sample_lower_truncated<R: Rng + ?Sized>(rng: &mut R, mean: f64, lower: f64) -> f64 {
    let u: f64 = rng.random();
    mean + std_lower_truncated_from_uniform(lower - mean, 1.0 - u)
}

/// Draws from `N(mean, 1)` truncated to `(−∞, upper]`.
pub fn sample_upper_truncated<R: Rng + ?Sized>(rng: &mut R, mean: f64, upper: f64) -> f64 {
    let u: f64 = rng.random();
    mean - std_lower_truncated_from_uniform(mean - upper, 1.0 - u)
}

/// Mean of the standard normal truncated to `[a, ∞)`, `φ(a)/(1 − Φ(a))`.
pub fn lower_truncated_mean(a: f64) -> f64 {
    if a < 5.0 {
        pdf(a) / sf(a)
    } else {
        1.0 / mills_ratio(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cdf_reference() {
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((sf(3.0) - 1.349_898_031_630_094_5e-3).abs() < 1e-16);
        assert!((ppf(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((ppf(0.3) + 0.524_400_512_708_040_7).abs() < 1e-14);
        assert!((ppf(1e-3) + 3.090_232_306_167_813).abs() < 1e-13);
        assert!((ppf(1e-10) + 6.361_340_902_404_056).abs() < 1e-12);
        assert!((ppf(1e-300) + 37.047_096_299_361_2).abs() < 1e-9);
        assert_eq!(ppf(0.5), 0.0);
    }

    #[test]
    fn ppf_inverts_cdf() {
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let x = ppf(p);
            assert!((cdf(x) - p).abs() < 4e-16 * p.max(1e-3) * 1e3, "{p}");
        }
        for e in 3..300 {
            let p = 10f64.powi(-e);
            assert!(((cdf(ppf(p)) - p) / p).abs() < 1e-12, "{p}");
        }
    }

    #[test]
    fn log_sf_continuous_at_switch() {
        let a = log_sf(4.999_999_999);
        let b = log_sf(5.0);
        assert!((a - b).abs() < 1e-8);
        // 1 − Φ(10) = 7.619853024160527e-24
        assert!((log_sf(10.0) - 7.619_853_024_160_527e-24f64.ln()).abs() < 1e-12);
        assert!(log_sf(40.0).is_finite());
    }

    #[test]
    fn truncated_mean_at_three() {
        assert!((lower_truncated_mean(3.0) - 3.2831).abs() < 1e-4);
    }

    #[test]
    fn extreme_tail_draws_respect_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bound in [5.0, 8.0, 20.0, 60.0, 500.0] {
            let mut sum = 0.0;
            for _ in 0..2000 {
                let x = sample_lower_truncated(&mut rng, 0.0, bound);
                assert!(x >= bound && x.is_finite());
                sum += x;
            }
            let mean = sum / 2000.0;
            assert!((mean - lower_truncated_mean(bound)).abs() < 0.01);
        }
    }

    #[test]
    fn upper_truncation_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = sample_upper_truncated(&mut rng, 2.0, -4.0);
            assert!(x <= -4.0);
        }
    }

    #[test]
    fn uniform_map_is_monotone_quantile() {
        for a in [-3.0, 0.0, 2.0, 4.9, 5.1, 12.0] {
            let mut prev = f64::NEG_INFINITY;
            for k in 1..100 {
                let x = std_lower_truncated_from_uniform(a, k as f64 / 100.0);
                assert!(x >= a);
                assert!(x <= prev || prev == f64::NEG_INFINITY, "u increasing maps to x decreasing");
                prev = x;
            }
        }
        // the median of the truncation at 0 is Φ⁻¹(0.75)
        let med = std_lower_truncated_from_uniform(0.0, 0.5);
        assert!((med - ppf(0.75)).abs() < 1e-12);
    }

    #[test]
    fn unbounded_is_plain_normal() {
        let x = std_lower_truncated_from_uniform(f64::NEG_INFINITY, 0.5);
        assert!(x.abs() < 1e-12);
    }
}
