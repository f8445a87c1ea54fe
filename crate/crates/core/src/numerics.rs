//! Special functions, the seeded random source and small verification oracles.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// √(2/π), the mean of the half-normal distribution.
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function (`libm`, accurate to about one ulp).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Φ(x) = ½(1 + erf(x/√2)).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Upper tail `Q(x) = 1 − Φ(x)`, accurate where `Φ(x)` rounds to 1.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Deterministic random source.
///
/// Backed by ChaCha8. Sub-streams are derived by mixing the parent seed with a
/// key path, so the stream for `(epoch, batch, sample)` does not depend on how
/// many draws any other stream made.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream keyed by `path`. Depends only on this
    /// generator's seed, never on its current position.
    pub fn derive(&self, path: &[u64]) -> Rng {
        let mut h = splitmix64(self.seed ^ 0x5554_414C_5345_4544);
        for &k in path {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        Rng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [lo, hi] (inclusive).
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        // rejection keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.next_u64();
            if v < zone {
                return lo + (v % span) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i);
            items.swap(i, j);
        }
    }
}

/// Standard normal draw via the Marsaglia polar method. Rejected pairs are
/// consumed from the stream; the second value of an accepted pair is kept for
/// the next call.
pub fn sample_std_normal(rng: &mut Rng) -> f64 {
    if let Some(z) = rng.spare_normal.take() {
        return z;
    }
    loop {
        let u = 2.0 * rng.uniform() - 1.0;
        let v = 2.0 * rng.uniform() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            let m = (-2.0 * s.ln() / s).sqrt();
            rng.spare_normal = Some(v * m);
            return u * m;
        }
    }
}

/// Central difference (f(x+h) − f(x−h)) / 2h.
pub fn finite_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    debug_assert!(h > 0.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor so that values near zero compare
/// by absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Monte Carlo estimate of E|d − σε|, ε ~ N(0, 1). Returns (mean, stderr).
pub fn mc_expected_l1(d: f64, sigma: f64, n: usize, rng: &mut Rng) -> (f64, f64) {
    assert!(n >= 1, "need at least one draw");
    // Welford keeps the variance accurate for n = 10^6
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let x = (d - sigma * sample_std_normal(rng)).abs();
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        FRAC_2_SQRT_PI * sum
    }

    #[test]
    fn erf_basic_values() {
        assert_eq!(erf(0.0), 0.0);
        let oracle = erf_series(1.0);
        assert!((oracle - 0.842_700_792_949_715).abs() < 1e-14);
        assert!((erf(1.0) - oracle).abs() < 1e-15);
        for &x in &[0.1, 0.5, 1.3, 2.2, 3.0, 4.5] {
            assert_eq!(erf(x) + erf(-x), 0.0);
        }
    }

    #[test]
    fn erf_matches_series_on_grid() {
        // the series loses digits to cancellation beyond |x| ≈ 3
        let mut x = -3.0;
        while x <= 3.0 {
            assert!((erf(x) - erf_series(x)).abs() <= 1e-11, "x = {x}");
            x += 0.01;
        }
    }

    #[test]
    fn erf_is_bounded_and_monotone() {
        let mut prev = -1.0;
        let mut x = -6.0;
        while x <= 6.0 {
            let v = erf(x);
            assert!(v > -1.0 - 1e-15 && v < 1.0 + 1e-15);
            assert!(v >= prev, "not monotone at {x}");
            if x.abs() >= 3.0 {
                assert!(v.abs() > 0.9999);
            }
            prev = v;
            x += 0.001;
        }
    }

    /// Composite Simpson integration of the normal density from 0.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let mut acc = std_normal_pdf(0.0) + std_normal_pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * std_normal_pdf(i as f64 * h);
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn upper_tail_complements_cdf() {
        for &x in &[-2.0, -0.5, 0.0, 0.7, 1.96] {
            assert!((std_normal_sf(x) + std_normal_cdf(x) - 1.0).abs() < 1e-15);
        }
        // far tail where 1 − Φ has no digits left: Q(10) ≈ 7.6199e-24
        assert!((std_normal_sf(10.0) / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        let oracle = cdf_by_quadrature(1.96);
        assert!((oracle - 0.975_002_1).abs() < 1e-7);
        assert!((std_normal_cdf(1.96) - oracle).abs() < 1e-10);
        for &x in &[0.3, 1.0, 2.5] {
            assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-15);
            assert!((std_normal_cdf(x) - 0.5 * (1.0 + erf(x / SQRT_2))).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_sampler_moments() {
        let mut rng = Rng::new(11);
        let n = 1_000_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let z = sample_std_normal(&mut rng);
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..100 {
            assert_eq!(
                sample_std_normal(&mut a).to_bits(),
                sample_std_normal(&mut b).to_bits()
            );
        }
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let root = Rng::new(5);
        let mut advanced = Rng::new(5);
        for _ in 0..37 {
            advanced.next_u64();
        }
        let mut a = root.derive(&[3, 1, 4]);
        let mut b = advanced.derive(&[3, 1, 4]);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.derive(&[3, 1, 5]);
        let mut d = root.derive(&[3, 1, 4]);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn finite_diff_examples() {
        assert!((finite_diff(|x| x * x, 3.0, 1e-5) - 6.0).abs() < 1e-8);
        assert!((finite_diff(f64::abs, 2.0, 1e-5) - 1.0).abs() < 1e-9);
        let d = finite_diff(erf, 0.0, 1e-5);
        assert!((d - FRAC_2_SQRT_PI).abs() < 1e-9, "{d}");
    }

    #[test]
    fn mc_expected_l1_examples() {
        let mut rng = Rng::new(1);
        let (m, _) = mc_expected_l1(0.0, 1e-9, 1000, &mut rng);
        assert!(m < 1e-8);
        let (m, _) = mc_expected_l1(5.0, 0.01, 100_000, &mut rng);
        assert!((m - 5.0).abs() < 1e-3);
        let (m, se) = mc_expected_l1(0.0, 1.0, 1_000_000, &mut rng);
        assert!((m - SQRT_2_OVER_PI).abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn mc_stderr_scales_with_inverse_sqrt_n() {
        let (_, se1) = mc_expected_l1(0.5, 1.0, 40_000, &mut Rng::new(2));
        let (_, se4) = mc_expected_l1(0.5, 1.0, 160_000, &mut Rng::new(3));
        let ratio = se1 / se4;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }
}
