//! Deterministic numeric substrate: seeded random streams and the
//! finite-difference gradient checker used as the test oracle for every
//! analytic gradient in the crate.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seeded random stream with labeled sub-stream derivation.
///
/// Same seed gives the identical draw sequence on every platform: draws are
/// derived from the raw ChaCha8 64-bit output, never from platform-dependent
/// float paths. A stream is single-owner; concurrent work takes labeled
/// sub-streams via [`RngStream::split`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent sub-stream from this stream's seed and a label.
    ///
    /// Splitting does not consume state: the same (seed, label) pair always
    /// yields the same sub-stream.
    pub fn split(&self, label: &str) -> RngStream {
        let mut h = fnv1a64(&self.seed.to_le_bytes());
        for &b in label.as_bytes() {
            h = fnv1a64_step(h, b);
        }
        RngStream::new(h)
    }

    /// One draw strictly inside (0, 1).
    ///
    /// Maps the top 53 bits of a u64 to (k + 0.5) * 2^-53, so endpoints are
    /// excluded by construction; log(u) and log(1-u) are always finite.
    pub fn uniform(&mut self) -> f64 {
        let x = self.rng.next_u64() >> 11;
        (x as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Rejection sampling to avoid modulo bias.
        let zone = u64::MAX - (u64::MAX % n as u64);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % n as u64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample k distinct indices from [0, n), in draw order.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "choose_k: k {} > n {}", k, n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h = fnv1a64_step(h, b);
    }
    h
}

fn fnv1a64_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Compare an analytic gradient against central differences.
///
/// For each coordinate i the check probes f(x ± step·e_i) and reports
/// |analytic_i - fd_i| / max(1, |analytic_i|); the result is the maximum over
/// coordinates. The probe itself never calls into the gradient code under
/// test, so it stays an independent oracle.
///
/// Errors if f is non-finite at any probe point, naming the coordinate.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "grad_check: x has {} coords, analytic gradient has {}",
            x.len(),
            analytic.len()
        )));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::Invalid(format!(
            "grad_check: f is non-finite ({f0}) at the base point"
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_coord: 0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Invalid(format!(
                "grad_check: f non-finite at probe for coordinate {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        let fd = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if rel > worst.max_rel_err {
            worst.max_rel_err = rel;
            worst.worst_coord = i;
        }
    }
    Ok(worst)
}

/// Reject non-finite values at construction boundaries.
pub fn require_finite(name: &str, values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Invalid(format!(
                "{name}: non-finite value {v} at index {i}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(43);
        let da = a.uniform_vec(10);
        let db = b.uniform_vec(10);
        assert_ne!(da, db);
    }

    #[test]
    fn uniform_open_interval() {
        let mut rng = RngStream::new(7);
        let draws = rng.uniform_vec(100_000);
        for &u in &draws {
            assert!(u > 0.0 && u < 1.0, "draw {u} outside (0,1)");
        }
    }

    #[test]
    fn uniform_mean_near_half() {
        let mut rng = RngStream::new(42);
        let draws = rng.uniform_vec(100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_empty() {
        let mut rng = RngStream::new(1);
        assert!(rng.uniform_vec(0).is_empty());
    }

    #[test]
    fn split_is_stable_and_distinct() {
        let root = RngStream::new(42);
        let mut a1 = root.split("gates");
        let mut a2 = root.split("gates");
        let mut b = root.split("shuffle");
        assert_eq!(a1.uniform_vec(5), a2.uniform_vec(5));
        assert_ne!(root.split("gates").uniform_vec(5), b.uniform_vec(5));
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = RngStream::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let k = rng.below(7);
            assert!(k < 7);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn grad_check_quadratic() {
        // f(x) = sum x^2, grad = 2x; exact for central differences up to step^2.
        let x = vec![3.0];
        let g = vec![6.0];
        let report = grad_check(|p| p.iter().map(|v| v * v).sum(), &x, &g, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_bad_gradient() {
        let x = vec![1.0, 2.0];
        let g = vec![2.0, 5.0]; // second coordinate wrong (true grad is 4)
        let report = grad_check(|p| p.iter().map(|v| v * v).sum(), &x, &g, 1e-5).unwrap();
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst_coord, 1);
    }

    #[test]
    fn grad_check_rejects_nonfinite_probe() {
        // ln is non-finite when the probe crosses zero.
        let x = vec![5e-6];
        let g = vec![1.0 / 5e-6];
        let err = grad_check(|p| p[0].ln(), &x, &g, 1e-5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("coordinate 0"), "message: {msg}");
    }
}
