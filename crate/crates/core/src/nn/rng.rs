//! Seeded, labelled random streams on a fixed PCG generator.

use rand_core::{RngCore, SeedableRng};
use rand_pcg::Pcg64;

/// Name of the generator algorithm, recorded in artifacts.
pub const ALGORITHM: &str = "pcg64-xsl-rr-128/64";

/// A deterministic random stream identified by `(seed, label)`.
///
/// Child streams are derived by hashing the parent seed with the child's
/// full label path, so they do not depend on how many draws the parent made.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Pcg64,
    seed: u64,
    label: String,
    spare_normal: Option<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, "root")
    }

    pub fn stream(seed: u64, label: &str) -> Self {
        let h = fnv1a(label.as_bytes());
        let a = splitmix64(seed ^ h);
        let b = splitmix64(a ^ 0x5851_f42d_4c95_7f2d);
        let c = splitmix64(b.rotate_left(17) ^ h);
        let d = splitmix64(c);
        let mut bytes = [0u8; 32];
        for (i, w) in [a, b, c, d].iter().enumerate() {
            bytes[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        Self {
            inner: Pcg64::from_seed(bytes),
            seed,
            label: label.to_string(),
            spare_normal: None,
        }
    }

    /// An independent stream for `label`, nested under this stream's label.
    pub fn child(&self, label: &str) -> Self {
        Self::stream(self.seed, &format!("{}/{}", self.label, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via Box–Muller; the second value of each pair is
    /// cached for the next call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k.min(n));
        p
    }
}

/// `gaussian(rng, n)`: `n` i.i.d. standard normal draws.
pub fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    rng.gaussian_vec(n)
}
