//! Counter-based deterministic random number generator.
//!
//! Every draw is a pure function of `(key, counter)`: the counter advances by
//! one per 64-bit output and the key is derived from the seed plus a stream
//! label. This keeps the stream reproducible across platforms and lets
//! independent parts of the pipeline (data generation, batching, parameter
//! init, query generation) own non-overlapping streams fanned out from a
//! single root seed.
//!
//! The output function is the SplitMix64 finalizer applied to
//! `key + counter * GOLDEN_GAMMA`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator. Single-owner; never shared.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent named stream. The label is hashed into the key,
    /// so `rng.stream("data")` and `rng.stream("init")` never collide and do
    /// not advance `self`.
    pub fn stream(&self, label: &str) -> Rng {
        let mut h = self.key ^ 0x51_7C_C1_B7_27_22_0A_95;
        for &b in label.as_bytes() {
            h = mix64(h ^ u64::from(b).wrapping_mul(GOLDEN_GAMMA));
        }
        Rng {
            key: mix64(h),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an indexed substream (e.g. one stream per run or per query cell).
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Multiply-shift map of the full 64-bit draw.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal via the Marsaglia polar method (uses only sqrt/ln).
    /// The rejected draws are consumed from the same counter stream, so the
    /// sequence stays a deterministic function of the call order.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * scale);
                return u * scale;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.next_normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly without replacement from [0, n),
    /// in draw order (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_streams_diverge() {
        let root = Rng::new(7);
        let mut a = root.stream("data");
        let mut b = root.stream("init");
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn stream_derivation_does_not_advance_parent() {
        let mut root = Rng::new(9);
        let first = root.clone().next_u64();
        let _ = root.stream("x");
        assert_eq!(root.next_u64(), first);
    }

    #[test]
    fn uniform_range_bounds() {
        let mut r = Rng::new(3);
        for _ in 0..1000 {
            assert!(r.next_below(10) < 10);
            let f = r.next_f64();
            assert!((0.0..1.0).contains(&f));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = Rng::new(11);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = r.next_normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sample_distinct_is_distinct_and_exhaustive() {
        let mut r = Rng::new(5);
        let got = r.sample_distinct(8, 8);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        let part = r.sample_distinct(100, 10);
        let mut seen = std::collections::BTreeSet::new();
        for i in &part {
            assert!(*i < 100);
            assert!(seen.insert(*i), "duplicate draw");
        }
    }
}
