//! Counter-based seeded randomness.
//!
//! Every draw is addressed by `(seed, stream id, draw index)` and computed by a
//! stateless integer mix, so identical addresses yield identical values no
//! matter when or in what order they are evaluated. Training code derives one
//! stream per purpose and indexes draws by step and slot, which is what makes
//! fixed-seed runs and checkpoint resume bit-exact.

use crate::numerics::tensor::Tensor;

/// SplitMix64 finalizer; full-period bijective mix.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derive a sub-stream from a label; label collisions are the caller's
    /// responsibility.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in label.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self {
            seed: self.seed,
            stream: mix(self.stream ^ h),
        }
    }

    pub fn derive_index(&self, idx: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream.wrapping_add(mix(idx ^ 0xa5a5_a5a5_5a5a_5a5a)),
            ),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        mix(mix(self.seed ^ 0x243f_6a88_85a3_08d3) ^ mix(self.stream) ^ mix(index))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in_at(&self, index: u64, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_at(index)
    }

    /// Standard normal via Box-Muller; consumes logical indices 2k and 2k+1.
    #[inline]
    pub fn normal_at(&self, index: u64) -> f64 {
        let u1 = self.uniform_at(index.wrapping_mul(2));
        let u2 = self.uniform_at(index.wrapping_mul(2).wrapping_add(1));
        // 1 - u1 keeps the log argument strictly positive.
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform_vec(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.uniform_at(i as u64)).collect()
    }

    pub fn normal_vec(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.normal_at(i as u64)).collect()
    }

    pub fn normal_tensor(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, self.normal_vec(n)).expect("shape/len consistent")
    }

    pub fn uniform_tensor(&self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| self.uniform_in_at(i as u64, lo, hi)).collect(),
        )
        .expect("shape/len consistent")
    }

    /// Draw an index in [0, n) from draw slot `index`.
    pub fn index_at(&self, index: u64, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.u64_at(index) % n as u64) as usize
    }

    /// Stateful convenience cursor over this stream.
    pub fn cursor(&self) -> DrawCursor {
        DrawCursor {
            stream: *self,
            next: 0,
        }
    }
}

/// Sequential reader over a stream; draw index advances per call.
#[derive(Clone, Debug)]
pub struct DrawCursor {
    stream: RngStream,
    next: u64,
}

impl DrawCursor {
    pub fn uniform(&mut self) -> f64 {
        let v = self.stream.uniform_at(self.next);
        self.next += 1;
        v
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let v = self.stream.normal_at(self.next);
        self.next += 1;
        v
    }

    pub fn index(&mut self, n: usize) -> usize {
        let v = self.stream.index_at(self.next, n);
        self.next += 1;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_address_identical_value() {
        let a = RngStream::new(7, 3);
        let b = RngStream::new(7, 3);
        for i in 0..100 {
            assert_eq!(a.u64_at(i).to_le_bytes(), b.u64_at(i).to_le_bytes());
            assert_eq!(a.uniform_at(i), b.uniform_at(i));
            assert_eq!(a.normal_at(i), b.normal_at(i));
        }
    }

    #[test]
    fn different_streams_differ() {
        let a = RngStream::new(7, 0).derive("noise");
        let b = RngStream::new(7, 0).derive("batch");
        assert_ne!(a.u64_at(0), b.u64_at(0));
    }

    #[test]
    fn uniform_in_unit_interval() {
        let s = RngStream::new(123, 9);
        for i in 0..10_000 {
            let v = s.uniform_at(i);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_plausible() {
        let s = RngStream::new(5, 1);
        let n = 20_000;
        let vals: Vec<f64> = (0..n).map(|i| s.normal_at(i)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn draws_order_independent() {
        let s = RngStream::new(11, 2);
        let forward: Vec<f64> = (0..50).map(|i| s.uniform_at(i)).collect();
        let backward: Vec<f64> = (0..50).rev().map(|i| s.uniform_at(i)).collect();
        let rev: Vec<f64> = backward.into_iter().rev().collect();
        assert_eq!(forward, rev);
    }
}
