//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, counter)`, so a value can be
//! addressed directly by (step, position, purpose) without threading a
//! mutable generator through the code. The block function is Philox4x32-10.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// A seeded counter-based generator.
///
/// `at(a, b, c)` addresses a 128-bit block; the three coordinates are
/// free for callers to use as (step, position, purpose) or similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    /// Derives an independent generator for a named sub-stream.
    pub fn fork(&self, stream: u64) -> Self {
        let b = philox4x32([stream as u32, (stream >> 32) as u32, 0x5EED, 0xF0C4], self.key);
        Self { key: [b[0], b[1]] }
    }

    pub fn block(&self, a: u64, b: u32, c: u32) -> [u32; 4] {
        philox4x32([a as u32, (a >> 32) as u32, b, c], self.key)
    }

    pub fn u64_at(&self, a: u64, b: u32, c: u32) -> u64 {
        let x = self.block(a, b, c);
        (u64::from(x[0]) << 32) | u64::from(x[1])
    }

    /// Uniform in the open interval (0, 1), 53-bit resolution.
    pub fn open01(&self, a: u64, b: u32, c: u32) -> f64 {
        let bits = self.u64_at(a, b, c) >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the closed interval [0, 1].
    pub fn closed01(&self, a: u64, b: u32, c: u32) -> f64 {
        let bits = self.u64_at(a, b, c) >> 11;
        bits as f64 / ((1u64 << 53) - 1) as f64
    }

    /// Uniform integer in `[0, n)` by rejection-free multiply-shift on 64 bits.
    pub fn below(&self, n: u64, a: u64, b: u32, c: u32) -> u64 {
        ((u128::from(self.u64_at(a, b, c)) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&self, a: u64, b: u32, c: u32) -> f64 {
        let x = self.block(a, b, c);
        let u1 = ((((u64::from(x[0]) << 32) | u64::from(x[1])) >> 11) as f64 + 0.5)
            / (1u64 << 53) as f64;
        let u2 = (((u64::from(x[2]) << 32) | u64::from(x[3])) >> 11) as f64 / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sequential cursor over this generator's counter space.
    pub fn stream(&self, a: u64) -> RngStream {
        RngStream { rng: *self, a, next: 0 }
    }
}

/// A sequential view over one counter row; convenient for loops that need
/// an unknown number of draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: CounterRng,
    a: u64,
    next: u64,
}

impl RngStream {
    fn bump(&mut self) -> (u32, u32) {
        let n = self.next;
        self.next += 1;
        (n as u32, (n >> 32) as u32)
    }

    pub fn open01(&mut self) -> f64 {
        let (b, c) = self.bump();
        self.rng.open01(self.a, b, c)
    }

    pub fn closed01(&mut self) -> f64 {
        let (b, c) = self.bump();
        self.rng.closed01(self.a, b, c)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        let (b, c) = self.bump();
        self.rng.below(n, self.a, b, c)
    }

    pub fn normal(&mut self) -> f64 {
        let (b, c) = self.bump();
        self.rng.normal(self.a, b, c)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 library.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn open01_stays_inside() {
        let rng = CounterRng::new(7);
        for i in 0..10_000 {
            let u = rng.open01(i, 0, 0);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn forks_differ() {
        let rng = CounterRng::new(1);
        assert_ne!(rng.fork(0).block(0, 0, 0), rng.fork(1).block(0, 0, 0));
        assert_eq!(rng.fork(3), rng.fork(3));
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut s = CounterRng::new(99).stream(0);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.below(5) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 50_000.0 - 0.2).abs() < 0.01, "{counts:?}");
        }
    }
}
