//! Counter-based SplitMix64 random numbers.
//!
//! Every draw is a pure function of `(seed, counter)`:
//!
//! ```text
//! z = seed + GAMMA * (counter + 1)            (wrapping, u64)
//! z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//! z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//! out = z ^ (z >> 31)
//! ```
//!
//! with `GAMMA = 0x9e3779b97f4a7c15`. Uniform floats take the top 53 bits of
//! `out` scaled by 2^-53, so they lie in `[0, 1)`. Normal draws use
//! Box-Muller on two consecutive uniforms. Any other implementation that
//! follows these three rules reproduces dropout masks and initial weights
//! exactly.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The `counter`-th output of the stream keyed by `seed`.
#[inline]
pub fn draw_u64(seed: u64, counter: u64) -> u64 {
    mix64(seed.wrapping_add(GAMMA.wrapping_mul(counter.wrapping_add(1))))
}

#[inline]
pub fn draw_unit(seed: u64, counter: u64) -> f64 {
    (draw_u64(seed, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent stream key from a parent key and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label.wrapping_add(GAMMA)))
}

/// Sequential view over one counter-based stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw_u64(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        let v = draw_unit(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with standard deviation `std`, redrawn until within two
    /// standard deviations of zero.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
