//! Deterministic 64-bit generator with derived per-layer streams.
//!
//! The core step is splitmix64 (Vigna's reference constants), chosen because
//! it is trivially seedable, counter-based, and has published golden outputs:
//! from state 0 the first three outputs are 0xE220A8397B1DCDAF,
//! 0x6E789E6AA1B965F4, 0x06C45D188009454F. Same seed, same stream, bit for
//! bit, on every platform.

use super::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derived stream `stream_id` of `seed`. Streams with distinct ids are
    /// decorrelated by pushing the id through one generator step.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        let mut base = Rng::new(seed);
        let mixed = base.next_u64() ^ stream_id.wrapping_mul(0xD134_2543_DE82_EF95);
        Rng::new(mixed)
    }

    /// Child generator seeded from this one; advances the parent once.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes exactly two raw draws.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Kaiming-uniform matrix: entries iid on [-sqrt(6/fan_in), +sqrt(6/fan_in)]
/// with fan_in = cols (the matrix left-multiplies activations of dimension
/// cols).
pub fn kaiming_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.range(-bound, bound))
}

/// Matrix of iid standard normals.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
}
