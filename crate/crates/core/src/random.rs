//! Deterministic random stream and Gaussian sampling.
//!
//! The stream is ChaCha8 seeded from a `u64`, which is reproducible across
//! platforms. Transforms layered on top of it:
//!
//! * uniform on `[0, 1)`: `(next_u64() >> 11) * 2^-53`
//! * uniform on `(0, 1]`: `((next_u64() >> 11) + 1) * 2^-53`
//! * standard normal: Box–Muller on `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`, drawn in
//!   that order; `r = sqrt(-2 ln u1)` gives `r cos(2π u2)` first and
//!   `r sin(2π u2)` on the next call
//! * Rademacher: `+1` if the top bit of `next_u64()` is set, else `-1`

use rand_chacha::rand_core::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{axpy, dot};

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Golden-ratio increment used to derive per-worker seeds.
pub const SEED_SPLIT: u64 = 0x9E37_79B9_7F4A_7C15;

/// `master ^ (index * 0x9E3779B97F4A7C15)`, wrapping.
pub fn split_seed(master: u64, index: u64) -> u64 {
    master ^ index.wrapping_mul(SEED_SPLIT)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream `index`, see [`split_seed`].
    pub fn split(&self, index: u64) -> Rng {
        Rng::new(split_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    fn uniform_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.standard_normal()).collect()
    }
}

/// Covariance of a Gaussian draw.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<'a> {
    /// `σ² I`
    Isotropic { sigma: f64 },
    /// `σ² (I − Σ_k b_k b_kᵀ)` for an orthonormal set `basis`.
    Projected { sigma: f64, basis: &'a [Vec<f64>] },
}

/// Draws `mean + ξ` with `ξ ~ N(0, cov)`.
///
/// For the projected law, an isotropic draw has its components along each
/// basis direction subtracted, so the noise is orthogonal to the basis up
/// to rounding (exactly, for coordinate-axis bases).
pub fn sample_gaussian(rng: &mut Rng, mean: &[f64], cov: &Covariance<'_>) -> Vec<f64> {
    let d = mean.len();
    let (sigma, basis): (f64, &[Vec<f64>]) = match cov {
        Covariance::Isotropic { sigma } => (*sigma, &[]),
        Covariance::Projected { sigma, basis } => (*sigma, basis),
    };
    let mut noise = rng.normal_vec(d);
    for b in basis {
        let c = dot(&noise, b);
        axpy(-c, b, &mut noise);
        // axis-aligned basis vectors leave rounding residue in that coordinate
        if let Some(k) = axis_index(b) {
            noise[k] = 0.0;
        }
    }
    if sigma == 0.0 {
        return mean.to_vec();
    }
    mean.iter().zip(&noise).map(|(m, z)| m + sigma * z).collect()
}

fn axis_index(b: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (k, &v) in b.iter().enumerate() {
        if v != 0.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(k);
        }
    }
    idx
}
