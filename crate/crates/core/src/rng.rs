//! Seeded random streams and the two base samplers used by the simulators.
//!
//! Every consumer gets a ChaCha8 generator keyed by `(seed, stream)`, so a run
//! over many paths is independent of the order paths are generated in.
//! Normals come from Box-Muller and gammas from Marsaglia-Tsang; alternate
//! implementations should reproduce moments, not bit streams.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type SimRng = ChaCha8Rng;

/// Independent generator for stream `stream` under master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform on the half-open interval (0, 1].
#[inline]
pub(crate) fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// One standard normal variate (Box-Muller, cosine branch).
#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = open_uniform(rng);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Gamma variate with the given shape and scale.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma shape must be positive, got {shape}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma scale must be positive, got {scale}"
        )));
    }
    Ok(gamma_unit(shape, rng) * scale)
}

/// Marsaglia-Tsang squeeze for unit scale; shapes below one use the
/// `G(a) = G(a + 1) * U^(1/a)` boost.
pub(crate) fn gamma_unit<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let boost = open_uniform(rng).powf(1.0 / shape);
        return gamma_unit(shape + 1.0, rng) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_uniform(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}
