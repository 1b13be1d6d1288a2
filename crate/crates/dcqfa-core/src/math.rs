//! Scalar math helpers over `libm`, shared by the numeric kernels.

/// Natural exponent, f64.
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Natural log, f64.
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn abs32(x: f32) -> f32 {
    libm::fabsf(x)
}

/// Round to nearest integer, ties to even. Exact for |x| < 2^52.
pub fn round_ties_even(x: f64) -> f64 {
    let f = libm::floor(x);
    let frac = x - f;
    if frac > 0.5 {
        f + 1.0
    } else if frac < 0.5 {
        f
    } else {
        // tie: keep the even neighbour
        let half = f / 2.0;
        if libm::floor(half) == half {
            f
        } else {
            f + 1.0
        }
    }
}

/// Round half away from zero (schedule arithmetic, not quantization).
#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

/// Numerically stable softplus: ln(1 + e^z).
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// FNV-1a over a byte stream; used for config hashes and checkpoint fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
