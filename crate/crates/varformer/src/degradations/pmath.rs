//! Portable elementary functions built from arithmetic only.
//!
//! Platform libm implementations of `exp`/`ln`/`sin` may differ in the last
//! bits between systems; everything that must be bit-identical across
//! platforms (degradation synthesis, the toy corpus, metric windows) routes
//! through these fixed polynomial evaluations instead.

const LN2: f64 = core::f64::consts::LN_2;

/// 2^k for integer k within the normal double range.
fn exp2i(k: i64) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// exp(x) via range reduction x = k·ln2 + r and a Taylor tail.
pub fn exp_p(x: f64) -> f64 {
    if x < -700.0 {
        return 0.0;
    }
    if x > 700.0 {
        return f64::INFINITY;
    }
    let kf = (x / LN2).round();
    let k = kf as i64;
    let r = x - kf * LN2; // |r| ≤ ln2/2 ≈ 0.347
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..=17u32 {
        term *= r / i as f64;
        sum += term;
    }
    sum * exp2i(k)
}

/// ln(x) via mantissa/exponent split and the atanh series.
pub fn ln_p(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "ln_p domain: {x}");
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if m > core::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln m = 2·atanh(s), s = (m−1)/(m+1), |s| ≤ 0.172
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut sum = 0.0;
    for i in 0..14u32 {
        sum += term / (2 * i + 1) as f64;
        term *= s2;
    }
    2.0 * sum + e as f64 * LN2
}

pub fn log10_p(x: f64) -> f64 {
    ln_p(x) / core::f64::consts::LN_10
}

/// x^y for x > 0 (and 0^y = 0 for y > 0).
pub fn pow_p(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        assert!(y > 0.0, "pow_p: 0 base needs positive exponent");
        return 0.0;
    }
    exp_p(y * ln_p(x))
}

/// sin(x) by reduction to [−π, π] and a degree-17 Taylor polynomial.
pub fn sin_p(x: f64) -> f64 {
    let tau = core::f64::consts::TAU;
    let r = x - (x / tau).round() * tau; // |r| ≤ π
    // fold into |r| ≤ π/2 (sin(π−r) = sin(−π−r) = sin r, so no sign flips)
    let half_pi = core::f64::consts::FRAC_PI_2;
    let r = if r > half_pi {
        core::f64::consts::PI - r
    } else if r < -half_pi {
        -core::f64::consts::PI - r
    } else {
        r
    };
    let r2 = r * r;
    let mut term = r;
    let mut sum = r;
    for i in 1..=9u32 {
        term *= -r2 / ((2 * i) as f64 * (2 * i + 1) as f64);
        sum += term;
    }
    sum
}

pub fn cos_p(x: f64) -> f64 {
    sin_p(x + core::f64::consts::FRAC_PI_2)
}
