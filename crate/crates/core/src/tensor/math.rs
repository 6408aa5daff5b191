//! Scalar math kernels for the hot elementwise loops.
//!
//! `exp` and `tanh` from libm cost 20ns+ per call here and dominate the
//! softmax and GELU passes at training scale. These replacements keep
//! ~2e-13 relative accuracy (degree-10 polynomial after range reduction),
//! which is far below every tolerance in the test suite, and run 3-5x
//! faster because the compiler can inline and vectorize them.
//!
//! The slice reductions at the bottom exist for the same reason: a plain
//! `iter().sum()` chains every add through one accumulator and cannot
//! vectorize, which makes softmax and layer-norm reduction passes as
//! expensive as their exp passes. Eight fixed lanes keep results
//! deterministic while letting the loop run wide.

const LOG2E: f64 = std::f64::consts::LOG2_E;
// ln(2) split hi/lo so the reduction r = x - k*ln2 stays exact
const LN2_HI: f64 = 0.693_147_180_369_123_8;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

// 1.5 * 2^52: adding it rounds a small float to the nearest integer in the
// low mantissa bits (two's complement), which both vectorizes and hands back
// the integer without a separate conversion
const MAGIC: f64 = 6_755_399_441_055_744.0;

/// exp(x) for finite x. Underflows to 0 below -708, saturates at x = 709
/// (inputs that large abort earlier as non-finite anyway), exact at x = 0.
/// Branch-free except one final select, so loops over slices vectorize.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * LOG2E + MAGIC;
    let kf = t - MAGIC;
    let ki = t.to_bits() as u32 as i32;
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    // Taylor to r^10; |r| <= ln(2)/2 keeps the truncation near 2e-13
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0 + r * (1.0 / 3628800.0))))))))));
    let scale = f64::from_bits(((1023 + ki as i64) as u64) << 52);
    let v = p * scale;
    if x < -708.0 {
        0.0
    } else {
        v
    }
}

/// tanh(x) via fast_exp. The clamp at |x| = 20 already rounds to exactly
/// +-1.0, so saturation needs no branch.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    let xc = x.clamp(-20.0, 20.0);
    1.0 - 2.0 / (fast_exp(2.0 * xc) + 1.0)
}

/// Slice sum over eight independent lanes.
pub fn sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    let mut s: f64 = chunks.remainder().iter().sum();
    for lane in acc {
        s += lane;
    }
    s
}

/// Slice maximum over eight independent lanes; NEG_INFINITY when empty.
pub fn max(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] = acc[i].max(c[i]);
        }
    }
    let mut m = chunks.remainder().iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    for lane in acc {
        m = m.max(lane);
    }
    m
}

/// Dot product over eight independent lanes. Slices must match in length.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f64 =
        ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for lane in acc {
        s += lane;
    }
    s
}

/// Sum of squared deviations from `mu` over eight independent lanes.
pub fn sq_dev_sum(xs: &[f64], mu: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            let d = c[i] - mu;
            acc[i] += d * d;
        }
    }
    let mut s: f64 = chunks.remainder().iter().map(|x| (x - mu) * (x - mu)).sum();
    for lane in acc {
        s += lane;
    }
    s
}
