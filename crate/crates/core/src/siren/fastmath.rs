//! Branch-free f32 sine/cosine used on the training hot path.
//!
//! Cody-Waite reduction to a turn fraction in [-0.5, 0.5], folding to
//! [-0.25, 0.25], then an odd degree-11 polynomial. Absolute error stays
//! below 6e-7 for |z| < 1e4.

const TWO_PI_HI: f32 = 6.28125;
const TWO_PI_LO: f32 = 0.001_935_307_2;
const INV_TWO_PI: f32 = 0.159_154_94;
const ROUND_MAGIC: f32 = 12_582_912.0;

const S3: f32 = -1.0 / 6.0;
const S5: f32 = 1.0 / 120.0;
const S7: f32 = -1.0 / 5040.0;
const S9: f32 = 1.0 / 362_880.0;
const S11: f32 = -1.0 / 39_916_800.0;

/// Fraction of a turn: `z = 2*pi*(k + t)`, `t` in [-0.5, 0.5].
#[inline(always)]
fn turns(z: f32) -> f32 {
    let k = (z * INV_TWO_PI + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (z - k * TWO_PI_HI) - k * TWO_PI_LO;
    r * INV_TWO_PI
}

/// sin(2*pi*t) for t in [-0.5, 0.5].
#[inline(always)]
fn sin_turns(t: f32) -> f32 {
    let half = f32::from_bits(0.5f32.to_bits() | (t.to_bits() & 0x8000_0000));
    let s = if t.abs() > 0.25 { half - t } else { t };
    let x = s * std::f32::consts::TAU;
    let x2 = x * x;
    x * (1.0 + x2 * (S3 + x2 * (S5 + x2 * (S7 + x2 * (S9 + x2 * S11)))))
}

#[inline(always)]
pub fn sin(z: f32) -> f32 {
    sin_turns(turns(z))
}

#[inline(always)]
pub fn sin_cos(z: f32) -> (f32, f32) {
    let t = turns(z);
    let mut tc = t + 0.25;
    if tc > 0.5 {
        tc -= 1.0;
    }
    (sin_turns(t), sin_turns(tc))
}

/// Overwrites `z` with sin(z) and fills `cos` with cos(z).
pub fn sin_cos_slice(z: &mut [f32], cos: &mut [f32]) {
    debug_assert_eq!(z.len(), cos.len());
    for (s, c) in z.iter_mut().zip(cos.iter_mut()) {
        let (sv, cv) = sin_cos(*s);
        *s = sv;
        *c = cv;
    }
}

pub fn sin_slice(z: &mut [f32]) {
    for s in z.iter_mut() {
        *s = sin(*s);
    }
}
