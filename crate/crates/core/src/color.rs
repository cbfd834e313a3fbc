//! Colorimetric types and conversions between sRGB, CIE 1931 xyY, CIELAB and
//! CIELch.
//!
//! All hue angles are in degrees in `[0, 360)`. A color whose chroma is at or
//! below [`ACHROMATIC_CHROMA`] is treated as achromatic and carries hue `0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chroma at or below which a color has no defined hue.
pub const ACHROMATIC_CHROMA: f64 = 1e-9;

const DELTA: f64 = 6.0 / 29.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("non-finite color coordinate")]
    NonFinite,
    #[error("white point luminance must be positive, got {0}")]
    WhiteLuminance(f64),
    #[error("chromaticity y must be positive when Y > 0")]
    ZeroChromaticityY,
}

/// CIE 1931 chromaticity plus luminance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyY {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "Y")]
    pub big_y: f64,
}

impl XyY {
    pub const fn new(x: f64, y: f64, big_y: f64) -> Self {
        Self { x, y, big_y }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.big_y.is_finite()
    }

    /// Tristimulus values `(X, Y, Z)`.
    pub fn to_xyz(&self) -> Result<[f64; 3], ColorError> {
        if !self.is_finite() {
            return Err(ColorError::NonFinite);
        }
        if self.big_y == 0.0 {
            return Ok([0.0, 0.0, 0.0]);
        }
        if self.y <= 0.0 {
            return Err(ColorError::ZeroChromaticityY);
        }
        let scale = self.big_y / self.y;
        Ok([
            self.x * scale,
            self.big_y,
            (1.0 - self.x - self.y) * scale,
        ])
    }
}

/// Reference white, given as chromaticity and luminance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhitePoint {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "Y")]
    pub big_y: f64,
}

impl WhitePoint {
    pub const fn new(x: f64, y: f64, big_y: f64) -> Self {
        Self { x, y, big_y }
    }

    /// CIE D65 at the chromaticity used for the UW-58 table.
    pub const D65: WhitePoint = WhitePoint::new(0.31273, 0.32902, 100.0);

    fn to_xyz(self) -> Result<[f64; 3], ColorError> {
        if !(self.x.is_finite() && self.y.is_finite() && self.big_y.is_finite()) {
            return Err(ColorError::NonFinite);
        }
        if self.big_y <= 0.0 {
            return Err(ColorError::WhiteLuminance(self.big_y));
        }
        if self.y <= 0.0 {
            return Err(ColorError::ZeroChromaticityY);
        }
        XyY::new(self.x, self.y, self.big_y).to_xyz()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn is_finite(&self) -> bool {
        self.l.is_finite() && self.a.is_finite() && self.b.is_finite()
    }

    pub fn to_lch(self) -> Lch {
        lab_to_lch(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lch {
    pub l: f64,
    pub c: f64,
    pub h: f64,
}

impl Lch {
    pub const fn new(l: f64, c: f64, h: f64) -> Self {
        Self { l, c, h }
    }

    pub fn is_achromatic(&self) -> bool {
        self.c <= ACHROMATIC_CHROMA
    }

    pub fn to_lab(self) -> Lab {
        lch_to_lab(self)
    }
}

/// An sRGB-encoded 8-bit color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb8 {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb8 {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// XYZ to CIELAB relative to a white given in XYZ.
pub fn xyz_to_lab(xyz: [f64; 3], white: [f64; 3]) -> Lab {
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    Lab::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

pub fn lab_to_xyz(lab: Lab, white: [f64; 3]) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    [
        white[0] * lab_f_inv(fx),
        white[1] * lab_f_inv(fy),
        white[2] * lab_f_inv(fz),
    ]
}

pub fn xyy_to_lab(c: XyY, wp: WhitePoint) -> Result<Lab, ColorError> {
    let white = wp.to_xyz()?;
    let xyz = c.to_xyz()?;
    Ok(xyz_to_lab(xyz, white))
}

// sRGB primaries with D65, Y normalized to 1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

// Row sums of SRGB_TO_XYZ: the XYZ of sRGB (1, 1, 1).
const SRGB_WHITE: [f64; 3] = [
    0.412_456_4 + 0.357_576_1 + 0.180_437_5,
    0.212_672_9 + 0.715_152_2 + 0.072_175_0,
    0.019_333_9 + 0.119_192_0 + 0.950_304_1,
];

fn srgb_decode(v: u8) -> f64 {
    let c = f64::from(v) / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Lookup table of decoded sRGB channel values.
fn decode_table() -> &'static [f64; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = srgb_decode(i as u8);
        }
        t
    })
}

pub fn srgb_to_lab(c: Rgb8) -> Lab {
    let table = decode_table();
    let rgb = [
        table[c.r as usize],
        table[c.g as usize],
        table[c.b as usize],
    ];
    let mut xyz = [0.0; 3];
    for (out, row) in xyz.iter_mut().zip(SRGB_TO_XYZ.iter()) {
        *out = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    xyz_to_lab(xyz, SRGB_WHITE)
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors are clipped per channel.
pub fn lab_to_srgb(c: Lab) -> Rgb8 {
    let xyz = lab_to_xyz(c, SRGB_WHITE);
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(XYZ_TO_SRGB.iter()) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        let enc = srgb_encode(lin.clamp(0.0, 1.0));
        *o = (enc * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    Rgb8::new(out[0], out[1], out[2])
}

fn normalize_degrees(h: f64) -> f64 {
    let h = h.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

pub fn lab_to_lch(c: Lab) -> Lch {
    let chroma = c.a.hypot(c.b);
    let h = if chroma <= ACHROMATIC_CHROMA {
        0.0
    } else {
        normalize_degrees(c.b.atan2(c.a).to_degrees())
    };
    Lch::new(c.l, chroma, h)
}

pub fn lch_to_lab(c: Lch) -> Lab {
    let (s, co) = c.h.to_radians().sin_cos();
    Lab::new(c.l, c.c * co, c.c * s)
}

/// CIE 1976 color difference (Euclidean distance in Lab).
pub fn delta_e_76(p: Lab, q: Lab) -> f64 {
    let dl = p.l - q.l;
    let da = p.a - q.a;
    let db = p.b - q.b;
    (dl * dl + da * da + db * db).sqrt()
}

/// Minimal angular difference between two hues, in `[0, 180]`.
pub fn hue_delta(h1: f64, h2: f64) -> f64 {
    let d = (normalize_degrees(h1) - normalize_degrees(h2)).abs();
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_lab(got: Lab, want: (f64, f64, f64), tol: f64) {
        assert!(
            (got.l - want.0).abs() <= tol
                && (got.a - want.1).abs() <= tol
                && (got.b - want.2).abs() <= tol,
            "{got:?} vs {want:?}"
        );
    }

    #[test]
    fn xyy_white_and_gray() {
        let wp = WhitePoint::new(0.3127, 0.3290, 100.0);
        let white = xyy_to_lab(XyY::new(0.31273, 0.32902, 100.0), wp).unwrap();
        assert_lab(white, (100.0, 0.0, 0.0), 0.05);
        let gray = xyy_to_lab(XyY::new(0.31273, 0.32902, 18.419), wp).unwrap();
        assert_lab(gray, (50.0, 0.0, 0.0), 0.05);
    }

    #[test]
    fn xyy_bcp_white() {
        let wp = crate::datasets::BCP37_WHITE;
        let lab = xyy_to_lab(XyY::new(0.310, 0.316, 116.0), wp).unwrap();
        assert_lab(lab, (100.0, -0.020, -1.141), 0.05);
    }

    #[test]
    fn xyy_linear_segment() {
        // Y/Yn = 0.001 is below (6/29)^3, so L* = 903.3 * 0.001
        let lab = xyy_to_lab(XyY::new(0.31273, 0.32902, 0.1), WhitePoint::D65).unwrap();
        assert!((lab.l - 0.90330).abs() < 1e-4, "{lab:?}");
    }

    #[test]
    fn xyy_errors() {
        let bad_wp = WhitePoint::new(0.3127, 0.329, 0.0);
        assert_eq!(
            xyy_to_lab(XyY::new(0.3, 0.3, 10.0), bad_wp),
            Err(ColorError::WhiteLuminance(0.0))
        );
        assert_eq!(
            xyy_to_lab(XyY::new(f64::NAN, 0.3, 10.0), WhitePoint::D65),
            Err(ColorError::NonFinite)
        );
        assert_eq!(
            xyy_to_lab(XyY::new(0.3, 0.0, 10.0), WhitePoint::D65),
            Err(ColorError::ZeroChromaticityY)
        );
        // Y = 0 is black regardless of chromaticity
        assert_eq!(
            xyy_to_lab(XyY::new(0.0, 0.0, 0.0), WhitePoint::D65).unwrap(),
            Lab::new(0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn srgb_anchors() {
        assert_lab(srgb_to_lab(Rgb8::new(255, 255, 255)), (100.0, 0.0, 0.0), 0.1);
        assert_lab(srgb_to_lab(Rgb8::new(0, 0, 0)), (0.0, 0.0, 0.0), 1e-12);
        assert_lab(srgb_to_lab(Rgb8::new(255, 0, 0)), (53.24, 80.09, 67.20), 0.2);
    }

    #[test]
    fn srgb_round_trip_all_grays() {
        for v in 0..=255u8 {
            let c = Rgb8::new(v, v, v);
            assert_eq!(lab_to_srgb(srgb_to_lab(c)), c);
        }
    }

    #[test]
    fn lch_anchors() {
        let lch = lab_to_lch(Lab::new(50.0, 1.3084, -24.966));
        assert!((lch.c - 25.0).abs() < 0.05 && (lch.h - 273.0).abs() < 0.1, "{lch:?}");
        let lch = lab_to_lch(Lab::new(75.0, -23.657, -26.274));
        assert!((lch.c - 35.355).abs() < 0.05 && (lch.h - 228.0).abs() < 0.1, "{lch:?}");
        assert_eq!(lab_to_lch(Lab::new(50.0, 0.0, 0.0)), Lch::new(50.0, 0.0, 0.0));
    }

    #[test]
    fn delta_e_anchors() {
        let p = Lab::new(12.0, -3.0, 40.0);
        assert_eq!(delta_e_76(p, p), 0.0);
        assert_eq!(delta_e_76(Lab::new(0.0, 0.0, 0.0), Lab::new(100.0, 0.0, 0.0)), 100.0);
        assert_eq!(delta_e_76(Lab::new(25.0, 0.0, 0.0), Lab::new(50.0, 0.0, 0.0)), 25.0);
    }

    #[test]
    fn hue_delta_anchors() {
        assert!((hue_delta(10.0, 350.0) - 20.0).abs() < 1e-12);
        assert_eq!(hue_delta(273.0, 273.0), 0.0);
        assert_eq!(hue_delta(48.0, 228.0), 180.0);
    }

    fn lab_strategy() -> impl Strategy<Value = Lab> {
        (0.0..100.0f64, -128.0..128.0f64, -128.0..128.0f64).prop_map(|(l, a, b)| Lab::new(l, a, b))
    }

    proptest! {
        #[test]
        fn lch_round_trip(lab in lab_strategy()) {
            let lch = lab_to_lch(lab);
            prop_assume!(lch.c > 1e-9);
            prop_assert!((0.0..360.0).contains(&lch.h));
            let back = lch_to_lab(lch);
            let scale = lch.c.max(1.0);
            prop_assert!((back.a - lab.a).abs() <= 1e-9 * scale);
            prop_assert!((back.b - lab.b).abs() <= 1e-9 * scale);
            prop_assert_eq!(back.l, lab.l);
        }

        #[test]
        fn delta_e_triangle(p in lab_strategy(), q in lab_strategy(), r in lab_strategy()) {
            let pq = delta_e_76(p, q);
            prop_assert!(pq >= 0.0);
            prop_assert_eq!(pq, delta_e_76(q, p));
            prop_assert!(pq <= delta_e_76(p, r) + delta_e_76(r, q) + 1e-9);
        }

        #[test]
        fn hue_delta_symmetric(h1 in -720.0..720.0f64, h2 in -720.0..720.0f64) {
            let d = hue_delta(h1, h2);
            prop_assert_eq!(d, hue_delta(h2, h1));
            prop_assert!((0.0..=180.0).contains(&d));
        }
    }
}
