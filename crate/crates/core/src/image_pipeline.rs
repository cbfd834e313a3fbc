//! Image normalization to a 100×100 CIELAB grid, spatial windows, and
//! figure-ground segmentation.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{lab_to_lch, srgb_to_lab, Lab, Lch, Rgb8};

/// Side length of every normalized image.
pub const SIDE: usize = 100;
pub const N_PIXELS: usize = SIDE * SIDE;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected {expected} pixels, got {got}")]
    PixelCount { expected: usize, got: usize },
    #[error("pixel {0} is not finite")]
    NonFinite(usize),
    #[error("window percentage {0} is not one of 20, 40, 60, 80, 100")]
    BadPercent(u32),
    #[error("image has zero area")]
    Empty,
}

/// A 100×100 row-major grid of CIELAB pixels with their CIELch form cached.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    lab: Vec<Lab>,
    lch: Vec<Lch>,
}

impl NormalizedImage {
    pub fn from_lab(pixels: Vec<Lab>) -> Result<Self, ImageError> {
        if pixels.len() != N_PIXELS {
            return Err(ImageError::PixelCount {
                expected: N_PIXELS,
                got: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        let lch = pixels.iter().map(|&p| lab_to_lch(p)).collect();
        Ok(Self { lab: pixels, lch })
    }

    /// Every pixel set to one color.
    pub fn uniform(c: Lab) -> Self {
        Self::from_lab(vec![c; N_PIXELS]).expect("uniform image is valid")
    }

    /// Resample an sRGB image to 100×100 (ignoring aspect ratio) and convert.
    pub fn from_rgb(img: &RgbImage) -> Result<Self, ImageError> {
        if img.width() == 0 || img.height() == 0 {
            return Err(ImageError::Empty);
        }
        let resized = if img.width() as usize == SIDE && img.height() as usize == SIDE {
            img.clone()
        } else {
            image::imageops::resize(img, SIDE as u32, SIDE as u32, FilterType::Triangle)
        };
        let pixels = resized
            .pixels()
            .map(|p| srgb_to_lab(Rgb8::new(p[0], p[1], p[2])))
            .collect();
        Self::from_lab(pixels)
    }

    pub fn pixels(&self) -> &[Lab] {
        &self.lab
    }

    pub fn lch(&self) -> &[Lch] {
        &self.lch
    }
}

/// Decode a JPEG/PNG byte stream and normalize it.
pub fn normalize_image(bytes: &[u8]) -> Result<NormalizedImage, ImageError> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    NormalizedImage::from_rgb(&img)
}

pub fn normalize_image_file(path: &Path) -> Result<NormalizedImage, ImageError> {
    normalize_image(&std::fs::read(path)?)
}

/// The pixel subsets features are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Window {
    Center20,
    Center40,
    Center60,
    Center80,
    Center100,
    Segmented,
}

impl Window {
    pub const ALL: [Window; 6] = [
        Window::Center20,
        Window::Center40,
        Window::Center60,
        Window::Center80,
        Window::Center100,
        Window::Segmented,
    ];

    pub fn percent(self) -> Option<u32> {
        match self {
            Window::Center20 => Some(20),
            Window::Center40 => Some(40),
            Window::Center60 => Some(60),
            Window::Center80 => Some(80),
            Window::Center100 => Some(100),
            Window::Segmented => None,
        }
    }

    pub fn from_percent(p: u32) -> Result<Self, ImageError> {
        match p {
            20 => Ok(Window::Center20),
            40 => Ok(Window::Center40),
            60 => Ok(Window::Center60),
            80 => Ok(Window::Center80),
            100 => Ok(Window::Center100),
            other => Err(ImageError::BadPercent(other)),
        }
    }

    /// Suffix used in feature ids: `w20` … `w100`, or `seg`.
    pub fn id(self) -> String {
        match self.percent() {
            Some(p) => format!("w{p}"),
            None => "seg".to_string(),
        }
    }
}

/// A nonempty subset of the 100×100 grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowMask {
    bits: Vec<bool>,
    count: usize,
    pub window: Window,
}

impl WindowMask {
    pub fn from_bits(bits: Vec<bool>, window: Window) -> Option<Self> {
        if bits.len() != N_PIXELS {
            return None;
        }
        let count = bits.iter().filter(|&&b| b).count();
        (count > 0).then_some(Self {
            bits,
            count,
            window,
        })
    }

    pub fn full(window: Window) -> Self {
        Self::from_bits(vec![true; N_PIXELS], window).expect("full mask is nonempty")
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn is_subset_of(&self, other: &WindowMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Debug export: 0 outside, 255 inside.
    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let img = image::GrayImage::from_fn(SIDE as u32, SIDE as u32, |x, y| {
            image::Luma([if self.bits[y as usize * SIDE + x as usize] { 255 } else { 0 }])
        });
        img.save(path)?;
        Ok(())
    }
}

/// Side length of the centered square covering `p` percent of the area,
/// rounded half away from zero.
pub fn center_side(p: u32) -> usize {
    (SIDE as f64 * (f64::from(p) / 100.0).sqrt()).round() as usize
}

/// Centered square window covering `p` percent of the image area.
pub fn center_window(p: u32) -> Result<WindowMask, ImageError> {
    let window = Window::from_percent(p)?;
    let side = center_side(p);
    let start = (SIDE - side) / 2;
    let end = start + side;
    let mut bits = vec![false; N_PIXELS];
    for row in start..end {
        bits[row * SIDE + start..row * SIDE + end].fill(true);
    }
    Ok(WindowMask::from_bits(bits, window).expect("center window is nonempty"))
}

/// Parameters of the morphological Chan–Vese active contour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanVeseParams {
    pub iterations: usize,
    /// Curvature smoothing passes per iteration.
    pub smoothing: usize,
    pub lambda_inside: f64,
    pub lambda_outside: f64,
    /// Width in pixels of the initial background ring at the image boundary.
    pub border: usize,
}

impl Default for ChanVeseParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            smoothing: 1,
            lambda_inside: 1.0,
            lambda_outside: 1.0,
            border: 1,
        }
    }
}

/// Figure-ground segmentation strategy.
pub trait FigureSegmenter: Sync {
    /// Returns the figural region; never empty.
    fn segment(&self, img: &NormalizedImage) -> WindowMask;
}

impl FigureSegmenter for ChanVeseParams {
    fn segment(&self, img: &NormalizedImage) -> WindowMask {
        segment_figure(img, self)
    }
}

/// Morphological Chan–Vese evolution from a contour at the image boundary.
///
/// Falls back to the full frame when the image has no contrast or the
/// evolved region vanishes.
pub fn segment_figure(img: &NormalizedImage, params: &ChanVeseParams) -> WindowMask {
    let px = img.pixels();
    let first = px[0];
    if px.iter().all(|p| *p == first) {
        return WindowMask::full(Window::Segmented);
    }
    let border = params.border.clamp(1, SIDE / 2 - 1);
    let mut u = vec![false; N_PIXELS];
    for r in border..SIDE - border {
        u[r * SIDE + border..r * SIDE + SIDE - border].fill(true);
    }
    let mut scratch = Scratch::default();
    let mut phase = 0usize;
    let mut unchanged_streak = 0;
    for _ in 0..params.iterations {
        let before = u.clone();
        if !chan_vese_step(px, &mut u, params) {
            break;
        }
        for _ in 0..params.smoothing {
            if phase.is_multiple_of(2) {
                inf_sup(&u, &mut scratch.a);
                sup_inf(&scratch.a, &mut u);
            } else {
                sup_inf(&u, &mut scratch.a);
                inf_sup(&scratch.a, &mut u);
            }
            phase += 1;
        }
        if u == before {
            unchanged_streak += 1;
            // a fixed point of both smoothing phases stays fixed
            if unchanged_streak >= 2 {
                break;
            }
        } else {
            unchanged_streak = 0;
        }
    }
    WindowMask::from_bits(u, Window::Segmented).unwrap_or_else(|| WindowMask::full(Window::Segmented))
}

#[derive(Default)]
struct Scratch {
    a: Vec<bool>,
}

/// One data-term update. Returns false when a region is empty.
fn chan_vese_step(px: &[Lab], u: &mut [bool], params: &ChanVeseParams) -> bool {
    let mut sum_in = [0.0; 3];
    let mut sum_out = [0.0; 3];
    let mut n_in = 0usize;
    for (p, &inside) in px.iter().zip(u.iter()) {
        let acc = if inside { &mut sum_in } else { &mut sum_out };
        acc[0] += p.l;
        acc[1] += p.a;
        acc[2] += p.b;
        n_in += usize::from(inside);
    }
    let n_out = N_PIXELS - n_in;
    if n_in == 0 || n_out == 0 {
        return false;
    }
    let c_in = sum_in.map(|s| s / n_in as f64);
    let c_out = sum_out.map(|s| s / n_out as f64);
    let dist = |p: &Lab, c: &[f64; 3]| {
        (p.l - c[0]).powi(2) + (p.a - c[1]).powi(2) + (p.b - c[2]).powi(2)
    };
    let val = |r: usize, c: usize, u: &[bool]| -> f64 { f64::from(u8::from(u[r * SIDE + c])) };
    let mut updates: Vec<(usize, bool)> = Vec::new();
    for r in 0..SIDE {
        for c in 0..SIDE {
            // central differences, one-sided at the edges
            let gy = match r {
                0 => val(1, c, u) - val(0, c, u),
                r if r == SIDE - 1 => val(r, c, u) - val(r - 1, c, u),
                r => (val(r + 1, c, u) - val(r - 1, c, u)) / 2.0,
            };
            let gx = match c {
                0 => val(r, 1, u) - val(r, 0, u),
                c if c == SIDE - 1 => val(r, c, u) - val(r, c - 1, u),
                c => (val(r, c + 1, u) - val(r, c - 1, u)) / 2.0,
            };
            let grad = gx.abs() + gy.abs();
            if grad == 0.0 {
                continue;
            }
            let i = r * SIDE + c;
            let p = &px[i];
            let aux = grad
                * (params.lambda_inside * dist(p, &c_in) - params.lambda_outside * dist(p, &c_out));
            if aux < 0.0 {
                updates.push((i, true));
            } else if aux > 0.0 {
                updates.push((i, false));
            }
        }
    }
    for (i, v) in updates {
        u[i] = v;
    }
    true
}

// The four 3-pixel line segments through the center: horizontal, vertical
// and both diagonals, as (dr, dc) offsets of the two outer pixels.
const LINES: [[(isize, isize); 2]; 4] = [
    [(0, -1), (0, 1)],
    [(-1, 0), (1, 0)],
    [(-1, -1), (1, 1)],
    [(-1, 1), (1, -1)],
];

fn at(u: &[bool], r: usize, c: usize, d: (isize, isize)) -> bool {
    let rr = r as isize + d.0;
    let cc = c as isize + d.1;
    if rr < 0 || cc < 0 || rr >= SIDE as isize || cc >= SIDE as isize {
        return false;
    }
    u[rr as usize * SIDE + cc as usize]
}

/// Supremum over line segments of the erosion.
fn sup_inf(u: &[bool], out: &mut Vec<bool>) {
    out.clear();
    out.resize(N_PIXELS, false);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let i = r * SIDE + c;
            out[i] = u[i]
                && LINES
                    .iter()
                    .any(|l| at(u, r, c, l[0]) && at(u, r, c, l[1]));
        }
    }
}

/// Infimum over line segments of the dilation.
fn inf_sup(u: &[bool], out: &mut Vec<bool>) {
    out.clear();
    out.resize(N_PIXELS, false);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let i = r * SIDE + c;
            out[i] = u[i]
                || LINES
                    .iter()
                    .all(|l| at(u, r, c, l[0]) || at(u, r, c, l[1]));
        }
    }
}
