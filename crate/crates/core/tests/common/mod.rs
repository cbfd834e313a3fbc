#![allow(dead_code)]

use std::fs;
use std::path::Path;

use colorsem_core::color::{delta_e_76, lab_to_srgb};
use colorsem_core::datasets::{builtin_fruit_ratings, ColorTable};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: u32 = 100;

/// Split `total` pixels across colors in proportion to `weights`, by
/// largest remainder.
pub fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// A 100×100 image whose pixels are the table colors in proportion to
/// `weights`, scattered at random positions.
pub fn mixture_image(colors: &ColorTable, weights: &[f64], rng: &mut ChaCha8Rng) -> RgbImage {
    let counts = allocate(weights, (SIDE * SIDE) as usize);
    let mut pixels: Vec<Rgb<u8>> = Vec::with_capacity((SIDE * SIDE) as usize);
    for (entry, &n) in colors.entries.iter().zip(&counts) {
        let c = lab_to_srgb(entry.lab);
        pixels.extend(std::iter::repeat_n(Rgb([c.r, c.g, c.b]), n));
    }
    pixels.shuffle(rng);
    RgbImage::from_fn(SIDE, SIDE, |x, y| pixels[(y * SIDE + x) as usize])
}

/// The planted mixture fills a disk of random radius and position near the
/// center; the rest is one background color.
pub fn figure_image(colors: &ColorTable, weights: &[f64], rng: &mut ChaCha8Rng) -> RgbImage {
    let radius: f64 = rng.random_range(22.0..38.0);
    let cx: f64 = 50.0 + rng.random_range(-6.0..6.0);
    let cy: f64 = 50.0 + rng.random_range(-6.0..6.0);
    let inside = |x: u32, y: u32| {
        (f64::from(x) + 0.5 - cx).hypot(f64::from(y) + 0.5 - cy) <= radius
    };
    let n_inside = (0..SIDE * SIDE).filter(|i| inside(i % SIDE, i / SIDE)).count();
    let counts = allocate(weights, n_inside);
    let mut figure: Vec<Rgb<u8>> = Vec::with_capacity(n_inside);
    for (entry, &n) in colors.entries.iter().zip(&counts) {
        let c = lab_to_srgb(entry.lab);
        figure.extend(std::iter::repeat_n(Rgb([c.r, c.g, c.b]), n));
    }
    figure.shuffle(rng);
    let backgrounds = [[255, 255, 255], [235, 235, 235], [200, 200, 200], [40, 40, 40]];
    let bg = Rgb(backgrounds[rng.random_range(0..backgrounds.len())]);
    let mut next = figure.into_iter();
    RgbImage::from_fn(SIDE, SIDE, |x, y| {
        if inside(x, y) {
            next.next().expect("one pixel per figure cell")
        } else {
            bg
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// The mixture covers the whole frame.
    Scatter,
    /// The mixture forms a central figure on a plain background.
    Figure,
}

/// Write `<root>/<concept>/img_NN.png` for every planted ratings row.
pub fn write_planted_corpus(
    root: &Path,
    colors: &ColorTable,
    planted: &[(String, Vec<f64>)],
    images_per_concept: usize,
    layout: Layout,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (concept, weights) in planted {
        let dir = root.join(concept);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..images_per_concept {
            let img = match layout {
                Layout::Scatter => mixture_image(colors, weights, &mut rng),
                Layout::Figure => figure_image(colors, weights, &mut rng),
            };
            img.save(dir.join(format!("img_{i:02}.png"))).unwrap();
        }
    }
}

/// Ratings rows that fall off smoothly with CIELAB distance from one to
/// `max_protos` prototype colors per concept, with a falloff width drawn
/// from `sigma`.
pub fn smooth_rows(
    colors: &ColorTable,
    n: usize,
    max_protos: usize,
    sigma: std::ops::Range<f64>,
    seed: u64,
) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|c| {
            let protos: Vec<usize> = (0..rng.random_range(1..=max_protos))
                .map(|_| rng.random_range(0..colors.len()))
                .collect();
            let sigma: f64 = rng.random_range(sigma.clone());
            let row = colors
                .entries
                .iter()
                .map(|e| {
                    protos
                        .iter()
                        .map(|&p| {
                            let d = delta_e_76(e.lab, colors.entries[p].lab);
                            (-d * d / (2.0 * sigma * sigma)).exp()
                        })
                        .fold(0.0, f64::max)
                })
                .collect();
            (format!("concept{c}"), row)
        })
        .collect()
}

/// Rescale rows to the smallest row total. A pixel mixture only encodes a
/// row up to scale, so equal totals make the planted table recoverable.
pub fn equal_totals(rows: &mut [(String, Vec<f64>)]) {
    let total = rows
        .iter()
        .map(|(_, r)| r.iter().sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    for (_, r) in rows.iter_mut() {
        let s: f64 = r.iter().sum();
        for v in r.iter_mut() {
            *v *= total / s;
        }
    }
}

/// The shipped fruit ratings rows, first `n` fruits.
pub fn fruit_rows(n: usize) -> Vec<(String, Vec<f64>)> {
    let r = builtin_fruit_ratings();
    r.matrix
        .concepts
        .names()
        .iter()
        .zip(&r.matrix.values)
        .take(n)
        .map(|(c, v)| (c.clone(), v.clone()))
        .collect()
}

/// Ratings CSV (`color,<concepts>`) for planted rows.
pub fn write_ratings_csv(path: &Path, planted: &[(String, Vec<f64>)]) {
    let mut text = String::from("color");
    for (c, _) in planted {
        text.push(',');
        text.push_str(c);
    }
    text.push('\n');
    for i in 0..planted[0].1.len() {
        text.push_str(&(i + 1).to_string());
        for (_, v) in planted {
            text.push(',');
            text.push_str(&v[i].to_string());
        }
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}
