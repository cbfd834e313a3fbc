//! Feature catalog, per-feature evaluation and design-matrix assembly.
//!
//! Every feature is the fraction of pixels inside a spatial window that match
//! a target color: within a CIELAB ball, within a CIELch sector, or sharing
//! the target's basic color term. All tolerance tests are inclusive.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::categorization::{categorize_image, BasicColorTerm, CategoryModel};
use crate::color::{delta_e_76, hue_delta, Lab, Lch};
use crate::corpus::{CorpusManifest, ImageRecord};
use crate::datasets::{ColorEntry, ColorTable, RatingsTable};
use crate::image_pipeline::{
    center_window, normalize_image_file, FigureSegmenter, ImageError, NormalizedImage, Window,
    WindowMask, N_PIXELS,
};

/// Ball radii and sector chroma/lightness tolerances, in CIELAB units.
pub const RADII: [u32; 5] = [1, 10, 20, 30, 40];
/// Sector hue tolerances in degrees.
pub const HUE_TOLERANCES: [u32; 5] = [5, 10, 20, 30, 40];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature id {0:?}")]
    UnknownFeature(String),
    #[error("duplicate feature {0}")]
    DuplicateFeature(String),
    #[error("unknown catalog stage {0:?}")]
    UnknownStage(String),
    #[error("image {path}: {source}")]
    Image { path: String, source: ImageError },
    #[error("concept {0:?} has no ratings")]
    MissingRatings(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("design matrix line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Ball { dr: u32 },
    Sector { dr: u32, dh: u32 },
    Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub window: Window,
}

impl FeatureSpec {
    pub fn new(kind: FeatureKind, window: Window) -> Self {
        Self { kind, window }
    }

    fn is_valid(&self) -> bool {
        match self.kind {
            FeatureKind::Ball { dr } => RADII.contains(&dr),
            FeatureKind::Sector { dr, dh } => RADII.contains(&dr) && HUE_TOLERANCES.contains(&dh),
            FeatureKind::Category => true,
        }
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.window.id();
        match self.kind {
            FeatureKind::Ball { dr } => write!(f, "ball_dr{dr}_{w}"),
            FeatureKind::Sector { dr, dh } => write!(f, "sector_dr{dr}_dh{dh}_{w}"),
            FeatureKind::Category => write!(f, "cat_{w}"),
        }
    }
}

impl FromStr for FeatureSpec {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FeatureError::UnknownFeature(s.to_string());
        let parts: Vec<&str> = s.split('_').collect();
        let window = match *parts.last().ok_or_else(bad)? {
            "seg" => Window::Segmented,
            w => {
                let p = w.strip_prefix('w').and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                Window::from_percent(p).map_err(|_| bad())?
            }
        };
        let num = |part: &str, prefix: &str| -> Result<u32, FeatureError> {
            part.strip_prefix(prefix)
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let kind = match parts.as_slice() {
            ["ball", dr, _] => FeatureKind::Ball { dr: num(dr, "dr")? },
            ["sector", dr, dh, _] => FeatureKind::Sector {
                dr: num(dr, "dr")?,
                dh: num(dh, "dh")?,
            },
            ["cat", _] => FeatureKind::Category,
            _ => return Err(bad()),
        };
        let spec = FeatureSpec::new(kind, window);
        if spec.is_valid() {
            Ok(spec)
        } else {
            Err(bad())
        }
    }
}

impl Serialize for FeatureSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which feature families are available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogStage {
    BallOnly,
    BallSector,
    Full,
}

impl CatalogStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::BallOnly => "ball_only",
            Self::BallSector => "ball_sector",
            Self::Full => "full",
        }
    }
}

impl FromStr for CatalogStage {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ball_only" | "ball" => Ok(Self::BallOnly),
            "ball_sector" | "sector" => Ok(Self::BallSector),
            "full" => Ok(Self::Full),
            other => Err(FeatureError::UnknownStage(other.to_string())),
        }
    }
}

/// Ordered feature list; column `j` of a design matrix is `specs[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCatalog {
    specs: Vec<FeatureSpec>,
}

impl FeatureCatalog {
    pub fn from_specs(specs: Vec<FeatureSpec>) -> Result<Self, FeatureError> {
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].contains(s) {
                return Err(FeatureError::DuplicateFeature(s.to_string()));
            }
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.iter().map(ToString::to_string).collect()
    }

    pub fn position(&self, spec: &FeatureSpec) -> Option<usize> {
        self.specs.iter().position(|s| s == spec)
    }

    fn needs_segmentation(&self) -> bool {
        self.specs.iter().any(|s| s.window == Window::Segmented)
    }

    fn needs_categories(&self) -> bool {
        self.specs.iter().any(|s| s.kind == FeatureKind::Category)
    }

    /// The stage whose canonical catalog equals this one, if any.
    pub fn stage(&self) -> Option<CatalogStage> {
        [CatalogStage::BallOnly, CatalogStage::BallSector, CatalogStage::Full]
            .into_iter()
            .find(|&s| catalog(s).specs == self.specs)
    }
}

/// The canonical catalog for a stage: ball, then sector, then category
/// features, each ordered by tolerances and then window.
pub fn catalog(stage: CatalogStage) -> FeatureCatalog {
    let mut specs = Vec::new();
    for dr in RADII {
        for w in Window::ALL {
            specs.push(FeatureSpec::new(FeatureKind::Ball { dr }, w));
        }
    }
    if stage != CatalogStage::BallOnly {
        for dr in RADII {
            for dh in HUE_TOLERANCES {
                for w in Window::ALL {
                    specs.push(FeatureSpec::new(FeatureKind::Sector { dr, dh }, w));
                }
            }
        }
    }
    if stage == CatalogStage::Full {
        for w in Window::ALL {
            specs.push(FeatureSpec::new(FeatureKind::Category, w));
        }
    }
    FeatureCatalog { specs }
}

fn ball_hit(p: Lab, target: Lab, dr: f64) -> bool {
    delta_e_76(p, target) <= dr
}

fn sector_hit(p: Lch, target: Lch, dr: f64, dh: f64) -> bool {
    (p.l - target.l).abs() <= dr
        && (p.c - target.c).abs() <= dr
        && (target.is_achromatic() || hue_delta(p.h, target.h) <= dh)
}

fn fraction(hits: usize, mask: &WindowMask) -> f64 {
    hits as f64 / mask.count() as f64
}

/// Fraction of masked pixels within ΔE₇₆ ≤ `dr` of `target`.
pub fn eval_ball(img: &NormalizedImage, mask: &WindowMask, target: Lab, dr: f64) -> f64 {
    let px = img.pixels();
    let hits = mask.indices().filter(|&i| ball_hit(px[i], target, dr)).count();
    fraction(hits, mask)
}

/// Fraction of masked pixels inside the CIELch sector around `target`.
///
/// The hue condition is waived for achromatic targets.
pub fn eval_sector(img: &NormalizedImage, mask: &WindowMask, target: Lch, dr: f64, dh: f64) -> f64 {
    let px = img.lch();
    let hits = mask
        .indices()
        .filter(|&i| sector_hit(px[i], target, dr, dh))
        .count();
    fraction(hits, mask)
}

/// Fraction of masked pixels whose category is `term`.
pub fn eval_category(categories: &[BasicColorTerm], mask: &WindowMask, term: BasicColorTerm) -> f64 {
    let hits = mask.indices().filter(|&i| categories[i] == term).count();
    fraction(hits, mask)
}

/// A color from a table, prepared for feature evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetColor {
    pub index: usize,
    pub lab: Lab,
    pub lch: Lch,
    pub term: BasicColorTerm,
}

impl TargetColor {
    pub fn from_entry(entry: &ColorEntry, model: &CategoryModel) -> Self {
        Self {
            index: entry.index,
            lab: entry.lab,
            lch: entry.lch,
            term: model.categorize(entry.lab),
        }
    }

    pub fn from_table(table: &ColorTable, model: &CategoryModel) -> Vec<Self> {
        table
            .entries
            .iter()
            .map(|e| Self::from_entry(e, model))
            .collect()
    }
}

/// Per-image state: pixels, window masks and the category grid.
pub struct ImageContext {
    pub image: NormalizedImage,
    masks: Vec<WindowMask>,
    categories: Vec<BasicColorTerm>,
    // smallest centered window (0..=4) that contains each pixel
    center_level: Vec<u8>,
}

impl ImageContext {
    /// Builds the masks, running segmentation only if `catalog` needs it.
    pub fn new(
        image: NormalizedImage,
        catalog: &FeatureCatalog,
        model: &CategoryModel,
        segmenter: &dyn FigureSegmenter,
    ) -> Self {
        let mut masks: Vec<WindowMask> = [20, 40, 60, 80, 100]
            .iter()
            .map(|&p| center_window(p).expect("valid percentage"))
            .collect();
        masks.push(if catalog.needs_segmentation() {
            segmenter.segment(&image)
        } else {
            WindowMask::full(Window::Segmented)
        });
        let categories = if catalog.needs_categories() {
            categorize_image(model, &image)
        } else {
            Vec::new()
        };
        let center_level = (0..N_PIXELS)
            .map(|i| (0..5).find(|&k| masks[k].contains(i)).unwrap_or(4) as u8)
            .collect();
        Self {
            image,
            masks,
            categories,
            center_level,
        }
    }

    pub fn mask(&self, w: Window) -> &WindowMask {
        &self.masks[window_slot(w)]
    }

    pub fn categories(&self) -> &[BasicColorTerm] {
        &self.categories
    }

    /// Values of every feature in `catalog` for one target color.
    ///
    /// Pixels are binned once by the tightest tolerance they satisfy, and
    /// counts for every (tolerance, window) pair come from cumulative sums.
    pub fn evaluate(&self, catalog: &FeatureCatalog, target: &TargetColor) -> Vec<f64> {
        const NONE: usize = 5;
        // level 0..=4 are center windows by nesting depth; slot 5 is the figure
        let mut ball = [[0usize; 6]; 6];
        let mut sector = [[[0usize; 6]; 6]; 6];
        let mut cat = [0usize; 6];
        let seg = &self.masks[5];
        let want_cat = !self.categories.is_empty();
        let achromatic = target.lch.is_achromatic();
        let labs = self.image.pixels();
        let lchs = self.image.lch();
        for i in 0..N_PIXELS {
            let de = delta_e_76(labs[i], target.lab);
            let b_bin = RADII.iter().position(|&r| de <= f64::from(r)).unwrap_or(NONE);
            let p = lchs[i];
            let dl = (p.l - target.lch.l).abs();
            let dc = (p.c - target.lch.c).abs();
            let r_bin = RADII
                .iter()
                .position(|&r| dl <= f64::from(r) && dc <= f64::from(r))
                .unwrap_or(NONE);
            let h_bin = if achromatic {
                0
            } else {
                let dh = hue_delta(p.h, target.lch.h);
                HUE_TOLERANCES
                    .iter()
                    .position(|&t| dh <= f64::from(t))
                    .unwrap_or(NONE)
            };
            let is_cat = want_cat && self.categories[i] == target.term;
            let level = self.center_level[i] as usize;
            ball[level][b_bin] += 1;
            sector[level][r_bin][h_bin] += 1;
            cat[level] += usize::from(is_cat);
            if seg.contains(i) {
                ball[5][b_bin] += 1;
                sector[5][r_bin][h_bin] += 1;
                cat[5] += usize::from(is_cat);
            }
        }
        // accumulate nested center windows
        for level in 1..5 {
            for b in 0..6 {
                ball[level][b] += ball[level - 1][b];
                for h in 0..6 {
                    sector[level][b][h] += sector[level - 1][b][h];
                }
            }
            cat[level] += cat[level - 1];
        }
        catalog
            .specs()
            .iter()
            .map(|spec| {
                let slot = window_slot(spec.window);
                let hits = match spec.kind {
                    FeatureKind::Ball { dr } => {
                        let ri = RADII.iter().position(|&r| r == dr).expect("valid radius");
                        ball[slot][..=ri].iter().sum()
                    }
                    FeatureKind::Sector { dr, dh } => {
                        let ri = RADII.iter().position(|&r| r == dr).expect("valid radius");
                        let hi = HUE_TOLERANCES
                            .iter()
                            .position(|&t| t == dh)
                            .expect("valid hue tolerance");
                        sector[slot][..=ri]
                            .iter()
                            .map(|row| row[..=hi].iter().sum::<usize>())
                            .sum()
                    }
                    FeatureKind::Category => cat[slot],
                };
                fraction(hits, &self.masks[slot])
            })
            .collect()
    }
}

fn window_slot(w: Window) -> usize {
    Window::ALL.iter().position(|&x| x == w).expect("window in ALL")
}

/// Row label of a design matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub concept: String,
    pub rank: u32,
    pub color_index: usize,
}

/// Feature values with one row per (concept, image, color) triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub catalog: FeatureCatalog,
    pub rows: Vec<RowKey>,
    pub x: DMatrix<f64>,
    pub y: Option<Vec<f64>>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Concepts in row order, deduplicated.
    pub fn concepts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.concept) {
                out.push(r.concept.clone());
            }
        }
        out
    }

    /// Row indices belonging to `concept`.
    pub fn rows_for(&self, concept: &str) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| (r.concept == concept).then_some(i))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["concept".to_string(), "rank".into(), "color_index".into()];
        header.extend(self.catalog.ids());
        header.push("y".into());
        out.write_record(&header)?;
        for (i, key) in self.rows.iter().enumerate() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(key.concept.clone());
            rec.push(key.rank.to_string());
            rec.push(key.color_index.to_string());
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.push(self.y.as_ref().map_or(String::new(), |y| y[i].to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, FeatureError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, FeatureError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rdr.headers()?.clone();
        let n = header.len();
        if n < 4 || &header[0] != "concept" || &header[1] != "rank" || &header[2] != "color_index" || &header[n - 1] != "y" {
            return Err(FeatureError::Malformed {
                line: 1,
                reason: "expected header concept,rank,color_index,<features...>,y".into(),
            });
        }
        let specs = (3..n - 1)
            .map(|i| header[i].parse())
            .collect::<Result<Vec<FeatureSpec>, _>>()?;
        let catalog = FeatureCatalog::from_specs(specs)?;
        let p = catalog.len();
        let mut rows = Vec::new();
        let mut data = Vec::new();
        let mut ys: Vec<Option<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |reason: String| FeatureError::Malformed { line, reason };
            rows.push(RowKey {
                concept: rec[0].to_string(),
                rank: rec[1].parse().map_err(|_| bad(format!("bad rank {:?}", &rec[1])))?,
                color_index: rec[2]
                    .parse()
                    .map_err(|_| bad(format!("bad color index {:?}", &rec[2])))?,
            });
            for j in 0..p {
                let v: f64 = rec[3 + j]
                    .parse()
                    .map_err(|_| bad(format!("bad value {:?}", &rec[3 + j])))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("feature value {v} outside [0, 1]")));
                }
                data.push(v);
            }
            let y = &rec[n - 1];
            ys.push(if y.is_empty() {
                None
            } else {
                Some(y.parse().map_err(|_| bad(format!("bad y {y:?}")))?)
            });
        }
        let y = if ys.iter().all(Option::is_some) && !ys.is_empty() {
            Some(ys.into_iter().flatten().collect())
        } else if ys.iter().all(Option::is_none) {
            None
        } else {
            return Err(FeatureError::Malformed {
                line: 0,
                reason: "y column is partially filled".into(),
            });
        };
        let x = DMatrix::from_row_slice(rows.len(), p, &data);
        Ok(Self { catalog, rows, x, y })
    }

    /// Hex SHA-256 of the CSV serialization.
    pub fn digest(&self) -> Result<String, FeatureError> {
        Ok(hex::encode(Sha256::digest(self.to_csv_bytes()?)))
    }
}

/// Run `f` on a dedicated pool of `jobs` threads (0 means rayon's default).
pub(crate) fn with_pool<T: Send>(
    jobs: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

/// Records in canonical (concept, rank) order.
pub(crate) fn canonical_records(manifest: &CorpusManifest) -> Vec<&ImageRecord> {
    let mut recs: Vec<&ImageRecord> = manifest.records.iter().collect();
    recs.sort_by(|a, b| a.concept.cmp(&b.concept).then(a.rank.cmp(&b.rank)));
    recs
}

/// Load, normalize and prepare one corpus image.
pub(crate) fn load_context(
    manifest: &CorpusManifest,
    rec: &ImageRecord,
    catalog: &FeatureCatalog,
    model: &CategoryModel,
    segmenter: &dyn FigureSegmenter,
) -> Result<ImageContext, FeatureError> {
    let path = manifest.full_path(rec);
    let img = normalize_image_file(&path).map_err(|source| FeatureError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(ImageContext::new(img, catalog, model, segmenter))
}

/// Evaluate every catalog feature for every (image, color) pair.
///
/// Rows are ordered by (concept, rank, color index) regardless of manifest
/// order; `jobs` only changes how many images are processed at once.
pub fn build_design_matrix(
    manifest: &CorpusManifest,
    colors: &ColorTable,
    catalog: &FeatureCatalog,
    model: &CategoryModel,
    ratings: Option<&RatingsTable>,
    segmenter: &dyn FigureSegmenter,
    jobs: usize,
) -> Result<DesignMatrix, FeatureError> {
    let records = canonical_records(manifest);
    if let Some(r) = ratings {
        for c in manifest.concepts() {
            if r.concepts().position(&c).is_none() {
                return Err(FeatureError::MissingRatings(c));
            }
        }
    }
    let targets = TargetColor::from_table(colors, model);
    let per_image: Vec<Vec<Vec<f64>>> = with_pool(jobs, || {
        records
            .par_iter()
            .map(|rec| {
                let ctx = load_context(manifest, rec, catalog, model, segmenter)?;
                Ok(targets.iter().map(|t| ctx.evaluate(catalog, t)).collect())
            })
            .collect::<Result<Vec<_>, FeatureError>>()
    })??;

    let n = records.len() * targets.len();
    let p = catalog.len();
    let mut x = DMatrix::zeros(n, p);
    let mut rows = Vec::with_capacity(n);
    let mut y = ratings.map(|_| Vec::with_capacity(n));
    for (rec, values) in records.iter().zip(per_image) {
        for (t, v) in targets.iter().zip(values) {
            let i = rows.len();
            for (j, val) in v.into_iter().enumerate() {
                x[(i, j)] = val;
            }
            rows.push(RowKey {
                concept: rec.concept.clone(),
                rank: rec.rank,
                color_index: t.index,
            });
            if let (Some(y), Some(r)) = (y.as_mut(), ratings) {
                let rating = r
                    .get(&rec.concept, t.index)
                    .ok_or_else(|| FeatureError::MissingRatings(rec.concept.clone()))?;
                y.push(rating);
            }
        }
    }
    Ok(DesignMatrix {
        catalog: catalog.clone(),
        rows,
        x,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorization::default_model;
    use crate::image_pipeline::ChanVeseParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn catalog_sizes() {
        assert_eq!(catalog(CatalogStage::BallOnly).len(), 30);
        assert_eq!(catalog(CatalogStage::BallSector).len(), 180);
        assert_eq!(catalog(CatalogStage::Full).len(), 186);
        for s in [CatalogStage::BallOnly, CatalogStage::BallSector, CatalogStage::Full] {
            assert_eq!(catalog(s).stage(), Some(s));
            let specs = catalog(s).specs().to_vec();
            let mut sorted = specs.clone();
            sorted.sort();
            assert_eq!(specs, sorted, "canonical order");
            assert!(FeatureCatalog::from_specs(specs).is_ok());
        }
    }

    #[test]
    fn feature_ids_round_trip() {
        for spec in catalog(CatalogStage::Full).specs() {
            let id = spec.to_string();
            assert_eq!(id.parse::<FeatureSpec>().unwrap(), *spec);
        }
        assert_eq!(
            "sector_dr40_dh40_w20".parse::<FeatureSpec>().unwrap(),
            FeatureSpec::new(FeatureKind::Sector { dr: 40, dh: 40 }, Window::Center20)
        );
        assert_eq!(
            "ball_dr40_seg".parse::<FeatureSpec>().unwrap(),
            FeatureSpec::new(FeatureKind::Ball { dr: 40 }, Window::Segmented)
        );
        for bad in ["ball_dr15_w20", "cat_w50", "sector_dr10_w20", "hist_w20", ""] {
            assert!(bad.parse::<FeatureSpec>().is_err(), "{bad}");
        }
    }

    fn full() -> WindowMask {
        WindowMask::full(Window::Center100)
    }

    #[test]
    fn uniform_target_image_scores_one() {
        let target = Lab::new(60.0, 20.0, -30.0);
        let img = NormalizedImage::uniform(target);
        for dr in RADII {
            assert_eq!(eval_ball(&img, &full(), target, f64::from(dr)), 1.0);
            for dh in HUE_TOLERANCES {
                let v = eval_sector(&img, &full(), target.to_lch(), f64::from(dr), f64::from(dh));
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn half_and_half_ball() {
        let target = Lab::new(50.0, 0.0, 0.0);
        let mut px = vec![target; N_PIXELS];
        for p in px.iter_mut().skip(N_PIXELS / 2) {
            *p = Lab::new(50.0, 100.0, 0.0);
        }
        let img = NormalizedImage::from_lab(px).unwrap();
        assert_eq!(eval_ball(&img, &full(), target, 40.0), 0.5);
    }

    #[test]
    fn sector_hue_just_outside() {
        let target = Lch::new(50.0, 40.0, 100.0);
        let px = Lch::new(50.0, 40.0, 141.0).to_lab();
        let img = NormalizedImage::uniform(px);
        assert_eq!(eval_sector(&img, &full(), target, 40.0, 40.0), 0.0);
    }

    #[test]
    fn sector_achromatic_target_ignores_hue() {
        let target = Lch::new(50.0, 0.0, 0.0);
        let img = NormalizedImage::uniform(Lch::new(50.0, 4.0, 200.0).to_lab());
        assert_eq!(eval_sector(&img, &full(), target, 10.0, 5.0), 1.0);
    }

    #[test]
    fn category_fraction_sixty_percent() {
        let model = default_model();
        let blue = Lab::new(50.0, 28.891, -73.589);
        assert_eq!(model.categorize(blue), BasicColorTerm::Blue);
        let mut px = vec![Lab::new(100.0, 0.0, 0.0); N_PIXELS];
        for p in px.iter_mut().take(6000) {
            *p = blue;
        }
        let img = NormalizedImage::from_lab(px).unwrap();
        let cats = categorize_image(&model, &img);
        assert_eq!(cats.iter().filter(|&&c| c == BasicColorTerm::Blue).count(), 6000);
        assert_eq!(eval_category(&cats, &full(), BasicColorTerm::Blue), 0.6);
        assert_eq!(eval_category(&cats, &full(), BasicColorTerm::White), 0.4);
    }

    #[test]
    fn half_white_half_black_categories() {
        let model = default_model();
        let mut px = vec![Lab::new(100.0, 0.0, 0.0); N_PIXELS];
        for p in px.iter_mut().skip(5000) {
            *p = Lab::new(0.0, 0.0, 0.0);
        }
        let cats = categorize_image(&model, &NormalizedImage::from_lab(px).unwrap());
        assert_eq!(cats.iter().filter(|&&c| c == BasicColorTerm::White).count(), 5000);
        assert_eq!(cats.iter().filter(|&&c| c == BasicColorTerm::Black).count(), 5000);
    }

    fn random_image(rng: &mut ChaCha8Rng) -> NormalizedImage {
        let px = (0..N_PIXELS)
            .map(|_| {
                Lab::new(
                    rng.random_range(0.0..100.0),
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                )
            })
            .collect();
        NormalizedImage::from_lab(px).unwrap()
    }

    #[test]
    fn batch_evaluation_matches_single_features() {
        let model = default_model();
        let cat = catalog(CatalogStage::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ChanVeseParams {
            iterations: 20,
            ..Default::default()
        };
        let colors = crate::datasets::builtin_uw58();
        let targets = TargetColor::from_table(&colors, &model);
        for _ in 0..2 {
            let ctx = ImageContext::new(random_image(&mut rng), &cat, &model, &params);
            for t in targets.iter().step_by(7) {
                let batch = ctx.evaluate(&cat, t);
                for (spec, v) in cat.specs().iter().zip(&batch) {
                    let mask = ctx.mask(spec.window);
                    let single = match spec.kind {
                        FeatureKind::Ball { dr } => eval_ball(&ctx.image, mask, t.lab, f64::from(dr)),
                        FeatureKind::Sector { dr, dh } => {
                            eval_sector(&ctx.image, mask, t.lch, f64::from(dr), f64::from(dh))
                        }
                        FeatureKind::Category => eval_category(ctx.categories(), mask, t.term),
                    };
                    assert_eq!(single, *v, "{spec}");
                }
            }
        }
    }

    #[test]
    fn monotone_in_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng);
        let target = Lab::new(50.0, 30.0, 10.0);
        let mask = center_window(60).unwrap();
        let balls: Vec<f64> = RADII
            .iter()
            .map(|&r| eval_ball(&img, &mask, target, f64::from(r)))
            .collect();
        assert!(balls.windows(2).all(|w| w[0] <= w[1]));
        for dr in RADII {
            let sectors: Vec<f64> = HUE_TOLERANCES
                .iter()
                .map(|&h| eval_sector(&img, &mask, target.to_lch(), f64::from(dr), f64::from(h)))
                .collect();
            assert!(sectors.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn category_extrapolation_equal_for_same_term() {
        let model = default_model();
        let colors = crate::datasets::builtin_uw58();
        let targets = TargetColor::from_table(&colors, &model);
        let blues: Vec<_> = targets
            .iter()
            .filter(|t| t.term == BasicColorTerm::Blue)
            .collect();
        assert!(blues.len() >= 2);
        let cat = FeatureCatalog::from_specs(
            Window::ALL
                .iter()
                .map(|&w| FeatureSpec::new(FeatureKind::Category, w))
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = ImageContext::new(random_image(&mut rng), &cat, &model, &ChanVeseParams::default());
        assert_eq!(ctx.evaluate(&cat, blues[0]), ctx.evaluate(&cat, blues[1]));
    }

    #[test]
    fn design_matrix_csv_round_trip() {
        let cat = catalog(CatalogStage::BallOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = vec![
            RowKey { concept: "a".into(), rank: 1, color_index: 1 },
            RowKey { concept: "a".into(), rank: 1, color_index: 2 },
        ];
        let x = DMatrix::from_fn(2, cat.len(), |_, _| rng.random_range(0.0..=1.0));
        let m = DesignMatrix { catalog: cat, rows, x, y: Some(vec![0.25, 1.0 / 3.0]) };
        let bytes = m.to_csv_bytes().unwrap();
        let back = DesignMatrix::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let no_y = DesignMatrix { y: None, ..m };
        let back = DesignMatrix::read_csv(no_y.to_csv_bytes().unwrap().as_slice()).unwrap();
        assert_eq!(back, no_y);
    }
}
