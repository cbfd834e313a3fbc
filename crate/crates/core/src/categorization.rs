//! Basic color term categorization.
//!
//! A [`CategoryModel`] is a dense lookup table over a quantized CIELAB grid.
//! Models are compiled from an ordered list of CIELch box rules
//! (`Lmin,Lmax,cmin,cmax,hmin,hmax,term`, first match wins, all bounds
//! inclusive, `hmin > hmax` wraps through 0°) or loaded from a compiled
//! binary blob.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::color::{lab_to_lch, Lab, Lch};
use crate::image_pipeline::NormalizedImage;

/// Rules for the shipped default model.
pub const DEFAULT_RULES_CSV: &str = include_str!("../data/basic_terms_default.csv");
pub const DEFAULT_MODEL_VERSION: &str = "default-lch-rules-v1";

/// Lab grid spacing of the lookup table.
pub const DEFAULT_STEP: f64 = 5.0;
const AB_EXTENT: f64 = 130.0;

const BLOB_MAGIC: &[u8; 4] = b"CCMB";
const BLOB_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CategoryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown color term {0:?}")]
    UnknownTerm(String),
    #[error("line {line}: malformed rule: {reason}")]
    MalformedRule { line: u64, reason: String },
    #[error("no rule covers Lab cell ({l}, {a}, {b})")]
    MissingCell { l: f64, a: f64, b: f64 },
    #[error("no cell is assigned the term {0}")]
    MissingTerm(BasicColorTerm),
    #[error("invalid compiled model: {0}")]
    BadBlob(String),
}

/// The 11 English basic color terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasicColorTerm {
    Red,
    Green,
    Blue,
    Yellow,
    Black,
    White,
    Gray,
    Orange,
    Purple,
    Brown,
    Pink,
}

impl BasicColorTerm {
    pub const ALL: [BasicColorTerm; 11] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::Black,
        Self::White,
        Self::Gray,
        Self::Orange,
        Self::Purple,
        Self::Brown,
        Self::Pink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::Black => "black",
            Self::White => "white",
            Self::Gray => "gray",
            Self::Orange => "orange",
            Self::Purple => "purple",
            Self::Brown => "brown",
            Self::Pink => "pink",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for BasicColorTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BasicColorTerm {
    type Err = CategoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("grey") {
            return Ok(Self::Gray);
        }
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CategoryError::UnknownTerm(s.to_string()))
    }
}

/// One box in CIELch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryRule {
    pub l: (f64, f64),
    pub c: (f64, f64),
    pub h: (f64, f64),
    pub term: BasicColorTerm,
}

impl CategoryRule {
    pub fn matches(&self, lch: Lch) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let hue_ok = if self.h.0 <= self.h.1 {
            within(lch.h, self.h)
        } else {
            lch.h >= self.h.0 || lch.h <= self.h.1
        };
        within(lch.l, self.l) && within(lch.c, self.c) && hue_ok
    }
}

pub fn parse_rules<R: Read>(r: R) -> Result<Vec<CategoryRule>, CategoryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(r);
    let mut rules = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 7 {
            return Err(CategoryError::MalformedRule {
                line,
                reason: format!("expected 7 fields, found {}", rec.len()),
            });
        }
        let mut nums = [0.0; 6];
        for (i, n) in nums.iter_mut().enumerate() {
            *n = rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CategoryError::MalformedRule {
                    line,
                    reason: format!("bad number {:?}", &rec[i]),
                })?;
        }
        if nums[0] > nums[1] || nums[2] > nums[3] {
            return Err(CategoryError::MalformedRule {
                line,
                reason: "lower bound exceeds upper bound".into(),
            });
        }
        rules.push(CategoryRule {
            l: (nums[0], nums[1]),
            c: (nums[2], nums[3]),
            h: (nums[4], nums[5]),
            term: rec[6].parse()?,
        });
    }
    Ok(rules)
}

/// Dense lookup from quantized Lab cells to basic color terms.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryModel {
    step: f64,
    l_min: f64,
    ab_min: f64,
    l_cells: usize,
    ab_cells: usize,
    cells: Vec<u8>,
    pub source: String,
    pub version: String,
}

impl CategoryModel {
    /// Compile box rules onto the default quantization grid.
    pub fn compile(
        rules: &[CategoryRule],
        source: impl Into<String>,
        version: impl Into<String>,
    ) -> Result<Self, CategoryError> {
        let step = DEFAULT_STEP;
        let l_cells = (100.0 / step).round() as usize + 1;
        let ab_cells = (2.0 * AB_EXTENT / step).round() as usize + 1;
        let mut cells = Vec::with_capacity(l_cells * ab_cells * ab_cells);
        let mut used = [false; 11];
        for li in 0..l_cells {
            for ai in 0..ab_cells {
                for bi in 0..ab_cells {
                    let lab = Lab::new(
                        li as f64 * step,
                        -AB_EXTENT + ai as f64 * step,
                        -AB_EXTENT + bi as f64 * step,
                    );
                    let lch = lab_to_lch(lab);
                    let term = rules
                        .iter()
                        .find(|r| r.matches(lch))
                        .map(|r| r.term)
                        .ok_or(CategoryError::MissingCell {
                            l: lab.l,
                            a: lab.a,
                            b: lab.b,
                        })?;
                    used[term.code() as usize] = true;
                    cells.push(term.code());
                }
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(CategoryError::MissingTerm(BasicColorTerm::ALL[i]));
        }
        Ok(Self {
            step,
            l_min: 0.0,
            ab_min: -AB_EXTENT,
            l_cells,
            ab_cells,
            cells,
            source: source.into(),
            version: version.into(),
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    fn axis_index(v: f64, min: f64, step: f64, n: usize) -> usize {
        let i = ((v - min) / step).round();
        // NaN casts to 0
        (i.max(0.0) as usize).min(n - 1)
    }

    /// Nearest-cell lookup; coordinates outside the grid clamp to the edge.
    pub fn categorize(&self, c: Lab) -> BasicColorTerm {
        let li = Self::axis_index(c.l, self.l_min, self.step, self.l_cells);
        let ai = Self::axis_index(c.a, self.ab_min, self.step, self.ab_cells);
        let bi = Self::axis_index(c.b, self.ab_min, self.step, self.ab_cells);
        let code = self.cells[(li * self.ab_cells + ai) * self.ab_cells + bi];
        BasicColorTerm::from_code(code).expect("cells hold valid codes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.cells.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_FORMAT.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.l_min.to_le_bytes());
        out.extend_from_slice(&self.ab_min.to_le_bytes());
        out.extend_from_slice(&(self.l_cells as u32).to_le_bytes());
        out.extend_from_slice(&(self.ab_cells as u32).to_le_bytes());
        for s in [&self.version, &self.source] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CategoryError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != BLOB_MAGIC {
            return Err(CategoryError::BadBlob("bad magic".into()));
        }
        let format = cur.u32()?;
        if format != BLOB_FORMAT {
            return Err(CategoryError::BadBlob(format!("unsupported format {format}")));
        }
        let step = cur.f64()?;
        let l_min = cur.f64()?;
        let ab_min = cur.f64()?;
        let l_cells = cur.u32()? as usize;
        let ab_cells = cur.u32()? as usize;
        let version = cur.string()?;
        let source = cur.string()?;
        let cells = cur.take(l_cells * ab_cells * ab_cells)?.to_vec();
        if cur.pos != bytes.len() {
            return Err(CategoryError::BadBlob("trailing bytes".into()));
        }
        if step.is_nan() || step <= 0.0 || l_cells == 0 || ab_cells == 0 {
            return Err(CategoryError::BadBlob("degenerate grid".into()));
        }
        if let Some(&bad) = cells.iter().find(|&&c| BasicColorTerm::from_code(c).is_none()) {
            return Err(CategoryError::BadBlob(format!("invalid term code {bad}")));
        }
        Ok(Self {
            step,
            l_min,
            ab_min,
            l_cells,
            ab_cells,
            cells,
            source,
            version,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CategoryError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CategoryError::BadBlob("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CategoryError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CategoryError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CategoryError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CategoryError::BadBlob("invalid utf-8".into()))
    }
}

/// The shipped rule-based model.
pub fn default_model() -> CategoryModel {
    use std::sync::OnceLock;
    static MODEL: OnceLock<CategoryModel> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let rules = parse_rules(DEFAULT_RULES_CSV.as_bytes()).expect("default rules parse");
            CategoryModel::compile(&rules, "builtin", DEFAULT_MODEL_VERSION)
                .expect("default rules are total")
        })
        .clone()
}

/// Load either a rule CSV or a compiled blob.
pub fn load_category_model(path: &Path) -> Result<CategoryModel, CategoryError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BLOB_MAGIC) {
        return CategoryModel::from_bytes(&bytes);
    }
    let rules = parse_rules(bytes.as_slice())?;
    let digest = Sha256::digest(&bytes);
    let version = format!("sha256:{}", &hex::encode(digest)[..16]);
    CategoryModel::compile(&rules, path.display().to_string(), version)
}

/// Per-pixel categories of a normalized image, row-major.
pub fn categorize_image(model: &CategoryModel, img: &NormalizedImage) -> Vec<BasicColorTerm> {
    img.pixels().iter().map(|&p| model.categorize(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::builtin_uw58;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prototype_colors() {
        let m = default_model();
        assert_eq!(m.categorize(Lab::new(100.0, 0.0, 0.0)), BasicColorTerm::White);
        assert_eq!(m.categorize(Lab::new(0.0, 0.0, 0.0)), BasicColorTerm::Black);
        assert_eq!(m.categorize(Lab::new(50.0, 0.0, 0.0)), BasicColorTerm::Gray);
    }

    #[test]
    fn srgb_prototypes() {
        use crate::color::{srgb_to_lab, Rgb8};
        let m = default_model();
        let cases = [
            ((255, 0, 0), BasicColorTerm::Red),
            ((0, 160, 0), BasicColorTerm::Green),
            ((0, 0, 255), BasicColorTerm::Blue),
            ((255, 255, 0), BasicColorTerm::Yellow),
            ((255, 150, 0), BasicColorTerm::Orange),
            ((128, 0, 128), BasicColorTerm::Purple),
            ((120, 70, 20), BasicColorTerm::Brown),
            ((255, 192, 203), BasicColorTerm::Pink),
        ];
        for ((r, g, b), want) in cases {
            assert_eq!(m.categorize(srgb_to_lab(Rgb8::new(r, g, b))), want, "{r},{g},{b}");
        }
    }

    #[test]
    fn uw58_achromatic_stratified_by_lightness() {
        let m = default_model();
        for e in builtin_uw58().entries.iter().filter(|e| e.lch.c == 0.0) {
            let want = match e.lab.l as i32 {
                0 => BasicColorTerm::Black,
                100 => BasicColorTerm::White,
                _ => BasicColorTerm::Gray,
            };
            assert_eq!(m.categorize(e.lab), want, "UW-58 #{}", e.index);
        }
    }

    #[test]
    fn total_and_clamped() {
        let m = default_model();
        for lab in [
            Lab::new(-50.0, 500.0, -500.0),
            Lab::new(150.0, 0.0, 0.0),
            Lab::new(f64::NAN, 0.0, 0.0),
        ] {
            let _ = m.categorize(lab);
        }
        assert_eq!(m.categorize(Lab::new(130.0, 0.0, 0.0)), BasicColorTerm::White);
    }

    #[test]
    fn piecewise_constant_within_cell() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let center = Lab::new(
                rng.random_range(0..=20) as f64 * 5.0,
                rng.random_range(-26..=26) as f64 * 5.0,
                rng.random_range(-26..=26) as f64 * 5.0,
            );
            let jitter = Lab::new(
                center.l + rng.random_range(-2.49..2.49),
                center.a + rng.random_range(-2.49..2.49),
                center.b + rng.random_range(-2.49..2.49),
            );
            assert_eq!(m.categorize(center), m.categorize(jitter));
        }
    }

    #[test]
    fn blob_round_trip_matches() {
        let m = default_model();
        let back = CategoryModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(CategoryModel::from_bytes(&m.to_bytes()[..40]).is_err());
        let mut bad = m.to_bytes();
        bad[0] = b'X';
        assert!(CategoryModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn reloaded_rules_categorize_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.csv");
        std::fs::write(&path, DEFAULT_RULES_CSV).unwrap();
        let loaded = load_category_model(&path).unwrap();
        assert!(loaded.version.starts_with("sha256:"));
        let blob = dir.path().join("model.bin");
        std::fs::write(&blob, loaded.to_bytes()).unwrap();
        let from_blob = load_category_model(&blob).unwrap();
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let lab = Lab::new(
                rng.random_range(0.0..100.0),
                rng.random_range(-128.0..128.0),
                rng.random_range(-128.0..128.0),
            );
            assert_eq!(loaded.categorize(lab), m.categorize(lab));
            assert_eq!(from_blob.categorize(lab), m.categorize(lab));
        }
    }

    #[test]
    fn rule_file_errors() {
        let missing_term: String = DEFAULT_RULES_CSV
            .lines()
            .filter(|l| !l.ends_with(",pink"))
            .map(|l| format!("{l}\n"))
            .collect();
        let rules = parse_rules(missing_term.as_bytes()).unwrap();
        assert!(matches!(
            CategoryModel::compile(&rules, "t", "t"),
            Err(CategoryError::MissingCell { .. })
        ));

        // covers everything but never uses pink
        let no_pink = DEFAULT_RULES_CSV.replace(",pink", ",red");
        let rules = parse_rules(no_pink.as_bytes()).unwrap();
        assert!(matches!(
            CategoryModel::compile(&rules, "t", "t"),
            Err(CategoryError::MissingTerm(BasicColorTerm::Pink))
        ));

        let unknown = "Lmin,Lmax,cmin,cmax,hmin,hmax,term\n0,100,0,1000,0,360,teal\n";
        assert!(matches!(
            parse_rules(unknown.as_bytes()),
            Err(CategoryError::UnknownTerm(_))
        ));
        let short = "Lmin,Lmax,cmin,cmax,hmin,hmax,term\n0,100,0,1000,0,360\n";
        assert!(matches!(
            parse_rules(short.as_bytes()),
            Err(CategoryError::MalformedRule { .. })
        ));
    }

    #[test]
    fn term_parsing() {
        assert_eq!("Grey".parse::<BasicColorTerm>().unwrap(), BasicColorTerm::Gray);
        for t in BasicColorTerm::ALL {
            assert_eq!(t.name().parse::<BasicColorTerm>().unwrap(), t);
        }
    }
}
