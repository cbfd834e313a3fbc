//! Built-in color tables and concept × color rating tables.

mod tables;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{lab_to_lch, xyy_to_lab, ColorError, Lab, Lch, WhitePoint, XyY};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error("line {line}: malformed cell {value:?} in column {column:?}")]
    MalformedCell {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: value {value} for {column:?} is outside [0, 1]")]
    OutOfRange { line: u64, column: String, value: f64 },
    #[error("line {line}: expected {expected} cells, found {found}")]
    MissingCell {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("header has no concept columns")]
    MissingColumn,
    #[error("duplicate concept {0:?}")]
    DuplicateConcept(String),
    #[error("concept list is empty")]
    EmptyConcepts,
    #[error("color index {0} is not in 1..={1}")]
    BadColorIndex(usize, usize),
    #[error("color index {0} appears more than once")]
    DuplicateColor(usize),
    #[error("table has {found} color rows but the color table has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown color table {0:?}")]
    UnknownTable(String),
    #[error("color table {0}: {1}")]
    Inconsistent(String, String),
}

/// One row of a color table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorEntry {
    /// 1-based position in the table.
    pub index: usize,
    pub label: String,
    pub xyy: XyY,
    pub lab: Lab,
    pub lch: Lch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorTable {
    pub name: String,
    pub white_point: WhitePoint,
    pub entries: Vec<ColorEntry>,
}

/// Largest per-channel disagreement between the stored coordinates and the
/// ones recomputed from xyY.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsistencyReport {
    pub max_lab: f64,
    pub max_chroma: f64,
    pub max_hue: f64,
}

impl ColorTable {
    fn from_rows(name: &str, white_point: WhitePoint, rows: &[tables::Row]) -> Self {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, (label, v))| ColorEntry {
                index: i + 1,
                label: (*label).to_string(),
                xyy: XyY::new(v[0], v[1], v[2]),
                lab: Lab::new(v[3], v[4], v[5]),
                lch: Lch::new(v[3], v[6], v[7]),
            })
            .collect();
        Self {
            name: name.to_string(),
            white_point,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> Option<&ColorEntry> {
        index
            .checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .filter(|e| e.index == index)
    }

    /// Recompute Lab and Lch from xyY under the table's white point.
    pub fn consistency(&self) -> Result<ConsistencyReport, ColorError> {
        let mut report = ConsistencyReport::default();
        for e in &self.entries {
            let lab = xyy_to_lab(e.xyy, self.white_point)?;
            let lch = lab_to_lch(lab);
            report.max_lab = report
                .max_lab
                .max((lab.l - e.lab.l).abs())
                .max((lab.a - e.lab.a).abs())
                .max((lab.b - e.lab.b).abs());
            report.max_chroma = report.max_chroma.max((lch.c - e.lch.c).abs());
            report.max_hue = report
                .max_hue
                .max(crate::color::hue_delta(lch.h, e.lch.h));
        }
        Ok(report)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.entries.is_empty() {
            return Err(DatasetError::Inconsistent(
                self.name.clone(),
                "no entries".into(),
            ));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.index != i + 1 {
                return Err(DatasetError::Inconsistent(
                    self.name.clone(),
                    format!("index {} at position {}", e.index, i + 1),
                ));
            }
        }
        Ok(())
    }

    /// CSV with columns `index,label,x,y,Y,L,a,b,c,h`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "label", "x", "y", "Y", "L", "a", "b", "c", "h"])?;
        for e in &self.entries {
            out.write_record([
                e.index.to_string(),
                e.label.clone(),
                e.xyy.x.to_string(),
                e.xyy.y.to_string(),
                e.xyy.big_y.to_string(),
                e.lab.l.to_string(),
                e.lab.a.to_string(),
                e.lab.b.to_string(),
                e.lch.c.to_string(),
                e.lch.h.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`ColorTable::write_csv`].
    pub fn read_csv<R: Read>(
        name: &str,
        white_point: WhitePoint,
        r: R,
    ) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(r);
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 10 {
                return Err(DatasetError::MissingCell {
                    line,
                    expected: 10,
                    found: rec.len(),
                });
            }
            let num = |i: usize, col: &str| -> Result<f64, DatasetError> {
                parse_cell(&rec[i], line, col)
            };
            let index: usize = rec[0].parse().map_err(|_| DatasetError::MalformedCell {
                line,
                column: "index".into(),
                value: rec[0].to_string(),
            })?;
            entries.push(ColorEntry {
                index,
                label: rec[1].to_string(),
                xyy: XyY::new(num(2, "x")?, num(3, "y")?, num(4, "Y")?),
                lab: Lab::new(num(5, "L")?, num(6, "a")?, num(7, "b")?),
                lch: Lch::new(num(5, "L")?, num(8, "c")?, num(9, "h")?),
            });
        }
        let table = Self {
            name: name.to_string(),
            white_point,
            entries,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn from_csv_path(
        name: &str,
        white_point: WhitePoint,
        path: &Path,
    ) -> Result<Self, DatasetError> {
        Self::read_csv(name, white_point, std::fs::File::open(path)?)
    }
}

/// The University of Wisconsin 58 colors, a ΔE = 25 grid in CIELAB.
pub fn builtin_uw58() -> ColorTable {
    ColorTable::from_rows("uw58", WhitePoint::D65, &tables::UW58)
}

/// Display white used for the Berkeley Color Project table.
#[allow(clippy::approx_constant)]
pub const BCP37_WHITE: WhitePoint = WhitePoint::new(0.312, 0.318, 116.0);

/// The Berkeley Color Project 37 colors.
pub fn builtin_bcp37() -> ColorTable {
    ColorTable::from_rows(
        "bcp37",
        BCP37_WHITE,
        &tables::BCP37,
    )
}

pub fn builtin_table(name: &str) -> Result<ColorTable, DatasetError> {
    match name.to_ascii_lowercase().as_str() {
        "uw58" | "uw-58" => Ok(builtin_uw58()),
        "bcp37" | "bcp-37" => Ok(builtin_bcp37()),
        other => Err(DatasetError::UnknownTable(other.to_string())),
    }
}

/// Ordered, unique concept names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    names: Vec<String>,
}

impl ConceptSet {
    pub fn new<I, S>(names: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DatasetError::EmptyConcepts);
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].iter().any(|m| m.eq_ignore_ascii_case(n)) {
                return Err(DatasetError::DuplicateConcept(n.clone()));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Case-insensitive position of a concept.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

/// Concept × color matrix of reals, keyed by 1-based color index.
///
/// Serialized as CSV with a header `color,<concept...>` and one row per color.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptColorMatrix {
    pub concepts: ConceptSet,
    /// `values[concept][color - 1]`
    pub values: Vec<Vec<f64>>,
}

impl ConceptColorMatrix {
    pub fn new(concepts: ConceptSet, values: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(concepts.len(), values.len());
        Self { concepts, values }
    }

    pub fn n_colors(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Value for a concept (case-insensitive) and 1-based color index.
    pub fn get(&self, concept: &str, color: usize) -> Option<f64> {
        let c = self.concepts.position(concept)?;
        self.values[c].get(color.checked_sub(1)?).copied()
    }

    pub fn row(&self, concept: &str) -> Option<&[f64]> {
        self.concepts.position(concept).map(|c| self.values[c].as_slice())
    }

    pub fn read_csv<R: Read>(r: R, expected_colors: Option<usize>) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(DatasetError::MissingColumn);
        }
        let concept_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if concept_names.iter().any(String::is_empty) {
            return Err(DatasetError::MissingColumn);
        }
        let concepts = ConceptSet::new(concept_names)?;
        let mut rows: Vec<(usize, Vec<f64>, u64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(DatasetError::MissingCell {
                    line,
                    expected: header.len(),
                    found: rec.len(),
                });
            }
            let index: usize = rec[0].parse().map_err(|_| DatasetError::MalformedCell {
                line,
                column: header[0].to_string(),
                value: rec[0].to_string(),
            })?;
            let vals = rec
                .iter()
                .skip(1)
                .zip(concepts.names())
                .map(|(cell, col)| parse_cell(cell, line, col))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((index, vals, line));
        }
        let n = rows.len();
        if let Some(expected) = expected_colors {
            if n != expected {
                return Err(DatasetError::DimensionMismatch { expected, found: n });
            }
        }
        let mut values = vec![vec![f64::NAN; n]; concepts.len()];
        let mut seen = vec![false; n];
        for (index, vals, _) in rows {
            if index == 0 || index > n {
                return Err(DatasetError::BadColorIndex(index, n));
            }
            if std::mem::replace(&mut seen[index - 1], true) {
                return Err(DatasetError::DuplicateColor(index));
            }
            for (c, v) in vals.into_iter().enumerate() {
                values[c][index - 1] = v;
            }
        }
        Ok(Self { concepts, values })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["color".to_string()];
        header.extend(self.concepts.names().iter().cloned());
        out.write_record(&header)?;
        for color in 0..self.n_colors() {
            let mut rec = vec![(color + 1).to_string()];
            rec.extend(self.values.iter().map(|row| row[color].to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<f64, DatasetError> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DatasetError::MalformedCell {
            line,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Mean human association ratings, every cell in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsTable {
    pub color_table: String,
    pub matrix: ConceptColorMatrix,
}

impl RatingsTable {
    pub fn concepts(&self) -> &ConceptSet {
        &self.matrix.concepts
    }

    pub fn get(&self, concept: &str, color: usize) -> Option<f64> {
        self.matrix.get(concept, color)
    }

    pub fn read_csv<R: Read>(r: R, colors: &ColorTable) -> Result<Self, DatasetError> {
        let matrix = ConceptColorMatrix::read_csv(r, Some(colors.len()))?;
        for (c, row) in matrix.values.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DatasetError::OutOfRange {
                        // header is line 1
                        line: i as u64 + 2,
                        column: matrix.concepts.names()[c].clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            color_table: colors.name.clone(),
            matrix,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        self.matrix.write_csv(w)
    }
}

pub fn load_ratings(path: &Path, colors: &ColorTable) -> Result<RatingsTable, DatasetError> {
    RatingsTable::read_csv(std::fs::File::open(path)?, colors)
}

/// Raw CSV of the 12 fruit × UW-58 mean ratings.
pub const FRUIT_RATINGS_CSV: &str = include_str!("../../data/fruit_ratings_uw58.csv");

/// Mean ratings for the 12 fruit concepts over the UW-58 colors.
pub fn builtin_fruit_ratings() -> RatingsTable {
    RatingsTable::read_csv(FRUIT_RATINGS_CSV.as_bytes(), &builtin_uw58())
        .expect("embedded ratings table is valid")
}
