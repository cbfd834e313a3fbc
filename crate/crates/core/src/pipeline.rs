//! End-to-end stages over plain files: configuration, inputs and the fixed
//! output layout shared by the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;

use crate::categorization::{default_model, load_category_model, CategoryModel};
use crate::color::WhitePoint;
use crate::corpus::{scan_corpus, CorpusManifest, Provenance};
use crate::datasets::{
    builtin_fruit_ratings, builtin_table, ColorTable, ConceptColorMatrix, RatingsTable,
};
use crate::evaluation::{
    evaluate_model, write_scatter_csv, write_stage_comparison, EvaluationReport, StageResult,
};
use crate::features::{build_design_matrix, catalog, CatalogStage, DesignMatrix, FeatureCatalog};
use crate::image_pipeline::ChanVeseParams;
use crate::modeling::{self, LassoOptions, ModelSpec, TrainMetadata};

pub const DESIGN_MATRIX_FILE: &str = "design_matrix.csv";
pub const DIGEST_FILE: &str = "design_matrix.sha256";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CV_CURVE_FILE: &str = "cv_curve.csv";
pub const MODEL_FILE: &str = "model.json";
pub const LOO_ESTIMATES_FILE: &str = "loo_estimates.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const COMPARISON_FILE: &str = "stage_comparison.csv";

/// Name accepted wherever a ratings path is expected for the shipped fruit
/// ratings.
pub const BUILTIN_RATINGS: &str = "fruit";

/// Settings shared by every stage. Built from defaults, then a flat
/// `key = value` file, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Corpus directory, or a previously written manifest JSON.
    pub corpus: Option<PathBuf>,
    /// Restrict to these concepts; all when empty.
    pub concepts: Vec<String>,
    /// `uw58`, `bcp37`, or a color table CSV.
    pub colors: String,
    /// White point for a color table file.
    pub white: WhitePoint,
    pub stage: CatalogStage,
    pub max_images: usize,
    pub k: usize,
    pub lasso: LassoOptions,
    pub seg_iterations: usize,
    pub category_model: Option<PathBuf>,
    /// Ratings CSV, or `fruit` for the shipped table.
    pub ratings: Option<String>,
    pub provenance: Provenance,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Reserved. Every stage is deterministic.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            concepts: Vec::new(),
            colors: "uw58".into(),
            white: WhitePoint::D65,
            stage: CatalogStage::Full,
            max_images: 50,
            k: 4,
            lasso: LassoOptions::default(),
            seg_iterations: ChanVeseParams::default().iterations,
            category_model: None,
            ratings: None,
            provenance: Provenance::default(),
            output: PathBuf::from("out"),
            jobs: 0,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("invalid value {value:?} for {key}"))
}

/// Parse a whitespace- or comma-separated triple.
pub fn parse_triple(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect();
    ensure!(parts.len() == 3, "expected three numbers, got {s:?}");
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = parse::<f64>("triple", p)?;
        ensure!(o.is_finite(), "non-finite number in {s:?}");
    }
    Ok(out)
}

/// Parse a flat `key = value` file. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("config line {}: expected key = value", n + 1))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.replace('-', "_").as_str() {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "concepts" => {
                self.concepts = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "colors" => self.colors = value.to_string(),
            "white" => {
                let [x, y, big_y] = parse_triple(value)?;
                self.white = WhitePoint::new(x, y, big_y);
            }
            "stage" => self.stage = parse(key, value)?,
            "max_images" => self.max_images = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "n_lambdas" => self.lasso.n_lambdas = parse(key, value)?,
            "min_ratio" => self.lasso.min_ratio = parse(key, value)?,
            "tolerance" => self.lasso.tolerance = parse(key, value)?,
            "max_iterations" => self.lasso.max_iterations = parse(key, value)?,
            "seg_iterations" => self.seg_iterations = parse(key, value)?,
            "category_model" => self.category_model = Some(PathBuf::from(value)),
            "ratings" => self.ratings = Some(value.to_string()),
            "provenance" => self.provenance = value.parse().map_err(anyhow::Error::msg)?,
            "output" => self.output = PathBuf::from(value),
            "jobs" => self.jobs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in parse_config_text(&text)? {
            self.set(&k, &v)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, "k must be at least 1");
        ensure!(self.max_images >= 1, "max_images must be at least 1");
        ensure!(self.lasso.n_lambdas >= 1, "n_lambdas must be at least 1");
        ensure!(
            self.lasso.min_ratio > 0.0 && self.lasso.min_ratio < 1.0,
            "min_ratio must lie in (0, 1)"
        );
        ensure!(self.lasso.tolerance > 0.0, "tolerance must be positive");
        ensure!(self.seg_iterations >= 1, "seg_iterations must be at least 1");
        if let Some(p) = &self.corpus {
            ensure!(p.exists(), "corpus {} does not exist", p.display());
        }
        if let Some(p) = &self.category_model {
            ensure!(p.is_file(), "category model {} does not exist", p.display());
        }
        if let Some(r) = &self.ratings {
            ensure!(
                r == BUILTIN_RATINGS || Path::new(r).is_file(),
                "ratings file {r} does not exist"
            );
        }
        if builtin_table(&self.colors).is_err() {
            ensure!(
                Path::new(&self.colors).is_file(),
                "colors must be uw58, bcp37 or an existing CSV, got {}",
                self.colors
            );
        }
        Ok(())
    }

    pub fn segmentation(&self) -> ChanVeseParams {
        ChanVeseParams {
            iterations: self.seg_iterations,
            ..ChanVeseParams::default()
        }
    }

    pub fn color_table(&self) -> Result<ColorTable> {
        if let Ok(t) = builtin_table(&self.colors) {
            return Ok(t);
        }
        let path = Path::new(&self.colors);
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom");
        ColorTable::from_csv_path(name, self.white, path)
            .with_context(|| format!("reading color table {}", path.display()))
    }

    pub fn category(&self) -> Result<CategoryModel> {
        match &self.category_model {
            Some(p) => load_category_model(p)
                .with_context(|| format!("reading category model {}", p.display())),
            None => Ok(default_model()),
        }
    }

    /// Ratings over this run's colors, if configured.
    pub fn ratings_table(&self, colors: &ColorTable) -> Result<Option<RatingsTable>> {
        match self.ratings.as_deref() {
            None => Ok(None),
            Some(BUILTIN_RATINGS) => {
                ensure!(
                    colors.len() == 58,
                    "the shipped fruit ratings cover the 58 uw58 colors"
                );
                Ok(Some(builtin_fruit_ratings()))
            }
            Some(path) => Ok(Some(
                crate::datasets::load_ratings(Path::new(path), colors)
                    .with_context(|| format!("reading ratings {path}"))?,
            )),
        }
    }

    /// Scan the corpus directory, or read a manifest file, and apply the
    /// concept filter.
    pub fn manifest(&self) -> Result<CorpusManifest> {
        let root = self.corpus.as_ref().context("no corpus given")?;
        let mut manifest = if root.is_file() {
            CorpusManifest::read(root)?
        } else {
            scan_corpus(root, self.max_images, self.provenance)
                .with_context(|| format!("scanning corpus {}", root.display()))?
        };
        if !self.concepts.is_empty() {
            let have = manifest.concepts();
            for c in &self.concepts {
                ensure!(have.contains(c), "concept {c} has no images in the corpus");
            }
            manifest.records.retain(|r| self.concepts.contains(&r.concept));
        }
        let limit = u32::try_from(self.max_images).unwrap_or(u32::MAX);
        manifest.records.retain(|r| r.rank <= limit);
        ensure!(!manifest.records.is_empty(), "corpus has no images");
        Ok(manifest)
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output)
            .with_context(|| format!("creating {}", self.output.display()))?;
        Ok(self.output.join(name))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn read_design_matrix(path: &Path) -> Result<DesignMatrix> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    DesignMatrix::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

pub fn read_concept_matrix(path: &Path) -> Result<ConceptColorMatrix> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ConceptColorMatrix::read_csv(f, None).with_context(|| format!("reading {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<ModelSpec> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ModelSpec::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

/// Ratings from a CSV path or the shipped fruit table.
pub fn read_ratings_matrix(spec: &str) -> Result<ConceptColorMatrix> {
    if spec == BUILTIN_RATINGS {
        return Ok(builtin_fruit_ratings().matrix);
    }
    read_concept_matrix(Path::new(spec))
}

fn write_matrix(path: &Path, m: &ConceptColorMatrix) -> Result<()> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    write_file(path, &buf)
}

/// Keep only the columns belonging to `stage`.
pub fn restrict_to_stage(matrix: &DesignMatrix, stage: CatalogStage) -> Result<DesignMatrix> {
    let target = catalog(stage);
    let cols = target
        .specs()
        .iter()
        .map(|s| {
            matrix
                .catalog
                .position(s)
                .with_context(|| format!("design matrix lacks feature {s}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignMatrix {
        catalog: FeatureCatalog::from_specs(target.specs().to_vec())?,
        rows: matrix.rows.clone(),
        x: matrix.x.select_columns(&cols),
        y: matrix.y.clone(),
    })
}

/// Scan the corpus and write its manifest.
pub fn run_scan(cfg: &RunConfig) -> Result<CorpusManifest> {
    let manifest = cfg.manifest()?;
    write_file(
        &cfg.out_path(MANIFEST_FILE)?,
        (manifest.to_json()? + "\n").as_bytes(),
    )?;
    Ok(manifest)
}

/// Build and write the design matrix, its digest and the corpus manifest.
pub fn run_featurize(cfg: &RunConfig) -> Result<DesignMatrix> {
    let manifest = run_scan(cfg)?;
    let colors = cfg.color_table()?;
    let model = cfg.category()?;
    let ratings = cfg.ratings_table(&colors)?;
    let matrix = build_design_matrix(
        &manifest,
        &colors,
        &catalog(cfg.stage),
        &model,
        ratings.as_ref(),
        &cfg.segmentation(),
        cfg.jobs,
    )?;
    let bytes = matrix.to_csv_bytes()?;
    write_file(&cfg.out_path(DESIGN_MATRIX_FILE)?, &bytes)?;
    let digest = format!("{}  {DESIGN_MATRIX_FILE}\n", matrix.digest()?);
    write_file(&cfg.out_path(DIGEST_FILE)?, digest.as_bytes())?;
    Ok(matrix)
}

pub fn run_cv_curve(cfg: &RunConfig, matrix_path: &Path) -> Result<modeling::CvCurve> {
    let matrix = read_design_matrix(matrix_path)?;
    let curve = modeling::loo_cv_curve(&matrix, &cfg.lasso, cfg.jobs)?;
    let mut buf = Vec::new();
    curve.write_csv(&mut buf)?;
    write_file(&cfg.out_path(CV_CURVE_FILE)?, &buf)?;
    Ok(curve)
}

/// Train on the whole matrix; optionally also write leave-one-concept-out
/// estimates for every training concept.
pub fn run_train(cfg: &RunConfig, matrix_path: &Path, loo_estimates: bool) -> Result<ModelSpec> {
    let matrix = read_design_matrix(matrix_path)?;
    let meta = TrainMetadata {
        category_model_version: cfg.category()?.version,
        corpus_digest: matrix.digest()?,
        segmentation: cfg.segmentation(),
    };
    let model = modeling::train(&matrix, cfg.k, &cfg.lasso, &meta)?;
    write_file(&cfg.out_path(MODEL_FILE)?, model.to_json()?.as_bytes())?;
    if loo_estimates {
        let (est, _) = modeling::leave_one_concept_out(&matrix, cfg.k, &cfg.lasso, cfg.jobs)?;
        write_matrix(&cfg.out_path(LOO_ESTIMATES_FILE)?, &est)?;
    }
    Ok(model)
}

pub fn run_estimate(cfg: &RunConfig, model_path: &Path) -> Result<ConceptColorMatrix> {
    let model = read_model(model_path)?;
    let manifest = cfg.manifest()?;
    let colors = cfg.color_table()?;
    let category = cfg.category()?;
    if category.version != model.category_model_version {
        log::warn!(
            "category model {} differs from the training model {}",
            category.version,
            model.category_model_version
        );
    }
    let est = modeling::estimate(
        &model,
        &manifest,
        &colors,
        &category,
        &model.segmentation,
        cfg.jobs,
    )?;
    write_matrix(&cfg.out_path(ESTIMATES_FILE)?, &est)?;
    Ok(est)
}

/// Write the per-concept report, its JSON summary and the scatter data.
pub fn run_evaluate(cfg: &RunConfig, estimates: &Path, ratings: &str) -> Result<EvaluationReport> {
    let est = read_concept_matrix(estimates)?;
    let human = read_ratings_matrix(ratings)?;
    let report = evaluate_model(&est, &human)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_file(&cfg.out_path(REPORT_CSV_FILE)?, &buf)?;
    write_file(&cfg.out_path(REPORT_JSON_FILE)?, report.to_json()?.as_bytes())?;
    let mut buf = Vec::new();
    write_scatter_csv(&est, &human, &mut buf)?;
    write_file(&cfg.out_path(SCATTER_FILE)?, &buf)?;
    Ok(report)
}

/// Compare named report JSON files in the given order.
pub fn run_compare(cfg: &RunConfig, reports: &[(String, PathBuf)]) -> Result<Vec<StageResult>> {
    let results = reports
        .iter()
        .map(|(name, path)| {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let report: EvaluationReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            Ok(StageResult {
                model: name.clone(),
                overall: report.overall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_stage_comparison(&results, &mut buf)?;
    write_file(&cfg.out_path(COMPARISON_FILE)?, &buf)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_and_overrides() {
        let map = parse_config_text("# run\nk = 3\nmax-images=5 # few\n\nstage = ball_only\n").unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in &map {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.max_images, 5);
        assert_eq!(cfg.stage, CatalogStage::BallOnly);
        cfg.set("k", "4").unwrap();
        assert_eq!(cfg.k, 4);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(parse_config_text("novalue").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            corpus: Some(PathBuf::from("/definitely/missing")),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn triples() {
        assert_eq!(parse_triple("0.31273 0.32902 100").unwrap(), [0.31273, 0.32902, 100.0]);
        assert_eq!(parse_triple("1,2,3").unwrap(), [1.0, 2.0, 3.0]);
        assert!(parse_triple("1 2").is_err());
        assert!(parse_triple("1 x 2").is_err());
    }
}
