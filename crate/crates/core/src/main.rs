use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use colorsem_core::color::{lab_to_lch, srgb_to_lab, xyy_to_lab, Lab, Rgb8, WhitePoint, XyY};
use colorsem_core::pipeline::{self, parse_triple, RunConfig};

/// Estimate color-concept associations from image corpora.
#[derive(Parser)]
#[command(name = "colorsem", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Color table: uw58, bcp37, or a CSV path.
    #[arg(long, global = true)]
    colors: Option<String>,
    /// White point "x y Y" for a color table CSV.
    #[arg(long, global = true)]
    white: Option<String>,
    /// Feature catalog: ball_only, ball_sector or full.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[arg(long, global = true)]
    max_images: Option<usize>,
    /// Comma-separated concepts to keep.
    #[arg(long, global = true)]
    concepts: Option<String>,
    /// Rule CSV or compiled category model.
    #[arg(long, global = true)]
    category_model: Option<PathBuf>,
    #[arg(long, global = true)]
    seg_iterations: Option<usize>,
    #[arg(long, global = true)]
    n_lambdas: Option<usize>,
    #[arg(long, global = true)]
    min_ratio: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the feature catalog over a corpus.
    Featurize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Ratings CSV, or "fruit" for the shipped table.
        #[arg(long)]
        ratings: Option<String>,
        #[arg(long)]
        provenance: Option<String>,
    },
    /// Leave-one-concept-out MSE by number of features.
    CvCurve {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Select k features and fit their weights.
    Train {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Also write held-out estimates for every training concept.
        #[arg(long)]
        loo_estimates: bool,
    },
    /// Apply a model to a corpus.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Correlate estimates with ratings.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        /// Ratings CSV, or "fruit" for the shipped table.
        #[arg(long)]
        ratings: String,
    },
    /// Compare overall correlations of several reports.
    Compare {
        /// NAME=PATH to a report.json, in table order.
        #[arg(long = "report", required = true)]
        reports: Vec<String>,
    },
    /// Print a color in CIELAB and CIELch.
    Convert {
        #[arg(long, num_args = 3, allow_negative_numbers = true, value_names = ["X", "Y", "BIG_Y"])]
        xyy: Option<Vec<String>>,
        #[arg(long, num_args = 3, value_names = ["R", "G", "B"])]
        srgb: Option<Vec<String>>,
        #[arg(long, num_args = 3, allow_negative_numbers = true, value_names = ["L", "A", "B"])]
        lab: Option<Vec<String>>,
    },
    /// Corpus utilities.
    Corpus {
        #[command(subcommand)]
        action: CorpusCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Index `<root>/<concept>/` image folders into a manifest.
    Scan {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        provenance: Option<String>,
    },
}

fn build_config(g: &GlobalOpts, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("jobs", g.jobs.map(|v| v.to_string())),
        ("output", path_str(&g.output)),
        ("colors", g.colors.clone()),
        ("white", g.white.clone()),
        ("stage", g.stage.clone()),
        ("max_images", g.max_images.map(|v| v.to_string())),
        ("concepts", g.concepts.clone()),
        ("category_model", path_str(&g.category_model)),
        ("seg_iterations", g.seg_iterations.map(|v| v.to_string())),
        ("n_lambdas", g.n_lambdas.map(|v| v.to_string())),
        ("min_ratio", g.min_ratio.map(|v| v.to_string())),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn triple(values: &[String]) -> Result<[f64; 3]> {
    parse_triple(&values.join(" "))
}

fn print_lab(lab: Lab) {
    let lch = lab_to_lch(lab);
    println!("L {:.4} a {:.4} b {:.4}", lab.l, lab.a, lab.b);
    println!("L {:.4} c {:.4} h {:.4}", lch.l, lch.c, lch.h);
}

fn convert(cfg: &RunConfig, xyy: &Option<Vec<String>>, srgb: &Option<Vec<String>>, lab: &Option<Vec<String>>) -> Result<()> {
    match (xyy, srgb, lab) {
        (Some(v), None, None) => {
            let [x, y, big_y] = triple(v)?;
            let white: WhitePoint = cfg.white;
            print_lab(xyy_to_lab(XyY::new(x, y, big_y), white)?);
        }
        (None, Some(v), None) => {
            let mut c = [0u8; 3];
            for (o, s) in c.iter_mut().zip(v) {
                *o = s
                    .parse()
                    .with_context(|| format!("sRGB components are 0-255, got {s:?}"))?;
            }
            print_lab(srgb_to_lab(Rgb8::new(c[0], c[1], c[2])));
        }
        (None, None, Some(v)) => {
            let [l, a, b] = triple(v)?;
            print_lab(Lab::new(l, a, b));
        }
        _ => bail!("give exactly one of --xyy, --srgb or --lab"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Featurize {
            corpus,
            ratings,
            provenance,
        } => {
            let cfg = build_config(
                g,
                &[
                    ("corpus", path_str(corpus)),
                    ("ratings", ratings.clone()),
                    ("provenance", provenance.clone()),
                ],
            )?;
            if cfg.corpus.is_none() {
                bail!("featurize needs --corpus");
            }
            let m = pipeline::run_featurize(&cfg)?;
            println!("{} rows x {} features", m.n_rows(), m.catalog.len());
        }
        Command::CvCurve { matrix } => {
            let cfg = build_config(g, &[])?;
            let curve = pipeline::run_cv_curve(&cfg, matrix)?;
            println!("{} folds", curve.n_folds);
        }
        Command::Train {
            matrix,
            k,
            loo_estimates,
        } => {
            let cfg = build_config(g, &[("k", k.map(|v| v.to_string()))])?;
            let model = pipeline::run_train(&cfg, matrix, *loo_estimates)?;
            for (f, w) in model.features.iter().zip(&model.weights) {
                println!("{f} {w}");
            }
            println!("offset {}", model.offset);
        }
        Command::Estimate { model, corpus } => {
            let cfg = build_config(g, &[("corpus", path_str(corpus))])?;
            if cfg.corpus.is_none() {
                bail!("estimate needs --corpus");
            }
            let est = pipeline::run_estimate(&cfg, model)?;
            println!("{} concepts x {} colors", est.concepts.len(), est.n_colors());
        }
        Command::Evaluate { estimates, ratings } => {
            let cfg = build_config(g, &[])?;
            let report = pipeline::run_evaluate(&cfg, estimates, ratings)?;
            println!(
                "overall r {:.4} p {:.3e} n {}",
                report.overall.r, report.overall.p, report.overall.n
            );
        }
        Command::Compare { reports } => {
            let cfg = build_config(g, &[])?;
            let named = reports
                .iter()
                .map(|s| {
                    s.split_once('=')
                        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                        .with_context(|| format!("expected NAME=PATH, got {s:?}"))
                })
                .collect::<Result<Vec<_>>>()?;
            for s in pipeline::run_compare(&cfg, &named)? {
                println!("{} r {:.4}", s.model, s.overall.r);
            }
        }
        Command::Convert { xyy, srgb, lab } => {
            let cfg = build_config(g, &[])?;
            convert(&cfg, xyy, srgb, lab)?;
        }
        Command::Corpus {
            action: CorpusCommand::Scan { corpus, provenance },
        } => {
            let cfg = build_config(
                g,
                &[("corpus", path_str(corpus)), ("provenance", provenance.clone())],
            )?;
            if cfg.corpus.is_none() {
                bail!("corpus scan needs --corpus");
            }
            let m = pipeline::run_scan(&cfg)?;
            println!("{} images, {} concepts", m.records.len(), m.concepts().len());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
