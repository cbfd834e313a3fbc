//! Image corpus manifests.
//!
//! A corpus lives on disk as `root/<concept>/<rank>.<jpg|jpeg|png>`. Rank is
//! the 1-based position of a file in lexicographic filename order among the
//! readable images of its concept directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::ConceptSet;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus root {0} contains no concept directories")]
    NoConcepts(PathBuf),
    #[error("concept {0:?} has no readable images")]
    EmptyConcept(String),
    #[error("image limit must be at least 1")]
    ZeroLimit,
    #[error("provider failed for concept {concept:?}: {reason}")]
    Provider { concept: String, reason: String },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a set of images came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    TopSearch,
    Photo,
    Cartoon,
    Custom,
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top_search" => Ok(Self::TopSearch),
            "photo" => Ok(Self::Photo),
            "cartoon" => Ok(Self::Cartoon),
            "custom" => Ok(Self::Custom),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub concept: String,
    pub rank: u32,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    /// Files that had an image extension but could not be decoded.
    pub skipped: usize,
    pub extensions: Vec<String>,
}

impl CorpusManifest {
    pub fn from_records(root: PathBuf, mut records: Vec<ImageRecord>) -> Self {
        records.sort_by(|a, b| a.concept.cmp(&b.concept).then(a.rank.cmp(&b.rank)));
        Self {
            root,
            records,
            skipped: 0,
            extensions: IMAGE_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Concept names in canonical (sorted) order.
    pub fn concepts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.records.iter().map(|r| r.concept.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn records_for<'a>(&'a self, concept: &'a str) -> impl Iterator<Item = &'a ImageRecord> {
        self.records.iter().filter(move |r| r.concept == concept)
    }

    pub fn full_path(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_json()? + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn is_readable_image(p: &Path) -> bool {
    image::ImageReader::open(p)
        .and_then(|r| r.with_guessed_format())
        .map_err(image::ImageError::from)
        .and_then(|r| r.into_dimensions())
        .is_ok_and(|(w, h)| w > 0 && h > 0)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scan `root/<concept>/` directories, keeping up to `limit` readable images
/// per concept.
pub fn scan_corpus(
    root: &Path,
    limit: usize,
    provenance: Provenance,
) -> Result<CorpusManifest, CorpusError> {
    if limit == 0 {
        return Err(CorpusError::ZeroLimit);
    }
    let concept_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if concept_dirs.is_empty() {
        return Err(CorpusError::NoConcepts(root.to_path_buf()));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for dir in concept_dirs {
        let concept = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let mut rank = 0u32;
        for file in sorted_entries(&dir)? {
            if rank as usize >= limit {
                break;
            }
            if !file.is_file() || !has_image_extension(&file) {
                continue;
            }
            if !is_readable_image(&file) {
                warn!("skipping undecodable image {}", file.display());
                skipped += 1;
                continue;
            }
            rank += 1;
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            records.push(ImageRecord {
                concept: concept.clone(),
                rank,
                path: rel,
                provenance,
            });
        }
        if rank == 0 {
            return Err(CorpusError::EmptyConcept(concept));
        }
    }
    let mut manifest = CorpusManifest::from_records(root.to_path_buf(), records);
    manifest.skipped = skipped;
    Ok(manifest)
}

/// A source of images for a concept.
pub trait ImageFetcher {
    /// Write up to `limit` images for `concept` into `dest` and return how
    /// many were written.
    fn fetch_concept(&self, concept: &str, limit: usize, dest: &Path) -> Result<usize, String>;
}

/// Copies images from an existing corpus tree.
#[derive(Debug, Clone)]
pub struct LocalMirrorFetcher {
    pub source_root: PathBuf,
}

impl ImageFetcher for LocalMirrorFetcher {
    fn fetch_concept(&self, concept: &str, limit: usize, dest: &Path) -> Result<usize, String> {
        let src = self.source_root.join(concept);
        let files = sorted_entries(&src).map_err(|e| e.to_string())?;
        let mut n = 0;
        for file in files {
            if n >= limit {
                break;
            }
            if !file.is_file() || !has_image_extension(&file) || !is_readable_image(&file) {
                continue;
            }
            let name = file.file_name().expect("file has a name");
            fs::copy(&file, dest.join(name)).map_err(|e| e.to_string())?;
            n += 1;
        }
        Ok(n)
    }
}

/// Populate `dest` in the canonical layout from a provider, then scan it.
pub fn fetch(
    provider: &dyn ImageFetcher,
    concepts: &ConceptSet,
    limit: usize,
    dest: &Path,
    provenance: Provenance,
) -> Result<CorpusManifest, CorpusError> {
    if limit == 0 {
        return Err(CorpusError::ZeroLimit);
    }
    for concept in concepts.names() {
        let dir = dest.join(concept);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let n = provider
            .fetch_concept(concept, limit, &dir)
            .map_err(|reason| CorpusError::Provider {
                concept: concept.clone(),
                reason,
            })?;
        if n == 0 {
            return Err(CorpusError::Provider {
                concept: concept.clone(),
                reason: "no results".into(),
            });
        }
    }
    scan_corpus(dest, limit, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, rgb: [u8; 3]) {
        image::RgbImage::from_pixel(4, 3, image::Rgb(rgb)).save(path).unwrap();
    }

    fn fixture(root: &Path, concepts: &[&str], per: usize) {
        for (ci, c) in concepts.iter().enumerate() {
            let d = root.join(c);
            fs::create_dir_all(&d).unwrap();
            for i in 0..per {
                write_png(&d.join(format!("{:02}.png", i + 1)), [ci as u8 * 20, i as u8, 0]);
            }
        }
    }

    #[test]
    fn scan_counts_and_limits() {
        let dir = tempfile::tempdir().unwrap();
        let concepts: Vec<String> = (0..12).map(|i| format!("fruit{i:02}")).collect();
        let names: Vec<&str> = concepts.iter().map(String::as_str).collect();
        fixture(dir.path(), &names, 50);
        let m = scan_corpus(dir.path(), 50, Provenance::TopSearch).unwrap();
        assert_eq!(m.records.len(), 600);
        let m5 = scan_corpus(dir.path(), 5, Provenance::TopSearch).unwrap();
        assert_eq!(m5.records.len(), 60);
        for c in m5.concepts() {
            let ranks: Vec<u32> = m5.records_for(&c).map(|r| r.rank).collect();
            assert_eq!(ranks, vec![1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn empty_concept_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &["lemon"], 2);
        fs::create_dir_all(dir.path().join("lime")).unwrap();
        fs::write(dir.path().join("lime/01.jpg"), b"garbage").unwrap();
        let err = scan_corpus(dir.path(), 5, Provenance::Photo).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyConcept(ref c) if c == "lime"), "{err}");
    }

    #[test]
    fn undecodable_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &["lemon"], 3);
        fs::write(dir.path().join("lemon/02a.png"), b"garbage").unwrap();
        fs::write(dir.path().join("lemon/notes.txt"), b"ignored").unwrap();
        let m = scan_corpus(dir.path(), 10, Provenance::Photo).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.skipped, 1);
        assert_eq!(m.records[2].path, PathBuf::from("lemon/03.png"));
    }

    #[test]
    fn scan_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &["b", "a", "c"], 4);
        let a = scan_corpus(dir.path(), 3, Provenance::Cartoon).unwrap().to_json().unwrap();
        let b = scan_corpus(dir.path(), 3, Provenance::Cartoon).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = CorpusManifest::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        assert!(a.contains("\"provenance\": \"cartoon\""));
    }

    #[test]
    fn local_mirror_matches_scan() {
        let src = tempfile::tempdir().unwrap();
        fixture(src.path(), &["lemon", "lime"], 4);
        let dest = tempfile::tempdir().unwrap();
        let fetcher = LocalMirrorFetcher {
            source_root: src.path().to_path_buf(),
        };
        let concepts = ConceptSet::new(["lemon", "lime"]).unwrap();
        let fetched = fetch(&fetcher, &concepts, 3, dest.path(), Provenance::TopSearch).unwrap();
        let scanned = scan_corpus(src.path(), 3, Provenance::TopSearch).unwrap();
        assert_eq!(fetched.records, scanned.records);
    }

    #[test]
    fn fetch_errors() {
        let src = tempfile::tempdir().unwrap();
        fixture(src.path(), &["lemon"], 2);
        fs::create_dir_all(src.path().join("kiwi")).unwrap();
        let fetcher = LocalMirrorFetcher {
            source_root: src.path().to_path_buf(),
        };
        let dest = tempfile::tempdir().unwrap();
        let concepts = ConceptSet::new(["lemon", "kiwi"]).unwrap();
        let err = fetch(&fetcher, &concepts, 3, dest.path(), Provenance::TopSearch).unwrap_err();
        assert!(matches!(err, CorpusError::Provider { ref concept, .. } if concept == "kiwi"));
        let err = fetch(&fetcher, &concepts, 0, dest.path(), Provenance::TopSearch).unwrap_err();
        assert!(matches!(err, CorpusError::ZeroLimit));
    }
}
