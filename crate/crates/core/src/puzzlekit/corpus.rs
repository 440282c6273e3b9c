//! On-disk puzzles and corpus manifests.
//!
//! A puzzle directory holds `puzzle.json` and one PNM per piece
//! (`piece_007.pgm`, clips stacked vertically). Withheld pieces live under
//! `withheld/` so that solver-facing loads can skip them.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::image::{read_frame_dir, Image};
use super::instance::{Piece, PieceShape, Provenance, PuzzleInstance};
use crate::error::{write_atomic, Error, Result};
use crate::posenc::Layout;

pub const MANIFEST_VERSION: u32 = 1;
pub const PUZZLE_VERSION: u32 = 1;
pub const PUZZLE_FILE: &str = "puzzle.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Image,
    Frames,
    Puzzle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub kind: SampleKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub samples: Vec<SampleRecord>,
    pub params: serde_json::Value,
    pub seed: u64,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, None, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

impl CorpusManifest {
    pub fn new(seed: u64, params: serde_json::Value) -> Self {
        Self {
            version: MANIFEST_VERSION,
            samples: Vec::new(),
            params,
            seed,
        }
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                None,
                format!("manifest version {} (supported: {MANIFEST_VERSION})", self.version),
            ));
        }
        let mut seen = std::collections::HashMap::new();
        for s in &self.samples {
            if let Some(prev) = seen.insert(s.path.as_str(), s.split) {
                if prev != s.split {
                    return Err(Error::format(path, None, format!("{} listed in two splits", s.path)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PuzzleFile {
    version: u32,
    layout: Layout,
    piece: PieceShape,
    truth: Vec<usize>,
    missing: Vec<usize>,
    anchored: bool,
    provenance: Provenance,
    pieces: Vec<String>,
}

fn piece_name(row: usize, channels: usize) -> String {
    format!("piece_{row:03}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

pub fn save_puzzle(inst: &PuzzleInstance, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = inst.piece_shape();
    let mut names = Vec::with_capacity(inst.len());
    for row in 0..inst.len() {
        let name = piece_name(row, shape.channels);
        let rel = if inst.is_missing(row) {
            let sub = dir.join("withheld");
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            format!("withheld/{name}")
        } else {
            name
        };
        inst.ground_truth_piece(row).to_image().write_pnm(&dir.join(&rel))?;
        names.push(rel);
    }
    let file = PuzzleFile {
        version: PUZZLE_VERSION,
        layout: inst.layout(),
        piece: shape,
        truth: inst.truth().to_vec(),
        missing: inst.missing().to_vec(),
        anchored: inst.anchored(),
        provenance: inst.provenance.clone(),
        pieces: names,
    };
    write_json(&dir.join(PUZZLE_FILE), &file)
}

/// Loads a puzzle directory (or its `puzzle.json`), withheld pieces included.
pub fn load_puzzle(path: &Path) -> Result<PuzzleInstance> {
    let (dir, json) = if path.is_dir() {
        (path.to_path_buf(), path.join(PUZZLE_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let file: PuzzleFile = read_json(&json)?;
    if file.version != PUZZLE_VERSION {
        return Err(Error::format(&json, None, format!("puzzle version {}", file.version)));
    }
    let pieces = file
        .pieces
        .iter()
        .map(|rel| {
            let p = dir.join(rel);
            let piece = Piece::from_image(&Image::read_pnm(&p)?, file.piece.frames)?;
            if piece.shape() != file.piece {
                return Err(Error::format(&p, None, format!("piece geometry {:?} != {:?}", piece.shape(), file.piece)));
            }
            Ok(piece)
        })
        .collect::<Result<Vec<_>>>()?;
    PuzzleInstance::new(pieces, file.layout, file.truth, file.missing, file.anchored, file.provenance)
        .map_err(|e| Error::format(&json, None, e.to_string()))
}

pub enum Source {
    Image(Image),
    Frames(Vec<Image>),
    Puzzle(PuzzleInstance),
}

pub struct Sample {
    pub record: SampleRecord,
    pub source: Source,
}

pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

/// Reads a manifest; samples are decoded lazily by [`Corpus::iter`].
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join("manifest.json")
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = CorpusManifest::load(&manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(Corpus { dir, manifest })
}

impl Corpus {
    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample> {
        let path = self.dir.join(&record.path);
        let source = match record.kind {
            SampleKind::Image => Source::Image(Image::read_pnm(&path)?),
            SampleKind::Frames => Source::Frames(read_frame_dir(&path)?),
            SampleKind::Puzzle => Source::Puzzle(load_puzzle(&path)?),
        };
        Ok(Sample {
            record: record.clone(),
            source,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.manifest.samples.iter().map(|r| self.load_sample(r))
    }

    /// Every puzzle sample of one split, in manifest order.
    pub fn puzzles(&self, split: Split) -> Result<Vec<PuzzleInstance>> {
        self.manifest
            .samples
            .iter()
            .filter(|r| r.split == split && r.kind == SampleKind::Puzzle)
            .map(|r| load_puzzle(&self.dir.join(&r.path)))
            .collect()
    }
}
