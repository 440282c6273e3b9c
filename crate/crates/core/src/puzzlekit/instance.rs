use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use super::image::Image;
use crate::diffusion::PuzzleQuery;
use crate::error::{Error, Result};
use crate::posenc::Layout;

/// Geometry of one piece: `frames` stacked rasters of `width × height × channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieceShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
}

impl PieceShape {
    pub fn dim(&self) -> usize {
        self.width * self.height * self.channels * self.frames
    }
}

/// Pixels of one tile or clip, frames stored one after another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    shape: PieceShape,
    data: Vec<u8>,
}

impl Piece {
    pub fn new(shape: PieceShape, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.dim() {
            return Err(Error::invalid(format!(
                "piece {shape:?} needs {} bytes, got {}",
                shape.dim(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("piece needs a frame"))?;
        let shape = PieceShape {
            width: first.width(),
            height: first.height(),
            channels: first.channels(),
            frames: frames.len(),
        };
        let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> PieceShape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> Image {
        let s = self.shape;
        let len = s.width * s.height * s.channels;
        Image::new(s.width, s.height, s.channels, self.data[i * len..(i + 1) * len].to_vec())
            .expect("frame geometry")
    }

    /// Frames stacked vertically into one raster.
    pub fn to_image(&self) -> Image {
        let s = self.shape;
        Image::new(s.width, s.height * s.frames, s.channels, self.data.clone()).expect("stacked geometry")
    }

    pub fn from_image(img: &Image, frames: usize) -> Result<Self> {
        if frames == 0 || !img.height().is_multiple_of(frames) {
            return Err(Error::invalid(format!(
                "image height {} is not a multiple of {frames} frames",
                img.height()
            )));
        }
        let shape = PieceShape {
            width: img.width(),
            height: img.height() / frames,
            channels: img.channels(),
            frames,
        };
        Self::new(shape, img.data().to_vec())
    }

    pub fn flip_horizontal(&self) -> Piece {
        let frames: Vec<Image> = (0..self.shape.frames).map(|i| self.frame(i).flip_horizontal()).collect();
        Piece::from_frames(&frames).expect("same geometry")
    }

    /// Pixels mapped from `0..=255` to `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
    }

    pub fn from_normalized(shape: PieceShape, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(shape, data)
    }
}

/// Where an instance came from and how it was built.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

/// Shuffled pieces plus the hidden ground truth.
///
/// Presentation row `i` shows the piece that belongs in slot `truth[i]`.
/// Missing rows keep their pixels here for scoring, but
/// [`PuzzleInstance::piece`] and [`PuzzleInstance::solver_view`] never expose them.
#[derive(Clone, Debug, PartialEq)]
pub struct PuzzleInstance {
    pieces: Vec<Piece>,
    layout: Layout,
    truth: Vec<usize>,
    missing: Vec<usize>,
    anchored: bool,
    pub provenance: Provenance,
}

/// What a solver is allowed to see.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverView {
    pub pieces: Vec<Option<Piece>>,
    pub shape: PieceShape,
    pub layout: Layout,
    pub missing: Vec<usize>,
    pub anchor: Option<usize>,
}

impl SolverView {
    /// Normalized pixel rows (zeros for missing rows) ready for the sampler.
    pub fn query(&self, id: u64) -> PuzzleQuery {
        let dim = self.shape.dim();
        let mut data = Vec::with_capacity(self.pieces.len() * dim);
        for p in &self.pieces {
            match p {
                Some(p) => data.extend(p.normalized()),
                None => data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        PuzzleQuery {
            id,
            pieces: Tensor::new(&[self.pieces.len(), dim], data).expect("piece rows"),
            layout: self.layout,
            missing: self.missing.clone(),
            anchor: self.anchor,
        }
    }
}

impl PuzzleInstance {
    pub fn new(
        pieces: Vec<Piece>,
        layout: Layout,
        truth: Vec<usize>,
        missing: Vec<usize>,
        anchored: bool,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = layout.slots();
        if pieces.len() != n || truth.len() != n {
            return Err(Error::invalid(format!(
                "{} pieces and {} truth entries for {n} slots",
                pieces.len(),
                truth.len()
            )));
        }
        if let Some(first) = pieces.first() {
            if pieces.iter().any(|p| p.shape() != first.shape()) {
                return Err(Error::invalid("pieces differ in geometry"));
            }
        }
        let mut seen = vec![false; n];
        for &s in &truth {
            if s >= n || std::mem::replace(&mut seen[s], true) {
                return Err(Error::invalid("truth is not a permutation"));
            }
        }
        if anchored && truth.first() != Some(&0) {
            return Err(Error::invalid("anchored instance must show slot 0 first"));
        }
        let mut inst = Self {
            pieces,
            layout,
            truth,
            missing: Vec::new(),
            anchored,
            provenance,
        };
        inst.set_missing(missing)?;
        Ok(inst)
    }

    fn set_missing(&mut self, mut missing: Vec<usize>) -> Result<()> {
        missing.sort_unstable();
        missing.dedup();
        if missing.iter().any(|&m| m >= self.len()) {
            return Err(Error::invalid("missing row out of range"));
        }
        if self.anchored && missing.first() == Some(&0) {
            return Err(Error::invalid("the anchor piece cannot be withheld"));
        }
        self.missing = missing;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn anchored(&self) -> bool {
        self.anchored
    }

    pub fn piece_shape(&self) -> PieceShape {
        self.pieces[0].shape()
    }

    pub fn is_missing(&self, row: usize) -> bool {
        self.missing.binary_search(&row).is_ok()
    }

    /// Presentation row `row`, or `None` if it is withheld.
    pub fn piece(&self, row: usize) -> Option<&Piece> {
        (!self.is_missing(row)).then(|| &self.pieces[row])
    }

    /// Ground-truth pixels of any row, withheld or not. For scoring only.
    pub fn ground_truth_piece(&self, row: usize) -> &Piece {
        &self.pieces[row]
    }

    /// Pieces in slot order, withheld ones included. For training and scoring.
    pub fn slot_pieces(&self) -> Vec<&Piece> {
        let mut out = vec![&self.pieces[0]; self.len()];
        for (row, &slot) in self.truth.iter().enumerate() {
            out[slot] = &self.pieces[row];
        }
        out
    }

    pub fn solver_view(&self) -> SolverView {
        SolverView {
            pieces: (0..self.len()).map(|i| self.piece(i).cloned()).collect(),
            shape: self.piece_shape(),
            layout: self.layout,
            missing: self.missing.clone(),
            anchor: self.anchored.then_some(0),
        }
    }

    /// Places every piece at its true slot (grids) or in true order (sequences).
    pub fn reassemble(&self) -> Result<Vec<Image>> {
        let slots = self.slot_pieces();
        match self.layout {
            Layout::Sequence { .. } => Ok(slots
                .iter()
                .flat_map(|p| (0..p.shape().frames).map(|f| p.frame(f)))
                .collect()),
            Layout::Grid { rows, cols } => {
                let s = self.piece_shape();
                if s.frames != 1 {
                    return Err(Error::invalid("grid pieces must be single frames"));
                }
                let (w, h, c) = (s.width * cols, s.height * rows, s.channels);
                let mut data = vec![0u8; w * h * c];
                for (slot, piece) in slots.iter().enumerate() {
                    let (gx, gy) = (slot % cols, slot / cols);
                    for y in 0..s.height {
                        let dst = ((gy * s.height + y) * w + gx * s.width) * c;
                        let src = y * s.width * c;
                        data[dst..dst + s.width * c].copy_from_slice(&piece.data()[src..src + s.width * c]);
                    }
                }
                Ok(vec![Image::new(w, h, c, data)?])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Center,
    Random,
}

/// Tiling protocol for image puzzles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub grid: usize,
    /// Keep an eroded gap between pieces: each piece is cropped out of a larger cell.
    pub gap: bool,
    pub piece_px: usize,
    pub crop: Crop,
    pub anchor: bool,
}

impl Default for SpatialParams {
    fn default() -> Self {
        Self {
            grid: 3,
            gap: true,
            piece_px: 64,
            crop: Crop::Center,
            anchor: false,
        }
    }
}

impl SpatialParams {
    /// Cell edge: the piece edge in no-gap mode, `round(piece_px · 85 / 64)` with a gap.
    pub fn cell_px(&self) -> usize {
        if self.gap {
            (self.piece_px * 85 + 32) / 64
        } else {
            self.piece_px
        }
    }

    /// Edge of the square the source image is resized to.
    pub fn canvas_px(&self) -> usize {
        self.grid * self.cell_px()
    }
}

fn shuffled<R: Rng + ?Sized>(n: usize, keep_first: bool, rng: &mut R) -> Vec<usize> {
    let mut truth: Vec<usize> = (0..n).collect();
    if keep_first {
        truth[1..].shuffle(rng);
    } else {
        truth.shuffle(rng);
    }
    truth
}

/// Cuts an image into a shuffled grid puzzle.
pub fn make_spatial<R: Rng + ?Sized>(image: &Image, params: &SpatialParams, rng: &mut R) -> Result<PuzzleInstance> {
    if params.grid < 2 || params.piece_px == 0 {
        return Err(Error::invalid("need grid >= 2 and a positive piece size"));
    }
    let canvas = params.canvas_px();
    if image.width() < canvas || image.height() < canvas {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than the {canvas}x{canvas} canvas",
            image.width(),
            image.height()
        )));
    }
    let img = image.resize(canvas, canvas)?;
    let (cell, px) = (params.cell_px(), params.piece_px);
    let slack = cell - px;
    let mut tiles = Vec::with_capacity(params.grid * params.grid);
    for gy in 0..params.grid {
        for gx in 0..params.grid {
            let (ox, oy) = match params.crop {
                Crop::Center => (slack / 2, slack / 2),
                Crop::Random => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
            };
            tiles.push(Piece::from_frames(&[img.crop(gx * cell + ox, gy * cell + oy, px, px)?])?);
        }
    }
    let n = tiles.len();
    let truth = shuffled(n, params.anchor, rng);
    let pieces = truth.iter().map(|&s| tiles[s].clone()).collect();
    PuzzleInstance::new(
        pieces,
        Layout::square(params.grid),
        truth,
        Vec::new(),
        params.anchor,
        Provenance {
            source: String::new(),
            params: serde_json::to_value(params).expect("serializable params"),
            seed: 0,
        },
    )
}

/// Groups consecutive frames into clips and shuffles the clips.
pub fn make_temporal<R: Rng + ?Sized>(
    frames: &[Image],
    piece_len: usize,
    anchor_first: bool,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    if piece_len == 0 || frames.is_empty() || !frames.len().is_multiple_of(piece_len) {
        return Err(Error::invalid(format!(
            "{} frames cannot be split into clips of {piece_len}",
            frames.len()
        )));
    }
    let clips: Vec<Piece> = frames.chunks(piece_len).map(Piece::from_frames).collect::<Result<_>>()?;
    let truth = shuffled(clips.len(), anchor_first, rng);
    let pieces = truth.iter().map(|&s| clips[s].clone()).collect();
    PuzzleInstance::new(
        pieces,
        Layout::Sequence { len: clips.len() },
        truth,
        Vec::new(),
        anchor_first,
        Provenance {
            source: String::new(),
            params: serde_json::json!({ "piece_len": piece_len, "anchor_first": anchor_first }),
            seed: 0,
        },
    )
}

/// Largest default mask size: a quarter of the pieces, rounded down.
pub fn mask_limit(n: usize) -> usize {
    n / 4
}

/// Withholds `k` random presentation rows, replacing any previous mask.
/// The anchor row is never chosen. `k` above a quarter of the pieces needs `allow_over`.
pub fn apply_mask<R: Rng + ?Sized>(
    instance: &PuzzleInstance,
    k: usize,
    allow_over: bool,
    rng: &mut R,
) -> Result<PuzzleInstance> {
    let n = instance.len();
    if k > mask_limit(n) && !allow_over {
        return Err(Error::invalid(format!(
            "{k} missing of {n} exceeds the default limit of {}",
            mask_limit(n)
        )));
    }
    let first = usize::from(instance.anchored);
    let candidates = n - first;
    if k >= n || k > candidates {
        return Err(Error::invalid(format!("cannot withhold {k} of {n} pieces")));
    }
    let mut out = instance.clone();
    let missing = index::sample(rng, candidates, k).into_iter().map(|i| i + first).collect();
    out.set_missing(missing)?;
    Ok(out)
}
