use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use tensorlab::{Scalar, Tensor};

use crate::denoiser::Modality;
use crate::error::{Error, Result};
use crate::posenc::{Layout, PeTable};
use crate::puzzlekit::{mask_limit, Piece, PieceShape, PuzzleInstance};

/// Training sources: each one the pieces of a solved puzzle, in slot order.
#[derive(Clone, Debug)]
pub struct TrainSet {
    layout: Layout,
    shape: PieceShape,
    // One normalized row per slot, per source.
    sources: Vec<Vec<Vec<f32>>>,
}

impl TrainSet {
    pub fn from_instances(instances: &[PuzzleInstance]) -> Result<Self> {
        let first = instances.first().ok_or_else(|| Error::invalid("empty training set"))?;
        let (layout, shape) = (first.layout(), first.piece_shape());
        let sources = instances
            .iter()
            .map(|inst| {
                if inst.layout() != layout || inst.piece_shape() != shape {
                    return Err(Error::invalid("training puzzles differ in layout or piece geometry"));
                }
                Ok(inst.slot_pieces().iter().map(|p| p.normalized()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { layout, shape, sources })
    }

    pub fn from_slot_pieces(layout: Layout, sources: &[Vec<Piece>]) -> Result<Self> {
        let shape = sources
            .first()
            .and_then(|s| s.first())
            .map(Piece::shape)
            .ok_or_else(|| Error::invalid("empty training set"))?;
        if sources.iter().any(|s| s.len() != layout.slots() || s.iter().any(|p| p.shape() != shape)) {
            return Err(Error::invalid("training pieces do not fit the layout"));
        }
        Ok(Self {
            layout,
            shape,
            sources: sources.iter().map(|s| s.iter().map(Piece::normalized).collect()).collect(),
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn piece_shape(&self) -> PieceShape {
        self.shape
    }

    pub fn modality(&self) -> Modality {
        match self.layout {
            Layout::Grid { .. } => Modality::Spatial,
            Layout::Sequence { .. } => Modality::Temporal,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Slot rows of the horizontally mirrored source.
    fn flipped(&self, src: usize) -> Vec<Vec<f32>> {
        let Layout::Grid { rows, cols } = self.layout else {
            return self.sources[src].clone();
        };
        let s = self.shape;
        let mut out = Vec::with_capacity(rows * cols);
        for gy in 0..rows {
            for gx in 0..cols {
                let tile = &self.sources[src][gy * cols + (cols - 1 - gx)];
                let mut m = Vec::with_capacity(tile.len());
                for f in 0..s.frames {
                    for y in 0..s.height {
                        for x in (0..s.width).rev() {
                            let at = ((f * s.height + y) * s.width + x) * s.channels;
                            m.extend_from_slice(&tile[at..at + s.channels]);
                        }
                    }
                }
                out.push(m);
            }
        }
        out
    }
}

/// How training instances are drawn.
#[derive(Clone, Copy, Debug)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub timesteps: usize,
    pub flip: bool,
    pub anchor: bool,
    /// Draw a missing count uniformly from `0..=N/4` per instance.
    pub masked: bool,
    pub content_dim: usize,
}

/// One corrupted training batch; every row-indexed tensor is `[B, N, ·]`.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub pixels: Tensor<T>,
    /// Clean codes of each presentation row's true slot.
    pub codes: Tensor<T>,
    pub t: Vec<usize>,
    pub eps_pe: Tensor<T>,
    /// Rows pinned to their clean code; excluded from the code loss.
    pub anchored: Vec<bool>,
    /// Rows whose content is withheld.
    pub missing: Vec<bool>,
    /// Content noise, `[B, N, content_dim]`; zero on given rows.
    pub eps_content: Tensor<T>,
    /// Presentation → slot per instance.
    pub truth: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn pieces(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn masked_rows(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn cast<U: Scalar>(&self) -> TrainBatch<U> {
        TrainBatch {
            pixels: self.pixels.cast(),
            codes: self.codes.cast(),
            t: self.t.clone(),
            eps_pe: self.eps_pe.cast(),
            anchored: self.anchored.clone(),
            missing: self.missing.clone(),
            eps_content: self.eps_content.cast(),
            truth: self.truth.clone(),
        }
    }

    /// Applies the same row permutation to every instance.
    pub fn permute_rows(&self, perm: &[usize]) -> TrainBatch<T> {
        let (b, n) = (self.batch_size(), self.pieces());
        let rows = |t: &Tensor<T>| {
            let w = t.last_dim();
            let mut data = Vec::with_capacity(t.len());
            for bi in 0..b {
                for &r in perm {
                    data.extend_from_slice(&t.data()[(bi * n + r) * w..(bi * n + r + 1) * w]);
                }
            }
            Tensor::new(t.shape(), data).expect("same shape")
        };
        let flags = |v: &[bool]| (0..b).flat_map(|bi| perm.iter().map(move |&r| v[bi * n + r])).collect();
        TrainBatch {
            pixels: rows(&self.pixels),
            codes: rows(&self.codes),
            t: self.t.clone(),
            eps_pe: rows(&self.eps_pe),
            anchored: flags(&self.anchored),
            missing: flags(&self.missing),
            eps_content: rows(&self.eps_content),
            truth: self.truth.iter().map(|tr| perm.iter().map(|&r| tr[r]).collect()).collect(),
        }
    }
}

/// Draws a batch: sources in the given order, each shuffled (and optionally
/// flipped and masked) with fresh noise and a uniform timestep.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TrainSet,
    sources: &[usize],
    spec: &BatchSpec,
    table: &PeTable,
    rng: &mut R,
) -> Result<TrainBatch<f32>> {
    let n = data.layout.slots();
    let (p, e, d) = (data.shape.dim(), table.dim(), spec.content_dim);
    let b = sources.len();
    let mut pixels = Vec::with_capacity(b * n * p);
    let mut codes = Vec::with_capacity(b * n * e);
    let mut t = Vec::with_capacity(b);
    let mut eps_pe = Vec::with_capacity(b * n * e);
    let mut anchored = vec![false; b * n];
    let mut missing = vec![false; b * n];
    let mut eps_content = vec![0f32; b * n * d];
    let mut truth = Vec::with_capacity(b);
    let normal = |rng: &mut R| -> f32 { rng.sample::<f64, _>(StandardNormal) as f32 };
    for (bi, &src) in sources.iter().enumerate() {
        let tiles = if spec.flip && rng.random::<bool>() {
            data.flipped(src)
        } else {
            data.sources[src].clone()
        };
        let mut perm: Vec<usize> = (0..n).collect();
        if spec.anchor {
            perm[1..].shuffle(rng);
            anchored[bi * n] = true;
        } else {
            perm.shuffle(rng);
        }
        for &slot in &perm {
            pixels.extend_from_slice(&tiles[slot]);
            codes.extend(table.row(slot).iter().map(|&v| v as f32));
        }
        t.push(rng.random_range(1..=spec.timesteps));
        eps_pe.extend((0..n * e).map(|_| normal(rng)));
        if spec.masked {
            let first = usize::from(spec.anchor);
            let k = rng.random_range(0..=mask_limit(n).min(n - first));
            for r in index::sample(rng, n - first, k) {
                let row = r + first;
                missing[bi * n + row] = true;
                for v in &mut eps_content[(bi * n + row) * d..(bi * n + row + 1) * d] {
                    *v = normal(rng);
                }
            }
        }
        truth.push(perm);
    }
    Ok(TrainBatch {
        pixels: Tensor::new(&[b, n, p], pixels)?,
        codes: Tensor::new(&[b, n, e], codes)?,
        t,
        eps_pe: Tensor::new(&[b, n, e], eps_pe)?,
        anchored,
        missing,
        eps_content: Tensor::new(&[b, n, d], eps_content)?,
        truth,
    })
}
