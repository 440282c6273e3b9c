//! Sinusoidal slot codes for sequences (16-d) and grids (32-d), plus the
//! MLP that lifts a code to token width.
//!
//! A 1D code interleaves `sin(l / 1000^(2i/16))` and `cos(l / 1000^(2i/16))`
//! for `i = 0..8`. A grid code is `[code(x), code(y)]` with `x` the column.

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const TEMPORAL_DIM: usize = 16;
pub const SPATIAL_DIM: usize = 2 * TEMPORAL_DIM;
const BASE: f64 = 1000.0;

/// Arrangement of puzzle slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layout {
    /// Row-major grid; slot `k` sits at column `k % cols`, row `k / cols`.
    Grid { rows: usize, cols: usize },
    Sequence { len: usize },
}

impl Layout {
    pub fn square(n: usize) -> Self {
        Layout::Grid { rows: n, cols: n }
    }

    pub fn slots(&self) -> usize {
        match *self {
            Layout::Grid { rows, cols } => rows * cols,
            Layout::Sequence { len } => len,
        }
    }

    pub fn code_dim(&self) -> usize {
        match self {
            Layout::Grid { .. } => SPATIAL_DIM,
            Layout::Sequence { .. } => TEMPORAL_DIM,
        }
    }

    /// `(x, y)` of a grid slot; sequences report `(k, 0)`.
    pub fn coords(&self, slot: usize) -> (usize, usize) {
        match *self {
            Layout::Grid { cols, .. } => (slot % cols, slot / cols),
            Layout::Sequence { .. } => (slot, 0),
        }
    }

    pub fn code(&self, slot: usize) -> Vec<f64> {
        match self {
            Layout::Grid { .. } => {
                let (x, y) = self.coords(slot);
                encode_2d(x, y)
            }
            Layout::Sequence { .. } => encode_1d(slot),
        }
    }
}

pub fn encode_1d(l: usize) -> Vec<f64> {
    let pos = l as f64;
    let mut code = Vec::with_capacity(TEMPORAL_DIM);
    for i in 0..TEMPORAL_DIM / 2 {
        let freq = BASE.powf((2 * i) as f64 / TEMPORAL_DIM as f64);
        code.push((pos / freq).sin());
        code.push((pos / freq).cos());
    }
    code
}

pub fn encode_2d(x: usize, y: usize) -> Vec<f64> {
    let mut code = encode_1d(x);
    code.extend(encode_1d(y));
    code
}

/// True codes of every slot of a layout, one row per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PeTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl PeTable {
    pub fn new(layout: &Layout) -> Result<Self> {
        if layout.slots() == 0 {
            return Err(Error::invalid("layout must have at least one slot"));
        }
        Ok(Self {
            dim: layout.code_dim(),
            rows: (0..layout.slots()).map(|k| layout.code(k)).collect(),
        })
    }

    /// Table from explicit rows (all of equal width).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("table rows must be non-empty and equally wide"));
        }
        Ok(Self { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.rows[slot]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Rows gathered in the given slot order as an `[order.len(), dim]` tensor.
    pub fn gather<T: Scalar>(&self, slots: &[usize]) -> Tensor<T> {
        let data = slots
            .iter()
            .flat_map(|&s| self.rows[s].iter().map(|&v| T::lit(v)))
            .collect();
        Tensor::new(&[slots.len(), self.dim], data).expect("gather shape")
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.gather(&order)
    }
}

pub fn pe_table(layout: &Layout) -> Result<PeTable> {
    PeTable::new(layout)
}

/// Tape handles of the code-to-token MLP.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `linear → GELU → linear` applied to every code row of `codes[.., dim]`.
pub fn project<T: Scalar>(g: &mut Graph<T>, codes: Var, p: &Projection) -> Result<Var> {
    let h = g.affine(codes, p.w1, p.b1)?;
    let h = g.gelu(h)?;
    Ok(g.affine(h, p.w2, p.b2)?)
}
