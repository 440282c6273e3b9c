use std::ops::RangeInclusive;

use serde::Serialize;
use serde_json::Value;

use crate::assignment::{match_codes, Assignment, Matcher};
use crate::denoiser::Denoiser;
use crate::diffusion::{solve_batch, NoisePredictor, NoiseSchedule, SolveOptions};
use crate::error::{Error, Result};
use crate::metrics::{correct_pieces, kendall_normalized, piece_accuracy, piece_accuracy_given, puzzle_accuracy};
use crate::posenc::PeTable;
use crate::puzzlekit::{apply_mask, sample_rng, Piece, PuzzleInstance};

/// Outcome of solving one puzzle.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub assignment: Assignment,
    /// Against the stored truth; `None` for single-piece puzzles.
    pub kendall: Option<f64>,
    pub correct_pieces: usize,
    /// Decoded content of each missing row, in `missing` order.
    pub generated: Vec<(usize, Piece)>,
}

/// Samples, matches and scores every puzzle. Query ids are puzzle indices.
pub fn solve_instances<P: NoisePredictor + ?Sized>(
    model: &P,
    decoder: Option<&Denoiser>,
    sched: &NoiseSchedule,
    puzzles: &[PuzzleInstance],
    opts: &SolveOptions,
    matcher: Matcher,
) -> Result<Vec<SolveReport>> {
    let queries: Vec<_> = puzzles
        .iter()
        .enumerate()
        .map(|(i, p)| p.solver_view().query(i as u64))
        .collect();
    let sols = solve_batch(model, sched, &queries, opts)?;
    puzzles
        .iter()
        .zip(sols)
        .map(|(p, sol)| {
            let table = PeTable::new(&p.layout())?;
            let assignment = match_codes(&sol.pe, &table, matcher)?;
            let kendall = if p.len() >= 2 {
                Some(kendall_normalized(&assignment.permutation, p.truth())?)
            } else {
                None
            };
            let mut generated = Vec::new();
            if let (Some(dec), false) = (decoder, p.missing().is_empty()) {
                if dec.config.masked {
                    let pixels = dec.decode(&sol.content)?;
                    for (j, &row) in p.missing().iter().enumerate() {
                        generated.push((row, Piece::from_normalized(p.piece_shape(), pixels.row(j))?));
                    }
                }
            }
            Ok(SolveReport {
                correct_pieces: correct_pieces(&assignment.permutation, p.truth()),
                assignment,
                kendall,
                generated,
            })
        })
        .collect()
}

/// One `solve` result as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SolveResult {
    pub puzzle: String,
    pub permutation: Vec<usize>,
    pub distances: Vec<f64>,
    pub missing_generated: Vec<String>,
    pub kendall: Option<f64>,
    pub correct_pieces: usize,
}

/// JSON Schema of a `solve` result (one object, or an array of them).
pub const RESULT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "jpdvt solve result",
  "type": "object",
  "additionalProperties": false,
  "required": ["puzzle", "permutation", "distances", "missing_generated", "kendall", "correct_pieces"],
  "properties": {
    "puzzle": { "type": "string" },
    "permutation": {
      "type": "array",
      "items": { "type": "integer", "minimum": 0 },
      "description": "slot of each presentation row; a permutation of 0..N-1"
    },
    "distances": {
      "type": "array",
      "items": { "type": "number", "minimum": 0 },
      "description": "L2 distance of each row's estimate to its assigned slot code; same length as permutation"
    },
    "missing_generated": { "type": "array", "items": { "type": "string" } },
    "kendall": { "type": ["number", "null"], "minimum": 0, "maximum": 1 },
    "correct_pieces": { "type": "integer", "minimum": 0 }
  }
}
"#;

const RESULT_FIELDS: [&str; 6] = [
    "puzzle",
    "permutation",
    "distances",
    "missing_generated",
    "kendall",
    "correct_pieces",
];

fn schema_error(msg: impl Into<String>) -> Error {
    Error::invalid(format!("result does not match the schema: {}", msg.into()))
}

fn index_array(v: &Value, field: &str) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| schema_error(format!("{field} is not an array")))?
        .iter()
        .map(|x| x.as_u64().ok_or_else(|| schema_error(format!("{field} holds a non-index"))))
        .collect()
}

/// Checks one result object against [`RESULT_SCHEMA`], including the
/// bijection and length constraints stated in its descriptions.
pub fn validate_result(v: &Value) -> Result<()> {
    let obj = v.as_object().ok_or_else(|| schema_error("not an object"))?;
    for f in RESULT_FIELDS {
        if !obj.contains_key(f) {
            return Err(schema_error(format!("missing field {f}")));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !RESULT_FIELDS.contains(&k.as_str())) {
        return Err(schema_error(format!("unexpected field {extra}")));
    }
    if !obj["puzzle"].is_string() {
        return Err(schema_error("puzzle is not a string"));
    }
    let perm = index_array(&obj["permutation"], "permutation")?;
    let mut seen = vec![false; perm.len()];
    for &p in &perm {
        let p = p as usize;
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(schema_error("permutation is not a bijection"));
        }
    }
    let dist = obj["distances"]
        .as_array()
        .ok_or_else(|| schema_error("distances is not an array"))?;
    if dist.len() != perm.len() || dist.iter().any(|d| !d.as_f64().is_some_and(|d| d >= 0.0)) {
        return Err(schema_error("distances must be one non-negative number per piece"));
    }
    let gen = obj["missing_generated"]
        .as_array()
        .ok_or_else(|| schema_error("missing_generated is not an array"))?;
    if gen.iter().any(|g| !g.is_string()) {
        return Err(schema_error("missing_generated holds a non-string"));
    }
    match &obj["kendall"] {
        Value::Null => {}
        k if k.as_f64().is_some_and(|k| (0.0..=1.0).contains(&k)) => {}
        _ => return Err(schema_error("kendall must be null or in [0, 1]")),
    }
    let correct = obj["correct_pieces"]
        .as_u64()
        .ok_or_else(|| schema_error("correct_pieces is not a count"))?;
    if correct as usize > perm.len() {
        return Err(schema_error("correct_pieces exceeds the piece count"));
    }
    Ok(())
}

/// Validates a `solve` output document: one result or an array of results.
pub fn validate_document(v: &Value) -> Result<()> {
    match v {
        Value::Array(items) => items.iter().try_for_each(validate_result),
        other => validate_result(other),
    }
}

pub const SWEEP_HEADER: &str = "missing,puzzle_acc,piece_acc,kendall_mean,kendall_std,n";
pub const GIVEN_HEADER: &str = "missing,piece_acc_given,n";

/// Checks a CSV against its header contract: exact header, then rows of
/// numbers with one value per column.
pub fn validate_csv(text: &str, header: &str) -> Result<usize> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::invalid(format!("CSV header is not {header:?}")));
    }
    let cols = header.split(',').count();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != cols || vals.iter().any(|v| v.parse::<f64>().is_err()) {
            return Err(Error::invalid(format!("CSV row {} is malformed: {line:?}", i + 2)));
        }
        rows += 1;
    }
    Ok(rows)
}

/// Metrics at one missing count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub missing: usize,
    pub puzzle_acc: f64,
    /// Missing pieces included in the denominator.
    pub piece_acc: f64,
    pub piece_acc_given: f64,
    pub kendall_mean: f64,
    pub kendall_std: f64,
    pub n: usize,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.missing, self.puzzle_acc, self.piece_acc, self.kendall_mean, self.kendall_std, self.n
        )
    }

    pub fn given_csv(&self) -> String {
        format!("{},{},{}", self.missing, self.piece_acc_given, self.n)
    }
}

/// Scores a set of solve reports.
pub fn summarize(missing: usize, puzzles: &[PuzzleInstance], reports: &[SolveReport]) -> Result<SweepRow> {
    let perms: Vec<Vec<usize>> = reports.iter().map(|r| r.assignment.permutation.clone()).collect();
    let truths: Vec<Vec<usize>> = puzzles.iter().map(|p| p.truth().to_vec()).collect();
    let masks: Vec<Vec<usize>> = puzzles.iter().map(|p| p.missing().to_vec()).collect();
    let ks: Vec<f64> = reports.iter().filter_map(|r| r.kendall).collect();
    let mean = ks.iter().sum::<f64>() / ks.len().max(1) as f64;
    let std = if ks.len() > 1 {
        (ks.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (ks.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SweepRow {
        missing,
        puzzle_acc: puzzle_accuracy(&perms, &truths)?,
        piece_acc: piece_accuracy(&perms, &truths)?,
        piece_acc_given: piece_accuracy_given(&perms, &truths, &masks)?,
        kendall_mean: mean,
        kendall_std: std,
        n: puzzles.len(),
    })
}

/// Withholds `k` random pieces of puzzle `index`, reproducibly.
pub fn masked_copy(p: &PuzzleInstance, k: usize, seed: u64, index: usize) -> Result<PuzzleInstance> {
    if k == 0 {
        return apply_mask(p, 0, true, &mut sample_rng(seed, 0));
    }
    let mut rng = sample_rng(seed.wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)), index as u64);
    apply_mask(p, k, true, &mut rng)
}

/// Solves every puzzle once per missing count in `range`.
pub fn mask_sweep<P: NoisePredictor + ?Sized>(
    model: &P,
    decoder: Option<&Denoiser>,
    sched: &NoiseSchedule,
    puzzles: &[PuzzleInstance],
    range: RangeInclusive<usize>,
    opts: &SolveOptions,
    matcher: Matcher,
) -> Result<Vec<SweepRow>> {
    if puzzles.is_empty() {
        return Err(Error::invalid("no puzzles to evaluate"));
    }
    range
        .map(|k| {
            let masked = puzzles
                .iter()
                .enumerate()
                .map(|(i, p)| masked_copy(p, k, opts.seed, i))
                .collect::<Result<Vec<_>>>()?;
            let reports = solve_instances(model, decoder, sched, &masked, opts, matcher)?;
            summarize(k, &masked, &reports)
        })
        .collect()
}
