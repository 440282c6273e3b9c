use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorlab::Tensor;

use super::{ddpm_step, standard_normal, Anchor, DiffusionState, NoiseSchedule, StepOptions};
use crate::error::{Error, Result};
use crate::posenc::Layout;

/// One puzzle as the solver sees it.
#[derive(Clone, Debug)]
pub struct PuzzleQuery {
    /// Seeds this puzzle's private random stream together with the solve seed.
    pub id: u64,
    /// `[N, piece_dim]` pixels in `[-1, 1]`; rows of missing pieces are ignored.
    pub pieces: Tensor<f32>,
    pub layout: Layout,
    /// Presentation rows whose content is withheld.
    pub missing: Vec<usize>,
    /// Presentation row known to occupy slot 0.
    pub anchor: Option<usize>,
}

impl PuzzleQuery {
    pub fn len(&self) -> usize {
        self.pieces.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, content_dim: usize) -> Result<()> {
        let n = self.len();
        if self.pieces.rank() != 2 || n != self.layout.slots() {
            return Err(Error::invalid(format!(
                "puzzle {}: {:?} pieces for a layout of {} slots",
                self.id,
                self.pieces.shape(),
                self.layout.slots()
            )));
        }
        if self.missing.len() >= n && n > 0 {
            return Err(Error::invalid(format!(
                "puzzle {}: {} missing of {n} pieces",
                self.id,
                self.missing.len()
            )));
        }
        let mut seen = vec![false; n];
        for &m in &self.missing {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!("puzzle {}: bad missing row {m}", self.id)));
            }
        }
        if !self.missing.is_empty() && content_dim == 0 {
            return Err(Error::invalid("model cannot generate missing content"));
        }
        if let Some(a) = self.anchor {
            if a >= n || seen[a] {
                return Err(Error::invalid(format!("puzzle {}: anchor row {a} unusable", self.id)));
            }
        }
        Ok(())
    }
}

/// Everything the noise predictor sees at one reverse step of one puzzle.
#[derive(Clone, Copy, Debug)]
pub struct StepQuery<'a> {
    pub query: &'a PuzzleQuery,
    pub pe: &'a Tensor<f64>,
    /// `[missing, content_dim]` noisy tokens, ordered like `query.missing`.
    pub content: &'a Tensor<f64>,
    /// Timestep on the schedule the predictor was trained with.
    pub t: usize,
}

/// Anything that predicts the injected noise: the denoiser or a scripted oracle.
pub trait NoisePredictor: Sync {
    /// Width of generated content tokens; 0 when masked solving is unsupported.
    fn content_dim(&self) -> usize;

    /// `(ε̂_pe, ε̂_content)` per query. Every query in a call has the same piece count.
    fn predict(&self, batch: &[StepQuery<'_>]) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>>;
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub seed: u64,
    /// Visit every `stride`-th timestep.
    pub stride: usize,
    pub clip_pe: bool,
    /// Puzzles per predictor call.
    pub batch: usize,
    /// Worker threads.
    pub jobs: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            stride: 1,
            clip_pe: true,
            batch: 64,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Estimated clean code of every presentation row.
    pub pe: Tensor<f64>,
    /// Generated content tokens of the missing rows.
    pub content: Tensor<f64>,
}

struct Chain {
    state: DiffusionState,
    rng: ChaCha8Rng,
    anchors: Vec<Anchor>,
}

fn run_chunk<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    queries: &[&PuzzleQuery],
    opts: &SolveOptions,
) -> Result<Vec<Solution>> {
    let width = model.content_dim();
    let mut chains: Vec<Chain> = queries
        .iter()
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(q.id);
            let mut pe = standard_normal(&mut rng, &[q.len(), q.layout.code_dim()]);
            let content = standard_normal(&mut rng, &[q.missing.len(), width]);
            let anchors: Vec<Anchor> = q
                .anchor
                .map(|row| Anchor {
                    row,
                    code: q.layout.code(0),
                })
                .into_iter()
                .collect();
            for a in &anchors {
                pe.row_mut(a.row).copy_from_slice(&a.code);
            }
            Chain {
                state: DiffusionState {
                    pe,
                    content,
                    t: sched.len(),
                },
                rng,
                anchors,
            }
        })
        .collect();
    for t in (1..=sched.len()).rev() {
        let steps: Vec<StepQuery<'_>> = chains
            .iter()
            .zip(queries)
            .map(|(c, q)| StepQuery {
                query: q,
                pe: &c.state.pe,
                content: &c.state.content,
                t: sched.model_t(t),
            })
            .collect();
        let preds = model.predict(&steps)?;
        drop(steps);
        if preds.len() != chains.len() {
            return Err(Error::invalid("predictor returned the wrong number of results"));
        }
        for (chain, (eps_pe, eps_content)) in chains.iter_mut().zip(preds) {
            let step_opts = StepOptions {
                clip_pe: opts.clip_pe,
                anchors: &chain.anchors,
            };
            chain.state = ddpm_step(&chain.state, &eps_pe, &eps_content, sched, &step_opts, &mut chain.rng)?;
        }
    }
    Ok(chains
        .into_iter()
        .map(|c| Solution {
            pe: c.state.pe,
            content: c.state.content,
        })
        .collect())
}

/// Solves many puzzles; results come back in input order.
///
/// Each puzzle draws from its own stream derived from `(opts.seed, query.id)`,
/// so a puzzle's result does not depend on what it was batched with.
pub fn solve_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    queries: &[PuzzleQuery],
    opts: &SolveOptions,
) -> Result<Vec<Solution>> {
    for q in queries {
        q.validate(model.content_dim())?;
    }
    let sampling = sched.respaced(opts.stride)?;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_len.entry(q.len()).or_default().push(i);
    }
    let chunks: Vec<Vec<usize>> = by_len
        .values()
        .flat_map(|idx| idx.chunks(opts.batch.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    let solve = |chunk: &Vec<usize>| {
        let qs: Vec<&PuzzleQuery> = chunk.iter().map(|&i| &queries[i]).collect();
        run_chunk(model, &sampling, &qs, opts)
    };
    let jobs = opts.jobs.max(1).min(chunks.len().max(1));
    let results: Vec<Result<Vec<Solution>>> = if jobs == 1 {
        chunks.iter().map(solve).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Solution>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let chunks = &chunks;
                    let solve = &solve;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(jobs)
                            .map(|c| (c, solve(&chunks[c])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("solver worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk solved")).collect()
    };
    let mut out: Vec<Option<Solution>> = (0..queries.len()).map(|_| None).collect();
    for (chunk, res) in chunks.iter().zip(results) {
        for (&i, sol) in chunk.iter().zip(res?) {
            out[i] = Some(sol);
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every puzzle solved")).collect())
}

/// Runs the reverse chain for a puzzle whose pieces are all present.
pub fn solve_positions<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    query: &PuzzleQuery,
    opts: &SolveOptions,
) -> Result<Tensor<f64>> {
    if !query.missing.is_empty() {
        return Err(Error::invalid("solve_positions needs every piece; use solve_masked"));
    }
    let mut sols = solve_batch(model, sched, std::slice::from_ref(query), opts)?;
    Ok(sols.remove(0).pe)
}

/// Denoises all slot codes jointly with content tokens for the missing rows.
pub fn solve_masked<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    query: &PuzzleQuery,
    opts: &SolveOptions,
) -> Result<Solution> {
    let mut sols = solve_batch(model, sched, std::slice::from_ref(query), opts)?;
    Ok(sols.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::pe_table;

    /// Predicts the exact remaining noise towards a known target.
    struct Oracle {
        sched: NoiseSchedule,
        targets: Vec<Tensor<f64>>,
        content: Vec<Tensor<f64>>,
    }

    impl NoisePredictor for Oracle {
        fn content_dim(&self) -> usize {
            3
        }

        fn predict(&self, batch: &[StepQuery<'_>]) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
            let ab = |t| self.sched.alpha_bar(t);
            Ok(batch
                .iter()
                .map(|s| {
                    let a = ab(s.t);
                    let id = s.query.id as usize;
                    let f = |x: f64, c: f64| (x - a.sqrt() * c) / (1.0 - a).sqrt();
                    let pe = s.pe.zip_map(&self.targets[id], "oracle", f).unwrap();
                    let target = Tensor::from_fn(s.content.shape(), |i| self.content[id].data()[i]);
                    let content = s.content.zip_map(&target, "oracle", f).unwrap();
                    (pe, content)
                })
                .collect())
        }
    }

    fn query(id: u64, missing: Vec<usize>) -> PuzzleQuery {
        PuzzleQuery {
            id,
            pieces: Tensor::zeros(&[4, 2]),
            layout: Layout::square(2),
            missing,
            anchor: None,
        }
    }

    fn oracle() -> Oracle {
        let table = pe_table(&Layout::square(2)).unwrap();
        Oracle {
            sched: NoiseSchedule::default_linear(),
            targets: vec![table.gather(&[2, 0, 3, 1]), table.gather(&[0, 1, 2, 3])],
            content: vec![Tensor::full(&[1, 3], 0.5), Tensor::full(&[1, 3], -0.25)],
        }
    }

    #[test]
    fn oracle_chain_recovers_targets_with_striding() {
        let o = oracle();
        let opts = SolveOptions {
            stride: 10,
            ..Default::default()
        };
        let sol = solve_masked(&o, &o.sched, &query(0, vec![1]), &opts).unwrap();
        assert!(sol.pe.max_abs_diff(&o.targets[0]).unwrap() < 1e-6);
        assert!(sol.content.max_abs_diff(&o.content[0]).unwrap() < 1e-6);
    }

    #[test]
    fn batched_equals_single_and_is_seeded() {
        let o = oracle();
        let opts = SolveOptions {
            stride: 50,
            batch: 2,
            clip_pe: false,
            ..Default::default()
        };
        let qs = vec![query(0, vec![]), query(1, vec![])];
        let both = solve_batch(&o, &o.sched, &qs, &opts).unwrap();
        let one = solve_batch(&o, &o.sched, &qs[1..], &opts).unwrap();
        assert_eq!(both[1], one[0]);
        let threaded = solve_batch(
            &o,
            &o.sched,
            &qs,
            &SolveOptions {
                batch: 1,
                jobs: 2,
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(both, threaded);
    }

    #[test]
    fn rejects_inconsistent_queries() {
        let o = oracle();
        let opts = SolveOptions::default();
        let mut bad = query(0, vec![0, 1, 2, 3]);
        assert!(solve_batch(&o, &o.sched, std::slice::from_ref(&bad), &opts).is_err());
        bad.missing = vec![];
        bad.layout = Layout::square(3);
        assert!(solve_batch(&o, &o.sched, &[bad], &opts).is_err());
        let mut anchored_missing = query(0, vec![1]);
        anchored_missing.anchor = Some(1);
        assert!(solve_batch(&o, &o.sched, &[anchored_missing], &opts).is_err());
        assert!(solve_positions(&o, &o.sched, &query(0, vec![1]), &opts).is_err());
    }
}
