use tensorlab::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use super::data::TrainBatch;
use crate::denoiser::{decode_content, forward, patch_embed, DenoiserConfig, MaskedRows};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub content: f64,
    pub pe: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 0.8,
            pe: 0.2,
            aux: 0.05,
        }
    }
}

/// `content·c + pe·p` when any row is masked, otherwise `p`; the auxiliary
/// term is added on top.
pub fn combine(weights: &LossWeights, content: Option<f64>, pe: f64, aux: Option<f64>) -> f64 {
    let main = match content {
        Some(c) => weights.content * c + weights.pe * pe,
        None => pe,
    };
    main + aux.map_or(0.0, |a| weights.aux * a)
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub pe: Var,
    pub content: Option<Var>,
    pub aux: Option<Var>,
}

/// Mean of `(a - b)²` over the rows flagged in `rows` (`[B·N]` flags).
fn masked_mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, rows: &[bool]) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let width = shape[shape.len() - 1];
    let count = rows.iter().filter(|&&r| r).count();
    if count == 0 {
        return Err(Error::invalid("no rows to score"));
    }
    let mask = g.constant(Tensor::from_fn(&shape, |i| if rows[i / width] { T::one() } else { T::zero() }));
    let d = g.sub(a, b)?;
    let s = g.square(d)?;
    let s = g.mul(s, mask)?;
    let s = g.sum(s)?;
    Ok(g.scale(s, T::lit(1.0 / (count * width) as f64))?)
}

/// Corrupts each instance's codes at its own timestep; anchored rows stay clean.
pub fn noisy_codes<T: Scalar>(batch: &TrainBatch<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let (n, e) = (batch.pieces(), batch.codes.last_dim());
    let mut out = batch.codes.clone();
    for (bi, &t) in batch.t.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        for r in 0..n {
            if batch.anchored[bi * n + r] {
                continue;
            }
            let at = (bi * n + r) * e;
            for k in at..at + e {
                out.data_mut()[k] = a * batch.codes.data()[k] + s * batch.eps_pe.data()[k];
            }
        }
    }
    Ok(out)
}

/// Patch embeddings of every row of `batch`: the clean content tokens.
pub fn clean_tokens<T: Scalar>(params: &ParamStore<T>, batch: &TrainBatch<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let w = params.bind_frozen(&mut g);
    let pixels = g.constant(batch.pixels.clone());
    let tokens = patch_embed(&mut g, &w, pixels)?;
    Ok(g.value(tokens).clone())
}

/// Builds the training loss of one batch on `g`.
///
/// Missing rows are noised in token space: their clean target is the
/// (detached) patch embedding of the withheld piece, or `clean` when given.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &Bound,
    cfg: &DenoiserConfig,
    batch: &TrainBatch<T>,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    clean: Option<&Tensor<T>>,
) -> Result<LossParts> {
    let (b, n) = (batch.batch_size(), batch.pieces());
    if b == 0 || n == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    if batch.t.iter().any(|&t| t > cfg.timesteps) || sched.len() != cfg.timesteps {
        return Err(Error::invalid("schedule length does not match the model"));
    }
    let pixels = g.constant(batch.pixels.clone());
    let tokens = patch_embed(g, w, pixels)?;
    let noisy_pe = g.constant(noisy_codes(batch, sched)?);

    let any_missing = batch.missing.iter().any(|&m| m);
    if any_missing && !cfg.masked {
        return Err(Error::invalid("masked rows need a masked model"));
    }
    let masked = if any_missing {
        let d = cfg.hidden;
        let clean = match clean {
            Some(c) if c.shape() == [b, n, d] => c.clone(),
            Some(c) => {
                return Err(Error::invalid(format!(
                    "clean tokens {:?} do not match [{b}, {n}, {d}]",
                    c.shape()
                )))
            }
            None => g.value(tokens).clone(),
        };
        let mut content = Tensor::zeros(&[b, n, d]);
        for (bi, &t) in batch.t.iter().enumerate() {
            let ab = sched.alpha_bar(t);
            let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            for r in 0..n {
                if batch.missing[bi * n + r] {
                    let at = (bi * n + r) * d;
                    for k in at..at + d {
                        content.data_mut()[k] = a * clean.data()[k] + s * batch.eps_content.data()[k];
                    }
                }
            }
        }
        let flags = Tensor::from_fn(&[b, n, 1], |i| if batch.missing[i] { T::one() } else { T::zero() });
        Some(MaskedRows { flags, content })
    } else {
        None
    };
    let out = forward(g, w, cfg, tokens, noisy_pe, &batch.t, masked.as_ref())?;

    let scored: Vec<bool> = batch.anchored.iter().map(|a| !a).collect();
    let eps_pe = g.constant(batch.eps_pe.clone());
    let pe = masked_mse(g, out.pe, eps_pe, &scored)?;
    let content = match (masked.is_some(), out.content) {
        (true, Some(c)) => {
            let eps = g.constant(batch.eps_content.clone());
            Some(masked_mse(g, c, eps, &batch.missing)?)
        }
        _ => None,
    };
    let aux = if cfg.masked {
        let decoded = decode_content(g, w, tokens)?;
        Some(g.mse(decoded, pixels)?)
    } else {
        None
    };
    let mut total = match content {
        Some(c) => {
            let c = g.scale(c, T::lit(weights.content))?;
            let p = g.scale(pe, T::lit(weights.pe))?;
            g.add(c, p)?
        }
        None => pe,
    };
    if let Some(a) = aux {
        let a = g.scale(a, T::lit(weights.aux))?;
        total = g.add(total, a)?;
    }
    Ok(LossParts { total, pe, content, aux })
}
