//! The transformer noise predictor.
//!
//! Each piece is one token. Noisy slot codes are lifted by a small MLP and
//! added to the piece token (spatial) or concatenated and fused (temporal).
//! Blocks are DiT-style: the timestep embedding drives shift, scale and gate
//! of a parameter-free normalization around attention and around the MLP.
//! Modulation and output heads start at zero, so every block starts as the
//! identity. The initial code-noise prediction is zero; the content head adds
//! its output to the noisy tokens, so it starts by returning them unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use tensorlab::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::diffusion::{NoisePredictor, StepQuery};
use crate::error::{Error, Result};
use crate::posenc::{self, Projection, SPATIAL_DIM, TEMPORAL_DIM};
use crate::puzzlekit::PieceShape;

const NORM_EPS: f64 = 1e-6;
const MODS: [&str; 6] = ["attn_shift", "attn_scale", "attn_gate", "mlp_shift", "mlp_scale", "mlp_gate"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Spatial,
    Temporal,
}

impl Modality {
    pub fn pe_dim(self) -> usize {
        match self {
            Modality::Spatial => SPATIAL_DIM,
            Modality::Temporal => TEMPORAL_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub modality: Modality,
    pub piece: PieceShape,
    /// Adds the content-noise head, the missing-row embedding and the pixel decoder.
    pub masked: bool,
    /// Width of the sinusoidal timestep features.
    pub time_freq: usize,
    /// Largest timestep the model is conditioned on.
    pub timesteps: usize,
}

impl DenoiserConfig {
    pub fn desk(modality: Modality, piece: PieceShape) -> Self {
        Self {
            layers: 4,
            hidden: 128,
            mlp: 512,
            heads: 4,
            modality,
            piece,
            masked: false,
            time_freq: 64,
            timesteps: 1000,
        }
    }

    pub fn pe_dim(&self) -> usize {
        self.modality.pe_dim()
    }

    pub fn piece_dim(&self) -> usize {
        self.piece.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("mlp", self.mlp),
            ("heads", self.heads),
            ("time_freq", self.time_freq),
            ("timesteps", self.timesteps),
            ("piece size", self.piece_dim()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("denoiser {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !self.time_freq.is_multiple_of(2) {
            return Err(Error::invalid("time_freq must be even"));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, p, e) = (self.hidden, self.piece_dim(), self.pe_dim());
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch.w".into(), vec![p, d]),
            ("patch.b".into(), vec![d]),
            ("pe.w1".into(), vec![e, d]),
            ("pe.b1".into(), vec![d]),
            ("pe.w2".into(), vec![d, d]),
            ("pe.b2".into(), vec![d]),
        ];
        if self.modality == Modality::Temporal {
            out.push(("fuse.w".into(), vec![2 * d, d]));
            out.push(("fuse.b".into(), vec![d]));
        }
        if self.masked {
            out.push(("mask.emb".into(), vec![1, d]));
        }
        out.extend([
            ("time.w1".into(), vec![self.time_freq, d]),
            ("time.b1".into(), vec![d]),
            ("time.w2".into(), vec![d, d]),
            ("time.b2".into(), vec![d]),
        ]);
        for l in 0..self.layers {
            for m in MODS {
                out.push((format!("blocks.{l}.{m}.w"), vec![d, d]));
                out.push((format!("blocks.{l}.{m}.b"), vec![d]));
            }
            for q in ["q", "k", "v", "out"] {
                out.push((format!("blocks.{l}.attn.{q}.w"), vec![d, d]));
                out.push((format!("blocks.{l}.attn.{q}.b"), vec![d]));
            }
            out.push((format!("blocks.{l}.mlp.w1"), vec![d, self.mlp]));
            out.push((format!("blocks.{l}.mlp.b1"), vec![self.mlp]));
            out.push((format!("blocks.{l}.mlp.w2"), vec![self.mlp, d]));
            out.push((format!("blocks.{l}.mlp.b2"), vec![d]));
        }
        for m in ["final_shift", "final_scale"] {
            out.push((format!("{m}.w"), vec![d, d]));
            out.push((format!("{m}.b"), vec![d]));
        }
        out.push(("head.pe.w".into(), vec![d, e]));
        out.push(("head.pe.b".into(), vec![e]));
        if self.masked {
            out.push(("head.content.w".into(), vec![d, d]));
            out.push(("head.content.b".into(), vec![d]));
            out.push(("decoder.w".into(), vec![d, p]));
            out.push(("decoder.b".into(), vec![p]));
        }
        out
    }
}

fn is_zero_init(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.starts_with("head.")
        || name.starts_with("final_")
        || MODS.iter().any(|m| name.contains(m))
}

/// Training initialization: Xavier-uniform matrices, N(0, 0.02) for the
/// timestep MLP and the missing-row embedding, zeros for biases, modulation
/// and heads.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let small = Normal::new(0.0, 0.02).expect("valid normal");
    for (name, shape) in cfg.param_shapes() {
        let t = if is_zero_init(&name) {
            Tensor::zeros(&shape)
        } else if name.starts_with("time.") || name == "mask.emb" {
            Tensor::from_fn(&shape, |_| T::lit(small.sample(rng)))
        } else {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let u = Uniform::new_inclusive(-limit, limit).expect("valid range");
            Tensor::from_fn(&shape, |_| T::lit(u.sample(rng)))
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Overwrites every parameter with N(0, std²) draws (test and diagnostic use).
pub fn randomize_params<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("valid normal");
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = T::lit(dist.sample(rng));
        }
    }
}

/// Checks names and shapes of a parameter store against a config.
pub fn check_params<T: Scalar>(cfg: &DenoiserConfig, store: &ParamStore<T>) -> Result<()> {
    let want = cfg.param_shapes();
    if want.len() != store.len() {
        return Err(Error::invalid(format!(
            "expected {} parameters, found {}",
            want.len(),
            store.len()
        )));
    }
    for (name, shape) in want {
        let got = store.get(&name)?;
        if got.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "parameter {name}: expected {shape:?}, found {:?}",
                got.shape()
            )));
        }
    }
    Ok(())
}

/// Sinusoidal timestep features `[cos(t f_i), sin(t f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let t = t as f64;
    freqs.iter().map(|f| (t * f).cos()).chain(freqs.iter().map(|f| (t * f).sin())).collect()
}

/// Missing-row markers for a forward pass.
#[derive(Clone, Debug)]
pub struct MaskedRows<T> {
    /// `[B, N, 1]` with 1 on rows that carry noisy content.
    pub flags: Tensor<T>,
    /// `[B, N, hidden]` noisy content tokens; zero on given rows.
    pub content: Tensor<T>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub pe: Var,
    pub content: Option<Var>,
}

/// Flatten-and-project every piece: `[.., P] → [.., hidden]`.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, w: &Bound, pixels: Var) -> Result<Var> {
    Ok(g.affine(pixels, w.get("patch.w")?, w.get("patch.b")?)?)
}

/// Two-layer MLP over sinusoidal features: one `[hidden]` row per timestep.
pub fn timestep_embed<T: Scalar>(g: &mut Graph<T>, w: &Bound, cfg: &DenoiserConfig, ts: &[usize]) -> Result<Var> {
    for &t in ts {
        if t == 0 || t > cfg.timesteps {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", cfg.timesteps)));
        }
    }
    let feats: Vec<T> = ts
        .iter()
        .flat_map(|&t| timestep_features(t, cfg.time_freq))
        .map(T::lit)
        .collect();
    let x = g.constant(Tensor::new(&[ts.len(), cfg.time_freq], feats)?);
    let h = g.affine(x, w.get("time.w1")?, w.get("time.b1")?)?;
    let h = g.silu(h)?;
    Ok(g.affine(h, w.get("time.w2")?, w.get("time.b2")?)?)
}

/// Scaled dot-product attention of `[B, N, heads·d]` projections, heads merged back.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.shape(q)[2] / heads;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let logits = g.batch_matmul(qh, kh, true)?;
    let logits = g.scale(logits, T::lit(1.0 / (d as f64).sqrt()))?;
    let att = g.softmax(logits, 2)?;
    let mixed = g.batch_matmul(att, vh, false)?;
    Ok(g.merge_heads(mixed, heads)?)
}

fn modulated<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.normalize(x, 2, T::lit(NORM_EPS))?;
    let s = g.add_scalar(scale, T::one())?;
    let h = g.mul(h, s)?;
    Ok(g.add(h, shift)?)
}

fn modulation<T: Scalar>(g: &mut Graph<T>, w: &Bound, name: &str, cond: Var, n: usize) -> Result<Var> {
    let m = g.affine(cond, w.get(&format!("{name}.w"))?, w.get(&format!("{name}.b"))?)?;
    Ok(g.repeat_tokens(m, n)?)
}

/// Full pass from piece tokens `[B, N, hidden]` and noisy codes `[B, N, pe_dim]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &Bound,
    cfg: &DenoiserConfig,
    tokens: Var,
    noisy_pe: Var,
    ts: &[usize],
    masked: Option<&MaskedRows<T>>,
) -> Result<Outputs> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.hidden {
        return Err(Error::invalid(format!("tokens {shape:?} are not [B, N, {}]", cfg.hidden)));
    }
    let (b, n) = (shape[0], shape[1]);
    if g.shape(noisy_pe) != [b, n, cfg.pe_dim()] {
        return Err(Error::invalid(format!(
            "codes {:?} do not match tokens {shape:?}",
            g.shape(noisy_pe)
        )));
    }
    if ts.len() != b {
        return Err(Error::invalid(format!("{} timesteps for a batch of {b}", ts.len())));
    }
    let mut x = tokens;
    let mut noisy = None;
    if let Some(m) = masked {
        if !cfg.masked {
            return Err(Error::invalid("model was built without masked-content support"));
        }
        if m.flags.shape() != [b, n, 1] || m.content.shape() != shape.as_slice() {
            return Err(Error::invalid("masked-row tensors do not match the batch"));
        }
        let keep = Tensor::from_fn(&shape, |i| T::one() - m.flags.data()[i / cfg.hidden]);
        let keep = g.constant(keep);
        x = g.mul(x, keep)?;
        let c = g.constant(m.content.clone());
        x = g.add(x, c)?;
        noisy = Some(c);
        let flags = g.constant(m.flags.clone());
        let marker = g.linear(flags, w.get("mask.emb")?)?;
        x = g.add(x, marker)?;
    }
    let proj = Projection {
        w1: w.get("pe.w1")?,
        b1: w.get("pe.b1")?,
        w2: w.get("pe.w2")?,
        b2: w.get("pe.b2")?,
    };
    let pe_tok = posenc::project(g, noisy_pe, &proj)?;
    x = match cfg.modality {
        Modality::Spatial => g.add(x, pe_tok)?,
        Modality::Temporal => {
            let cat = g.concat(x, pe_tok)?;
            g.affine(cat, w.get("fuse.w")?, w.get("fuse.b")?)?
        }
    };

    let temb = timestep_embed(g, w, cfg, ts)?;
    let cond = g.silu(temb)?;
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let mods: Vec<Var> = MODS
            .iter()
            .map(|m| modulation(g, w, &p(m), cond, n))
            .collect::<Result<_>>()?;
        let h = modulated(g, x, mods[0], mods[1])?;
        let q = g.affine(h, w.get(&p("attn.q.w"))?, w.get(&p("attn.q.b"))?)?;
        let k = g.affine(h, w.get(&p("attn.k.w"))?, w.get(&p("attn.k.b"))?)?;
        let v = g.affine(h, w.get(&p("attn.v.w"))?, w.get(&p("attn.v.b"))?)?;
        let a = attention(g, q, k, v, cfg.heads)?;
        let a = g.affine(a, w.get(&p("attn.out.w"))?, w.get(&p("attn.out.b"))?)?;
        let a = g.mul(a, mods[2])?;
        x = g.add(x, a)?;

        let h = modulated(g, x, mods[3], mods[4])?;
        let h = g.affine(h, w.get(&p("mlp.w1"))?, w.get(&p("mlp.b1"))?)?;
        let h = g.gelu(h)?;
        let h = g.affine(h, w.get(&p("mlp.w2"))?, w.get(&p("mlp.b2"))?)?;
        let h = g.mul(h, mods[5])?;
        x = g.add(x, h)?;
    }
    let shift = modulation(g, w, "final_shift", cond, n)?;
    let scale = modulation(g, w, "final_scale", cond, n)?;
    let h = modulated(g, x, shift, scale)?;
    let pe = g.affine(h, w.get("head.pe.w")?, w.get("head.pe.b")?)?;
    let content = if cfg.masked {
        let c = g.affine(h, w.get("head.content.w")?, w.get("head.content.b")?)?;
        Some(match noisy {
            Some(n) => g.add(c, n)?,
            None => c,
        })
    } else {
        None
    };
    Ok(Outputs { pe, content })
}

/// Linear map from content tokens back to normalized pixels.
pub fn decode_content<T: Scalar>(g: &mut Graph<T>, w: &Bound, tokens: Var) -> Result<Var> {
    let dw = w.get("decoder.w").map_err(|_| Error::invalid("model has no content decoder"))?;
    Ok(g.affine(tokens, dw, w.get("decoder.b")?)?)
}

/// Denoiser configuration plus its single-precision weights.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore<f32>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    /// Token of each piece row: `[rows, P] → [rows, hidden]`.
    pub fn embed(&self, pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let w = self.params.bind_frozen(&mut g);
        let x = g.constant(pixels.clone());
        let y = patch_embed(&mut g, &w, x)?;
        Ok(g.value(y).clone())
    }

    /// Pixels of generated content tokens: `[rows, hidden] → [rows, P]`.
    pub fn decode(&self, tokens: &Tensor<f64>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let w = self.params.bind_frozen(&mut g);
        let x = g.constant(tokens.cast());
        let y = decode_content(&mut g, &w, x)?;
        Ok(g.value(y).clone())
    }

    /// Eager noise prediction for equally sized puzzles.
    pub fn predict_raw(
        &self,
        pixels: &Tensor<f32>,
        noisy_pe: &Tensor<f32>,
        ts: &[usize],
        masked: Option<&MaskedRows<f32>>,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let mut g = Graph::new();
        let w = self.params.bind_frozen(&mut g);
        let x = g.constant(pixels.clone());
        let tok = patch_embed(&mut g, &w, x)?;
        let pe = g.constant(noisy_pe.clone());
        let out = forward(&mut g, &w, &self.config, tok, pe, ts, masked)?;
        Ok((g.value(out.pe).clone(), out.content.map(|c| g.value(c).clone())))
    }
}

impl NoisePredictor for Denoiser {
    fn content_dim(&self) -> usize {
        if self.config.masked {
            self.config.hidden
        } else {
            0
        }
    }

    fn predict(&self, batch: &[StepQuery<'_>]) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
        let b = batch.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let n = batch[0].query.len();
        let (p, e, d) = (self.config.piece_dim(), self.config.pe_dim(), self.config.hidden);
        let mut pixels = Vec::with_capacity(b * n * p);
        let mut pe = Vec::with_capacity(b * n * e);
        let mut ts = Vec::with_capacity(b);
        let any_missing = batch.iter().any(|s| !s.query.missing.is_empty());
        let mut flags = vec![0f32; if any_missing { b * n } else { 0 }];
        let mut content = vec![0f32; if any_missing { b * n * d } else { 0 }];
        for (bi, s) in batch.iter().enumerate() {
            if s.query.len() != n || s.query.pieces.last_dim() != p || s.pe.shape() != [n, e] {
                return Err(Error::invalid(format!(
                    "puzzle {} does not fit the batch or the model",
                    s.query.id
                )));
            }
            pixels.extend_from_slice(s.query.pieces.data());
            pe.extend(s.pe.data().iter().map(|&v| v as f32));
            ts.push(s.t);
            for (j, &row) in s.query.missing.iter().enumerate() {
                flags[bi * n + row] = 1.0;
                let dst = &mut content[(bi * n + row) * d..(bi * n + row + 1) * d];
                for (o, &v) in dst.iter_mut().zip(s.content.row(j)) {
                    *o = v as f32;
                }
            }
        }
        let pixels = Tensor::new(&[b, n, p], pixels)?;
        let pe = Tensor::new(&[b, n, e], pe)?;
        let masked = if any_missing {
            Some(MaskedRows {
                flags: Tensor::new(&[b, n, 1], flags)?,
                content: Tensor::new(&[b, n, d], content)?,
            })
        } else {
            None
        };
        let (eps_pe, eps_content) = self.predict_raw(&pixels, &pe, &ts, masked.as_ref())?;
        let mut out = Vec::with_capacity(b);
        for (bi, s) in batch.iter().enumerate() {
            let pe_rows = Tensor::new(&[n, e], eps_pe.data()[bi * n * e..(bi + 1) * n * e].iter().map(|&v| v as f64).collect())?;
            let m = s.query.missing.len();
            let mut c = Vec::with_capacity(m * self.content_dim());
            if let Some(ec) = &eps_content {
                for &row in &s.query.missing {
                    c.extend(ec.data()[(bi * n + row) * d..(bi * n + row + 1) * d].iter().map(|&v| v as f64));
                }
            }
            out.push((pe_rows, Tensor::new(&[m, self.content_dim()], c)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn toy(modality: Modality, masked: bool) -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            hidden: 8,
            mlp: 16,
            heads: 2,
            modality,
            piece: PieceShape {
                width: 2,
                height: 2,
                channels: 1,
                frames: 1,
            },
            masked,
            time_freq: 8,
            timesteps: 1000,
        }
    }

    fn random_model(cfg: DenoiserConfig, seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Denoiser::new(cfg, &mut rng).unwrap();
        randomize_params(&mut m.params, 0.3, &mut rng);
        m
    }

    #[test]
    fn attention_matches_per_head_loop() {
        let (b, n, heads, d) = (2, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = || Tensor::<f64>::from_fn(&[b, n, heads * d], |_| normal.sample(&mut rng));
        let (q, k, v) = (r(), r(), r());
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = attention(&mut g, qv, kv, vv, heads).unwrap();
        let got = g.value(out).clone();
        let at = |t: &Tensor<f64>, bi: usize, i: usize, h: usize, c: usize| t.data()[(bi * n + i) * heads * d + h * d + c];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| (0..d).map(|c| at(&q, bi, i, h, c) * at(&k, bi, j, h, c)).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
                    for c in 0..d {
                        let want: f64 = (0..n).map(|j| (logits[j] - top).exp() / z * at(&v, bi, j, h, c)).sum();
                        assert!((at(&got, bi, i, h, c) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fresh_content_head_returns_its_noisy_input() {
        let cfg = toy(Modality::Temporal, true);
        let m = Denoiser::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (b, n, d) = (1, 3, cfg.hidden);
        let flags = Tensor::new(&[b, n, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let content = Tensor::from_fn(&[b, n, d], |i| if i / d == 1 { i as f32 * 0.1 - 1.0 } else { 0.0 });
        let masked = MaskedRows { flags, content: content.clone() };
        let pixels = Tensor::from_fn(&[b, n, cfg.piece_dim()], |i| (i % 5) as f32 * 0.2 - 0.4);
        let pe = Tensor::zeros(&[b, n, cfg.pe_dim()]);
        let (_, eps) = m.predict_raw(&pixels, &pe, &[1000], Some(&masked)).unwrap();
        assert_eq!(eps.unwrap(), content);
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let m = random_model(toy(Modality::Spatial, false), 1);
        let tok = m.embed(&Tensor::zeros(&[2, 4])).unwrap();
        let bias = m.params.get("patch.b").unwrap();
        assert_eq!(tok.row(0), bias.data());
        assert_eq!(tok.row(0), tok.row(1));
    }

    #[test]
    fn timestep_embedding_separates_steps() {
        let m = random_model(toy(Modality::Spatial, false), 2);
        let mut g = Graph::<f32>::new();
        let w = m.params.bind_frozen(&mut g);
        let e = timestep_embed(&mut g, &w, &m.config, &[1, 500, 1000, 500]).unwrap();
        let v = g.value(e);
        assert_eq!(v.row(1), v.row(3));
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let d: f32 = v.row(a).iter().zip(v.row(b)).map(|(x, y)| (x - y).abs()).sum();
            assert!(d > 1e-3);
        }
        assert!(timestep_embed(&mut g, &w, &m.config, &[0]).is_err());
        assert!(timestep_embed(&mut g, &w, &m.config, &[1001]).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Denoiser::new(toy(Modality::Temporal, true), &mut rng).unwrap();
        let (pe, c) = m
            .predict_raw(&Tensor::ones(&[1, 3, 4]), &Tensor::ones(&[1, 3, 16]), &[10], None)
            .unwrap();
        assert!(pe.data().iter().all(|&v| v == 0.0));
        assert!(c.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::<f64>::new();
        let single = g.constant(Tensor::new(&[1, 1, 2], vec![0.3, -0.7]).unwrap());
        let v = g.constant(Tensor::new(&[1, 1, 2], vec![5.0, 6.0]).unwrap());
        let out = attention(&mut g, single, single, v, 1).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0]);

        // Keys orthogonal to the query: uniform average of values.
        let q = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap());
        let v = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let out = attention(&mut g, q, k, v, 1).unwrap();
        assert_eq!(g.value(out).row(0), &[2.0, 4.0]);

        // Logits (ln 3, 0) with d = 1 give weights (0.75, 0.25).
        let q = g.constant(Tensor::new(&[1, 1, 1], vec![3f64.ln()]).unwrap());
        let k = g.constant(Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::new(&[1, 2, 1], vec![4.0, 8.0]).unwrap());
        let out = attention(&mut g, q, k, v, 1).unwrap();
        assert!((g.value(out).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_output_shape() {
        for modality in [Modality::Spatial, Modality::Temporal] {
            let m = random_model(toy(modality, false), 4);
            let e = m.config.pe_dim();
            for n in [1, 5] {
                let (pe, _) = m
                    .predict_raw(&Tensor::full(&[2, n, 4], 0.1), &Tensor::full(&[2, n, e], 0.2), &[3, 9], None)
                    .unwrap();
                assert_eq!(pe.shape(), &[2, n, e]);
            }
        }
    }

    #[test]
    fn identical_rows_without_codes_match() {
        let m = random_model(toy(Modality::Spatial, false), 5);
        let pixels = Tensor::from_fn(&[1, 3, 4], |i| [0.5, -0.2, 0.1, 0.9][i % 4]);
        let (pe, _) = m.predict_raw(&pixels, &Tensor::zeros(&[1, 3, 32]), &[100], None).unwrap();
        let rows: Vec<&[f32]> = (0..3).map(|r| &pe.data()[r * 32..(r + 1) * 32]).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn zero_token_decodes_to_bias() {
        let m = random_model(toy(Modality::Spatial, true), 6);
        let out = m.decode(&Tensor::zeros(&[1, 8])).unwrap();
        assert_eq!(out.data(), m.params.get("decoder.b").unwrap().data());
        assert_eq!(out, m.decode(&Tensor::zeros(&[1, 8])).unwrap());
        let plain = random_model(toy(Modality::Spatial, false), 6);
        assert!(plain.decode(&Tensor::zeros(&[1, 8])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = toy(Modality::Spatial, false);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.layers = 0;
        assert!(c.validate().is_err());
    }
}
