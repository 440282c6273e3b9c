//! The `jpdvt` command line: corpus generation, training, solving,
//! evaluation sweeps and temporal super-resolution.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 numeric failure, 4 I/O.
//! `JPDVT_DETERMINISTIC=1` forces a single worker and zeroes the wallclock
//! column of `loss.csv`, making every output byte-reproducible.

mod pipeline;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use pipeline::{
    mask_sweep, masked_copy, solve_instances, summarize, validate_csv, validate_document, validate_result,
    SolveReport, SolveResult, SweepRow, GIVEN_HEADER, RESULT_SCHEMA, SWEEP_HEADER,
};

use crate::assignment::{hungarian_match, Matcher};
use crate::denoiser::{Denoiser, DenoiserConfig, Modality};
use crate::diffusion::{solve_masked, NoiseSchedule, SolveOptions};
use crate::error::{Error, Result};
use crate::oracles::TruthPredictor;
use crate::posenc::{Layout, PeTable};
use crate::puzzlekit::{
    apply_mask, load_corpus, load_puzzle, make_spatial, make_temporal, mask_limit, read_frame_dir, sample_rng,
    save_puzzle, synth_spatial, synth_temporal, write_json, Crop, CorpusManifest, Image, MotionParams, Piece,
    PuzzleInstance, SampleKind, SampleRecord, Split, SpatialParams, TextureParams, PUZZLE_FILE,
};
use crate::trainer::{run, Checkpoint, RunOptions, TrainConfig, TrainSet, Trainer};

pub const DETERMINISTIC_ENV: &str = "JPDVT_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "jpdvt", version, about = "Jigsaw puzzles solved by diffusion over positional encodings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a puzzle corpus from synthetic data or a directory of images.
    MakePuzzles(MakeArgs),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Solve one puzzle or every held-out puzzle of a corpus.
    Solve(SolveArgs),
    /// Sweep missing-piece counts over a corpus and write metrics CSV.
    Eval(EvalArgs),
    /// Insert generated frames between the frames of a clip.
    Superres(SuperresArgs),
    /// Print the JSON Schema of `solve` results.
    Schema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    Synth,
    Dir,
}

#[derive(Debug, Args)]
pub struct MakeArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "synth")]
    pub source: SourceKind,
    /// Input directory for `--source dir`: images (spatial) or one frame directory per clip (temporal).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Grid edge (spatial).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Frames per piece (temporal).
    #[arg(long)]
    pub piece_len: Option<usize>,
    /// Erode a gap between pieces (spatial).
    #[arg(long, overrides_with = "no_gap")]
    pub gap: bool,
    #[arg(long, overrides_with = "gap")]
    pub no_gap: bool,
    /// Piece edge in pixels (spatial).
    #[arg(long, default_value_t = 16)]
    pub piece_px: usize,
    /// Random piece crops inside their cells instead of centered ones (spatial, with gap).
    #[arg(long)]
    pub random_crop: bool,
    /// Frames per synthetic clip (temporal).
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Synthetic clips: start shapes where their paths never reach a wall.
    #[arg(long)]
    pub clear_walls: bool,
    /// Pin the first piece to slot 0; default on for temporal puzzles.
    #[arg(long)]
    pub anchor: Option<bool>,
    /// Largest fraction of pieces withheld per puzzle; each puzzle draws its count uniformly.
    #[arg(long, default_value_t = 0.0)]
    pub mask_max: f64,
    #[arg(long)]
    pub count: usize,
    /// Fraction of puzzles placed in the held-out split (taken from the end).
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the mean loss every this many steps (0: silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct SolveOpts {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Visit every k-th timestep of the trained schedule.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value = "greedy")]
    pub matcher: MatcherArg,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatcherArg {
    Greedy,
    Hungarian,
}

impl From<MatcherArg> for Matcher {
    fn from(m: MatcherArg) -> Self {
        match m {
            MatcherArg::Greedy => Matcher::Greedy,
            MatcherArg::Hungarian => Matcher::Hungarian,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A puzzle directory or `puzzle.json`, or a corpus (its held-out split is solved).
    #[arg(long)]
    pub puzzle: PathBuf,
    #[command(flatten)]
    pub opts: SolveOpts,
    /// Result file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where generated pieces are written.
    #[arg(long, default_value = "generated")]
    pub gen_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; omit together with `--oracle`.
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Missing counts to sweep, `A..B` inclusive.
    #[arg(long, default_value = "0..0", value_parser = parse_sweep)]
    pub mask_sweep: (usize, usize),
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Use a predictor that knows every answer (pipeline check).
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub opts: SolveOpts,
    /// Metrics CSV; the given-pieces-only variant goes next to it as `<stem>.given.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct SuperresArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sweep(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: usize = a.trim().parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if a > b {
        return Err(format!("empty sweep {s:?}"));
    }
    Ok((a, b))
}

/// Failure of a command, with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(Error::Numeric(_)) => 3,
            CliError::Run(Error::Io { .. } | Error::Format { .. }) => 4,
            CliError::Run(Error::Checkpoint(crate::trainer::CheckpointError::ConfigMismatch { .. })) => 1,
            CliError::Run(Error::Checkpoint(_)) => 4,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn jobs(requested: usize) -> usize {
    if deterministic() {
        1
    } else {
        requested.max(1)
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("jpdvt: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> std::result::Result<(), CliError> {
    match cmd {
        Command::MakePuzzles(a) => make_puzzles(&a),
        Command::Train(a) => train(&a),
        Command::Solve(a) => solve(&a),
        Command::Eval(a) => eval(&a),
        Command::Superres(a) => superres(&a),
        Command::Schema => {
            print!("{RESULT_SCHEMA}");
            Ok(())
        }
    }
}

fn make_puzzles(a: &MakeArgs) -> std::result::Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.mask_max) || !(0.0..=1.0).contains(&a.test_frac) {
        return Err(usage("--mask-max and --test-frac must lie in [0, 1]"));
    }
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    match (a.source, &a.input) {
        (SourceKind::Dir, None) => return Err(usage("--source dir needs --input")),
        (SourceKind::Synth, Some(_)) => return Err(usage("--input only applies to --source dir")),
        _ => {}
    }
    let seed = a.seed;
    let (instances, params) = match a.mode {
        Mode::Spatial => {
            if a.piece_len.is_some() {
                return Err(usage("--piece-len applies to temporal puzzles"));
            }
            let grid = a.grid.ok_or_else(|| usage("spatial puzzles need --grid"))?;
            let params = SpatialParams {
                grid,
                gap: a.gap && !a.no_gap,
                piece_px: a.piece_px,
                crop: if a.random_crop { Crop::Random } else { Crop::Center },
                anchor: a.anchor.unwrap_or(false),
            };
            let images = match &a.input {
                None => synth_spatial(
                    seed,
                    a.count,
                    &TextureParams {
                        size: params.canvas_px(),
                        ..TextureParams::default()
                    },
                ),
                Some(dir) => image_files(dir, a.count)?,
            };
            let puzzles = images
                .iter()
                .enumerate()
                .map(|(i, img)| make_spatial(img, &params, &mut sample_rng(seed ^ 1, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            (puzzles, serde_json::to_value(params).expect("serializable"))
        }
        Mode::Temporal => {
            if a.grid.is_some() || a.gap || a.no_gap || a.random_crop {
                return Err(usage("--grid, --gap, --no-gap and --random-crop apply to spatial puzzles"));
            }
            let piece_len = a.piece_len.ok_or_else(|| usage("temporal puzzles need --piece-len"))?;
            let anchor = a.anchor.unwrap_or(true);
            let clips = match &a.input {
                None => synth_temporal(
                    seed,
                    a.count,
                    &MotionParams {
                        frames: a.frames,
                        clear_walls: a.clear_walls,
                        ..MotionParams::default()
                    },
                ),
                Some(dir) => clip_dirs(dir, a.count)?,
            };
            let puzzles = clips
                .iter()
                .enumerate()
                .map(|(i, frames)| make_temporal(frames, piece_len, anchor, &mut sample_rng(seed ^ 1, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            (
                puzzles,
                json!({ "piece_len": piece_len, "anchor": anchor, "frames": a.frames }),
            )
        }
    };
    let mut manifest = CorpusManifest::new(
        seed,
        json!({ "mode": format!("{:?}", a.mode).to_lowercase(), "puzzle": params, "mask_max": a.mask_max }),
    );
    let n_test = (instances.len() as f64 * a.test_frac).round() as usize;
    let n_train = instances.len() - n_test;
    let mut withheld = 0;
    for (i, inst) in instances.into_iter().enumerate() {
        let mut rng = sample_rng(seed ^ 2, i as u64);
        let max_k = ((inst.len() as f64 * a.mask_max).floor() as usize).min(inst.len() - 1 - usize::from(inst.anchored()));
        let mut inst = if max_k > 0 {
            let k = rand::Rng::random_range(&mut rng, 0..=max_k);
            apply_mask(&inst, k, k > mask_limit(inst.len()), &mut rng)?
        } else {
            inst
        };
        withheld += inst.missing().len();
        inst.provenance.seed = seed;
        inst.provenance.source = match &a.input {
            None => format!("synth:{i}"),
            Some(d) => format!("{}:{i}", d.display()),
        };
        let rel = format!("puzzles/{i:04}");
        save_puzzle(&inst, &a.out.join(&rel))?;
        manifest.samples.push(SampleRecord {
            path: rel,
            kind: SampleKind::Puzzle,
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    manifest.save(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} puzzles ({n_train} train, {n_test} test, {withheld} pieces withheld) to {}",
        manifest.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path, count: usize) -> Result<Vec<Image>> {
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .take(count)
        .collect();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    files.iter().map(|p| Image::read_pnm(p)).collect()
}

fn clip_dirs(dir: &Path, count: usize) -> Result<Vec<Vec<Image>>> {
    let dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).take(count).collect();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no clip directories in {}", dir.display())));
    }
    dirs.iter().map(|d| read_frame_dir(d)).collect()
}

fn train(a: &TrainArgs) -> std::result::Result<(), CliError> {
    let config = TrainConfig::load(&a.config)?;
    let corpus = load_corpus(&a.corpus)?;
    let train_set = corpus.puzzles(Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::invalid(format!("{} has no training puzzles", a.corpus.display())).into());
    }
    let held_out = corpus.puzzles(Split::Test)?;
    let data = TrainSet::from_instances(&train_set)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume_with(config, Checkpoint::load(path)?, data)?,
        None => Trainer::new(config, data)?,
    };
    let log_every = a.log_every;
    let (mut sum, mut count) = (0.0, 0u64);
    let opts = RunOptions {
        record_time: !deterministic(),
    };
    let summary = run(&mut trainer, &a.out, &held_out, &opts, |s| {
        sum += s.loss;
        count += 1;
        if log_every > 0 && s.step % log_every == 0 {
            eprintln!("step {:>7}  loss {:.5}  lr {:.3e}", s.step, sum / count as f64, s.lr);
            (sum, count) = (0.0, 0);
        }
    })?;
    println!(
        "trained to step {} (final loss {}); wrote {} checkpoint(s) to {}",
        summary.steps,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.5}")),
        summary.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

/// A checkpoint's model, rejecting puzzles it was not built for.
pub struct LoadedModel {
    pub ckpt: Checkpoint,
    pub denoiser: Denoiser,
    pub sched: NoiseSchedule,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let denoiser = Denoiser::from_params(ckpt.model.clone(), ckpt.params.clone())?;
        let sched = ckpt.schedule.build()?;
        Ok(Self { ckpt, denoiser, sched })
    }

    /// The model config a checkpoint would need for these puzzles.
    pub fn check_puzzles(&self, puzzles: &[PuzzleInstance]) -> Result<()> {
        for p in puzzles {
            let modality = match p.layout() {
                Layout::Grid { .. } => Modality::Spatial,
                Layout::Sequence { .. } => Modality::Temporal,
            };
            let want = DenoiserConfig {
                modality,
                piece: p.piece_shape(),
                masked: self.ckpt.model.masked,
                ..self.ckpt.model.clone()
            };
            self.ckpt.expect_model(&want)?;
        }
        Ok(())
    }
}

fn solve_options(o: &SolveOpts) -> SolveOptions {
    SolveOptions {
        seed: o.seed,
        stride: o.stride,
        jobs: jobs(o.jobs),
        ..SolveOptions::default()
    }
}

fn load_targets(path: &Path) -> Result<(Vec<PuzzleInstance>, Vec<String>, bool)> {
    let is_puzzle = path.is_file() && path.file_name().is_some_and(|n| n == PUZZLE_FILE)
        || path.join(PUZZLE_FILE).is_file();
    if is_puzzle {
        return Ok((vec![load_puzzle(path)?], vec![path.display().to_string()], true));
    }
    let corpus = load_corpus(path)?;
    let records: Vec<&SampleRecord> = corpus
        .manifest
        .samples
        .iter()
        .filter(|r| r.split == Split::Test && r.kind == SampleKind::Puzzle)
        .collect();
    let puzzles = records
        .iter()
        .map(|r| load_puzzle(&corpus.dir.join(&r.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((puzzles, records.iter().map(|r| r.path.clone()).collect(), false))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            crate::error::write_atomic(p, text.as_bytes())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn save_piece(piece: &Piece, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    piece.to_image().write_pnm(path)
}

fn solve(a: &SolveArgs) -> std::result::Result<(), CliError> {
    let model = LoadedModel::load(&a.ckpt)?;
    let (puzzles, names, single) = load_targets(&a.puzzle)?;
    if puzzles.is_empty() {
        return Err(Error::invalid(format!("no held-out puzzles in {}", a.puzzle.display())).into());
    }
    model.check_puzzles(&puzzles)?;
    let reports = solve_instances(
        &model.denoiser,
        Some(&model.denoiser),
        &model.sched,
        &puzzles,
        &solve_options(&a.opts),
        a.opts.matcher.into(),
    )?;
    let mut results = Vec::with_capacity(reports.len());
    for (i, (r, name)) in reports.iter().zip(&names).enumerate() {
        let mut paths = Vec::new();
        for (row, piece) in &r.generated {
            let ext = if piece.shape().channels == 1 { "pgm" } else { "ppm" };
            let path = a.gen_dir.join(format!("puzzle{i:04}_row{row:03}.{ext}"));
            save_piece(piece, &path)?;
            paths.push(path.display().to_string());
        }
        results.push(SolveResult {
            puzzle: name.clone(),
            permutation: r.assignment.permutation.clone(),
            distances: r.assignment.distances.clone(),
            missing_generated: paths,
            kendall: r.kendall,
            correct_pieces: r.correct_pieces,
        });
    }
    let doc = if single {
        serde_json::to_value(&results[0])
    } else {
        serde_json::to_value(&results)
    }
    .expect("serializable results");
    validate_document(&doc)?;
    let mut text = serde_json::to_string_pretty(&doc).expect("serializable results");
    text.push('\n');
    write_output(a.out.as_deref(), &text)?;
    Ok(())
}

/// `<dir>/<stem>.given.csv` beside a metrics CSV.
pub fn given_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.given.csv"))
}

fn eval(a: &EvalArgs) -> std::result::Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let puzzles = corpus.puzzles(split)?;
    if puzzles.is_empty() {
        return Err(Error::invalid(format!("{} has no {split:?} puzzles", a.corpus.display())).into());
    }
    let opts = solve_options(&a.opts);
    let range = a.mask_sweep.0..=a.mask_sweep.1;
    let rows = if a.oracle {
        let sched = NoiseSchedule::default_linear();
        let oracle = TruthPredictor::new(sched.clone(), &puzzles)?;
        mask_sweep(&oracle, None, &sched, &puzzles, range, &opts, a.opts.matcher.into())?
    } else {
        let path = a.ckpt.as_ref().ok_or_else(|| usage("--ckpt is required without --oracle"))?;
        let model = LoadedModel::load(path)?;
        model.check_puzzles(&puzzles)?;
        mask_sweep(
            &model.denoiser,
            Some(&model.denoiser),
            &model.sched,
            &puzzles,
            range,
            &opts,
            a.opts.matcher.into(),
        )?
    };
    let mut main = format!("{SWEEP_HEADER}\n");
    let mut given = format!("{GIVEN_HEADER}\n");
    for r in &rows {
        main.push_str(&r.csv());
        main.push('\n');
        given.push_str(&r.given_csv());
        given.push('\n');
    }
    validate_csv(&main, SWEEP_HEADER)?;
    validate_csv(&given, GIVEN_HEADER)?;
    write_output(Some(&a.out), &main)?;
    write_output(Some(&given_path(&a.out)), &given)?;
    for r in &rows {
        println!(
            "missing {}: puzzle {:.3}  piece {:.3}  given-only {:.3}  kendall {:.4} ± {:.4}  (n={})",
            r.missing, r.puzzle_acc, r.piece_acc, r.piece_acc_given, r.kendall_mean, r.kendall_std, r.n
        );
    }
    Ok(())
}

/// Frames of a super-resolved clip: inputs at even positions, generated
/// frames between them. The output has `2n - 1` frames; nothing is
/// extrapolated past the last input.
pub fn superresolve(model: &LoadedModel, frames: &[Image], seed: u64, stride: usize) -> Result<Vec<Image>> {
    let cfg = &model.ckpt.model;
    if cfg.modality != Modality::Temporal || !cfg.masked {
        return Err(Error::invalid("super-resolution needs a masked temporal checkpoint"));
    }
    if cfg.piece.frames != 1 {
        return Err(Error::invalid(format!(
            "factor 2 needs a model trained on single-frame pieces, this one uses {} frames per piece",
            cfg.piece.frames
        )));
    }
    let n = frames.len();
    if n < 2 {
        return Err(Error::invalid("need at least two input frames"));
    }
    let slots = 2 * n - 1;
    let shape = cfg.piece;
    let blank = Piece::new(shape, vec![0; shape.dim()])?;
    let mut pieces = Vec::with_capacity(slots);
    for s in 0..slots {
        pieces.push(if s % 2 == 0 {
            let p = Piece::from_frames(&frames[s / 2..s / 2 + 1])?;
            if p.shape() != shape {
                return Err(Error::invalid(format!(
                    "input frames are {:?}, the model expects {shape:?}",
                    p.shape()
                )));
            }
            p
        } else {
            blank.clone()
        });
    }
    let missing: Vec<usize> = (1..slots).step_by(2).collect();
    let inst = PuzzleInstance::new(
        pieces,
        Layout::Sequence { len: slots },
        (0..slots).collect(),
        missing.clone(),
        true,
        Default::default(),
    )?;
    let query = inst.solver_view().query(0);
    let opts = SolveOptions {
        seed,
        stride,
        ..SolveOptions::default()
    };
    let sol = solve_masked(&model.denoiser, &model.sched, &query, &opts)?;
    // Generated rows compete only for the intermediate slots.
    let table = PeTable::new(&inst.layout())?;
    let odd = PeTable::from_rows(missing.iter().map(|&s| table.row(s).to_vec()).collect())?;
    let est = tensorlab::Tensor::from_rows(&missing.iter().map(|&r| sol.pe.row(r).to_vec()).collect::<Vec<_>>())?;
    let placed = hungarian_match(&est, &odd)?;
    let pixels = model.denoiser.decode(&sol.content)?;
    let mut out: Vec<Option<Image>> = (0..slots).map(|_| None).collect();
    for (i, f) in frames.iter().enumerate() {
        out[2 * i] = Some(f.clone());
    }
    for (j, &slot_idx) in placed.permutation.iter().enumerate() {
        let piece = Piece::from_normalized(shape, pixels.row(j))?;
        out[missing[slot_idx]] = Some(piece.frame(0));
    }
    Ok(out.into_iter().map(|f| f.expect("every slot filled")).collect())
}

fn superres(a: &SuperresArgs) -> std::result::Result<(), CliError> {
    if a.factor != 2 {
        return Err(usage(format!("only --factor 2 is supported, got {}", a.factor)));
    }
    let model = LoadedModel::load(&a.ckpt)?;
    let frames = read_frame_dir(&a.frames)?;
    let out = superresolve(&model, &frames, a.seed, a.stride)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, f) in out.iter().enumerate() {
        let ext = if f.channels() == 1 { "pgm" } else { "ppm" };
        f.write_pnm(&a.out.join(format!("{i:04}.{ext}")))?;
    }
    write_json(
        &a.out.join("superres.json"),
        &json!({ "inputs": frames.len(), "outputs": out.len(), "generated": (1..out.len()).step_by(2).collect::<Vec<_>>() }),
    )?;
    println!("wrote {} frames ({} generated) to {}", out.len(), out.len() / 2, a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_ranges() {
        assert_eq!(parse_sweep("0..3").unwrap(), (0, 3));
        assert_eq!(parse_sweep("2..=2").unwrap(), (2, 2));
        assert!(parse_sweep("3..1").is_err());
        assert!(parse_sweep("3").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["jpdvt", "make-puzzles", "--mode", "spatial", "--count", "3"]), 2);
        assert_eq!(main_with_args(["jpdvt", "bogus"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let args = ["jpdvt", "make-puzzles", "--mode", "temporal", "--grid", "3", "--count", "2", "--out", out];
        assert_eq!(main_with_args(args), 2);
    }

    #[test]
    fn given_sidecar_name() {
        assert_eq!(given_path(Path::new("a/b/sweep.csv")), Path::new("a/b/sweep.given.csv"));
    }
}
