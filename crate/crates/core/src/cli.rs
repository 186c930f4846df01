//! Command-line surface. Every run writes `<out>/<command>.manifest.txt`,
//! a [`RunConfig`] that replays the run bitwise via `--config`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::attention_control::{average_word_map, threshold_map, BinaryMask};
use crate::autoencoder::{CodecParams, ImageFrame};
use crate::denoiser::train::{train_denoiser, TrainConfig, TrainExample};
use crate::denoiser::{Architecture, DenoiserParams, Vocab};
use crate::error::{Error, Result};
use crate::io::config::{MaskMode, RunConfig};
use crate::io::container::TensorContainer;
use crate::io::corpus::{self, CorpusSpec};
use crate::io::{ppm, read_file, read_text, write_atomic};
use crate::metrics::{self, DualEncoderParams, ReportRow, ScorerConfig};
use crate::optim::AdamConfig;
use crate::pipeline::{self, EditConfig, UserMask};
use crate::scheduler::{Latent, NoiseSchedule};

pub const DEFAULT_WEIGHTS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/weights/denoiser.lbtf");
pub const DEFAULT_SCORER: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/weights/scorer.lbtf");

#[derive(Debug, Parser)]
#[command(name = "lbe", version, about = "Blended latent diffusion video editing under attention control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic clip corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames_per_clip: Option<usize>,
    },
    /// Train the noise predictor on a corpus.
    TrainDenoiser {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
        #[command(flatten)]
        ladder: Ladder,
    },
    /// Train the text-image scorer on a corpus.
    TrainScorer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// DDIM-invert a clip and store the trajectories.
    Invert {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        clip: Clip,
        #[command(flatten)]
        model: Model,
    },
    /// Invert a clip and sample it back under the same prompt.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        clip: Clip,
        #[command(flatten)]
        model: Model,
    },
    /// Edit a clip.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        clip: Clip,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        edit: EditFlags,
    },
    /// Score an edited clip: frame-wise accuracy and temporal consistency.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        clip: Clip,
        #[arg(long)]
        edit_prompt: Option<String>,
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Dump averaged cross-attention maps and thresholded masks per word.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        clip: Clip,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Replay from a run manifest; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Train {
    /// Corpus directory (output of gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct Ladder {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Debug, Args)]
struct Clip {
    /// Clip directory of PPM frames.
    #[arg(long, alias = "clip")]
    frames: Option<PathBuf>,
    #[arg(long)]
    source_prompt: Option<String>,
}

#[derive(Debug, Args)]
struct Model {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    ladder: Ladder,
    /// Temporal-spatial self-attention across consecutive frames.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    temporal: Option<bool>,
}

#[derive(Debug, Args)]
struct EditFlags {
    #[arg(long)]
    edit_prompt: Option<String>,
    /// Edited word as SRC:DST token positions; repeatable.
    #[arg(long = "edit-word")]
    edit_words: Vec<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = ["auto", "user", "none"])]
    mask_mode: Option<String>,
    /// PPM mask (or directory of per-frame PPM masks); bright pixels are edited.
    #[arg(long)]
    user_mask: Option<PathBuf>,
    #[arg(long, value_parser = ["ddim-inverted", "randomly-noised"])]
    background_mode: Option<String>,
    #[arg(long)]
    blend_from: Option<usize>,
    #[arg(long)]
    blend_to: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}\n\nRun `lbe --help` for usage.");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let n = match std::env::var("LBE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| format!("LBE_THREADS must be a non-negative integer, got {v:?}"))?,
        Err(_) => 0,
    };
    // a pool may already exist when the CLI runs in-process more than once
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn base_config(command: &str, common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let cfg = RunConfig::parse(&read_text(p)?)?;
            if !cfg.command.is_empty() && cfg.command != command {
                return Err(usage(format!("{} is a manifest for `{}`, not `{command}`", p.display(), cfg.command)));
            }
            cfg
        }
        None => RunConfig::new(command),
    };
    cfg.command = command.to_string();
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_ladder(cfg: &mut RunConfig, l: &Ladder) {
    if let Some(v) = l.steps {
        cfg.steps = v;
    }
    if let Some(v) = l.beta_start {
        cfg.beta_start = v;
    }
    if let Some(v) = l.beta_end {
        cfg.beta_end = v;
    }
}

fn apply_model(cfg: &mut RunConfig, m: &Model) {
    if let Some(w) = &m.weights {
        cfg.weights = Some(w.clone());
    }
    apply_ladder(cfg, &m.ladder);
    if let Some(t) = m.temporal {
        cfg.temporal = t;
    }
    if cfg.weights.is_none() {
        cfg.weights = Some(DEFAULT_WEIGHTS.into());
    }
}

fn apply_clip(cfg: &mut RunConfig, c: &Clip) {
    if let Some(f) = &c.frames {
        cfg.input = Some(f.clone());
    }
    if let Some(p) = &c.source_prompt {
        cfg.source_prompt = Some(p.clone());
    }
}

fn apply_train(cfg: &mut RunConfig, t: &Train) {
    if let Some(d) = &t.data {
        cfg.input = Some(d.clone());
    }
    if let Some(v) = t.train_steps {
        cfg.train_steps = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.lr {
        cfg.lr = v;
    }
}

fn apply_edit(cfg: &mut RunConfig, e: &EditFlags) -> CliResult<()> {
    if let Some(p) = &e.edit_prompt {
        cfg.edit_prompt = Some(p.clone());
    }
    if !e.edit_words.is_empty() {
        cfg.edit_words = Vec::new();
        for w in &e.edit_words {
            cfg.edit_words.extend(crate::io::config::parse_word_pairs(w)?);
        }
    }
    if let Some(v) = e.tau {
        cfg.tau = v;
    }
    if let Some(m) = &e.mask_mode {
        cfg.mask_mode = m.parse()?;
    }
    if let Some(p) = &e.user_mask {
        cfg.user_mask = Some(p.clone());
        if e.mask_mode.is_none() {
            cfg.mask_mode = MaskMode::User;
        }
    }
    if cfg.mask_mode != MaskMode::User && e.mask_mode.is_some() {
        cfg.user_mask = None;
    }
    if let Some(b) = &e.background_mode {
        cfg.background_mode = b.parse()?;
    }
    if let Some(v) = e.blend_from {
        cfg.blend_from = Some(v);
    }
    if let Some(v) = e.blend_to {
        cfg.blend_to = Some(v);
    }
    Ok(())
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn require_path<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    let p = require(v, flag)?;
    if !p.exists() {
        return Err(usage(format!("--{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(path).map_err(|e| Error::io(path, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 over the named input files and directories, in order. File names
/// relative to each root and their bytes both enter the digest.
fn input_digest(inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in inputs {
        let mut files = Vec::new();
        files_under(root, &mut files)?;
        for f in files {
            if f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.txt")) {
                continue;
            }
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            let bytes = read_file(&f)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn seal_inputs(cfg: &mut RunConfig, inputs: &[PathBuf]) -> CliResult<()> {
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let digest = input_digest(&refs)?;
    if let Some(prev) = &cfg.input_sha256 {
        if *prev != digest {
            return Err(CliError::Runtime(Error::Config(format!(
                "inputs changed since the manifest was written (sha256 {prev} vs {digest})"
            ))));
        }
    }
    cfg.input_sha256 = Some(digest);
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = require(&cfg.out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_manifest(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&out.join(format!("{}.manifest.txt", cfg.command)), cfg.to_text().as_bytes())
}

fn schedule_of(cfg: &RunConfig) -> CliResult<NoiseSchedule> {
    NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end).map_err(|e| usage(e.to_string()))
}

fn load_model(cfg: &RunConfig) -> CliResult<(DenoiserParams, CodecParams)> {
    let w = require_path(&cfg.weights, "weights")?;
    let d = DenoiserParams::load(w)?;
    if let Some(v) = &cfg.vocab {
        let vocab = Vocab::parse(&read_text(v)?)?;
        if vocab != d.vocab {
            return Err(CliError::Runtime(Error::Format("vocabulary file does not match the checkpoint".into())));
        }
    }
    let codec = CodecParams::orthonormal(d.arch.codec_seed);
    Ok((d, codec))
}

fn load_frames(cfg: &RunConfig) -> CliResult<Vec<ImageFrame>> {
    let dir = require_path(&cfg.input, "frames")?;
    Ok(corpus::load_clip(dir)?.1)
}

fn write_frames(out: &Path, frames: &[ImageFrame]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        ppm::write_frame(&out.join(format!("frame_{i:02}.ppm")), f)?;
    }
    Ok(())
}

fn write_latents(path: &Path, latents: &[Latent]) -> Result<()> {
    let mut c = TensorContainer::new();
    for (f, z) in latents.iter().enumerate() {
        c.insert_f64(format!("frame{f}"), &z.data)?;
    }
    c.save(path)
}

/// Pixels whose brightest channel is at least one half are marked.
fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let f = ppm::read_frame(path)?;
    let (_, h, w) = f.pixels.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| (0..3).any(|c| f.pixels[[c, y, x]] >= 0.5)))
}

fn load_user_mask(path: &Path) -> Result<UserMask> {
    if path.is_dir() {
        let (_, paths) = corpus::frame_paths(path)?;
        Ok(UserMask::PerFrame(paths.iter().map(|p| read_mask(p)).collect::<Result<_>>()?))
    } else {
        Ok(UserMask::Static(read_mask(path)?))
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common, clips, frames_per_clip } => {
            let mut cfg = base_config("gen-data", &common)?;
            if let Some(c) = clips {
                cfg.clips = c;
            }
            if let Some(f) = frames_per_clip {
                cfg.frames = f;
            }
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let spec = CorpusSpec { clips: cfg.clips, frames: cfg.frames, seed: cfg.seed, ..Default::default() };
            let dirs = corpus::gen_data(&spec, &out)?;
            write_manifest(&out, &cfg)?;
            log(format!("wrote {} clips to {}", dirs.len(), out.display()));
        }
        Command::TrainDenoiser { common, train, ladder } => {
            let mut cfg = base_config("train-denoiser", &common)?;
            apply_train(&mut cfg, &train);
            apply_ladder(&mut cfg, &ladder);
            cfg.validate()?;
            let data_dir = require_path(&cfg.input, "data")?.clone();
            seal_inputs(&mut cfg, std::slice::from_ref(&data_dir))?;
            let out = out_dir(&cfg)?;
            let schedule = schedule_of(&cfg)?;
            let vocab = Vocab::default();
            let arch = Architecture { codec_seed: cfg.seed, ..Default::default() };
            let codec = CodecParams::orthonormal(arch.codec_seed);
            let mut data = Vec::new();
            for dir in corpus::list_clips(&data_dir)? {
                let (m, frames) = corpus::load_clip(&dir)?;
                let caption = m.map(|m| m.caption).ok_or_else(|| Error::Format(format!("{} has no caption", dir.display())))?;
                let tokens = crate::denoiser::tokenize(&caption, &vocab)?.tokens;
                for f in &frames {
                    data.push(TrainExample { z0: crate::autoencoder::encode(f, &codec)?, tokens: tokens.clone() });
                }
            }
            let tc = TrainConfig {
                steps: cfg.train_steps,
                batch_size: cfg.batch_size,
                adam: AdamConfig { lr: cfg.lr, ..Default::default() },
                seed: cfg.seed,
                ..Default::default()
            };
            log(format!("training on {} frames for {} steps", data.len(), tc.steps));
            let outcome = train_denoiser(arch, vocab, &data, &schedule, &tc, |s, l| {
                if s % 100 == 0 {
                    log(format!("step {s:>6}  loss {l:.5}"));
                }
            })?;
            outcome.params.save(&out.join("denoiser.lbtf"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in outcome.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            write_atomic(&out.join("denoiser_loss.csv"), csv.as_bytes())?;
            write_manifest(&out, &cfg)?;
        }
        Command::TrainScorer { common, train } => {
            let mut cfg = base_config("train-scorer", &common)?;
            apply_train(&mut cfg, &train);
            cfg.validate()?;
            let data_dir = require_path(&cfg.input, "data")?.clone();
            seal_inputs(&mut cfg, std::slice::from_ref(&data_dir))?;
            let out = out_dir(&cfg)?;
            let clips = corpus::list_clips(&data_dir)?;
            if clips.len() < 3 {
                return Err(usage(format!("{} holds {} clips; the scorer needs at least 3", data_dir.display(), clips.len())));
            }
            // the last fifth of the clips (at least two) is held out for retrieval
            let held_from = clips.len() - (clips.len() / 5).max(2);
            let (mut train_set, mut held) = (Vec::new(), Vec::new());
            for (i, dir) in clips.iter().enumerate() {
                let (m, frames) = corpus::load_clip(dir)?;
                let caption = m.map(|m| m.caption).ok_or_else(|| Error::Format(format!("{} has no caption", dir.display())))?;
                let bucket = if i < held_from { &mut train_set } else { &mut held };
                bucket.extend(frames.into_iter().map(|f| (f, caption.clone())));
            }
            let sc = ScorerConfig { steps: cfg.train_steps, batch_size: cfg.batch_size, lr: cfg.lr, seed: cfg.seed, ..Default::default() };
            let outcome = metrics::train_scorer(&train_set, Vocab::default(), &sc)?;
            outcome.params.save(&out.join("scorer.lbtf"))?;
            let report = metrics::retrieval_accuracy(&outcome.params, &held)?;
            let rows = vec![
                ReportRow { metric: "retrieval_accuracy".into(), clip: "held_out".into(), value: report.accuracy },
                ReportRow { metric: "retrieval_chance".into(), clip: "held_out".into(), value: report.chance },
                ReportRow { metric: "matched_similarity".into(), clip: "held_out".into(), value: report.matched_mean },
                ReportRow { metric: "mismatched_similarity".into(), clip: "held_out".into(), value: report.mismatched_mean },
            ];
            write_atomic(&out.join("scorer_report.csv"), metrics::report_csv(&rows).as_bytes())?;
            print!("{}", metrics::report_table(&rows));
            write_manifest(&out, &cfg)?;
        }
        Command::Invert { common, clip, model } => {
            let mut cfg = base_config("invert", &common)?;
            apply_clip(&mut cfg, &clip);
            apply_model(&mut cfg, &model);
            cfg.validate()?;
            let prompt = require(&cfg.source_prompt, "source-prompt")?.clone();
            let (frames, (d, codec), schedule) = (load_frames(&cfg)?, load_model(&cfg)?, schedule_of(&cfg)?);
            let inputs = [cfg.input.clone().unwrap(), cfg.weights.clone().unwrap()];
            seal_inputs(&mut cfg, &inputs)?;
            let out = out_dir(&cfg)?;
            let inv = pipeline::invert_video(&frames, &prompt, &schedule, &d, &codec, cfg.temporal)?;
            let mut c = TensorContainer::new();
            for f in 0..inv.frames() {
                for t in 0..=inv.steps() {
                    c.insert_f64(format!("frame{f}.t{t}"), &inv.latent(f, t).data)?;
                }
            }
            c.save(&out.join("inversion.lbtf"))?;
            write_manifest(&out, &cfg)?;
        }
        Command::Reconstruct { common, clip, model } => {
            let mut cfg = base_config("reconstruct", &common)?;
            apply_clip(&mut cfg, &clip);
            apply_model(&mut cfg, &model);
            cfg.validate()?;
            let prompt = require(&cfg.source_prompt, "source-prompt")?.clone();
            let (frames, (d, codec), schedule) = (load_frames(&cfg)?, load_model(&cfg)?, schedule_of(&cfg)?);
            let inputs = [cfg.input.clone().unwrap(), cfg.weights.clone().unwrap()];
            seal_inputs(&mut cfg, &inputs)?;
            let out = out_dir(&cfg)?;
            let inv = pipeline::invert_video(&frames, &prompt, &schedule, &d, &codec, cfg.temporal)?;
            let rec = pipeline::reconstruct_from_inversion(&inv, &prompt, &schedule, &d, &codec, cfg.temporal)?;
            write_frames(&out, &rec.frames)?;
            write_latents(&out.join("latents.lbtf"), &rec.final_latents)?;
            let err = pipeline::mean_relative_error(&rec.final_latents, &inv.z0);
            println!("mean relative latent error {err:.6}");
            write_manifest(&out, &cfg)?;
        }
        Command::Edit { common, clip, model, edit } => {
            let mut cfg = base_config("edit", &common)?;
            apply_clip(&mut cfg, &clip);
            apply_model(&mut cfg, &model);
            apply_edit(&mut cfg, &edit)?;
            cfg.validate()?;
            let source = require(&cfg.source_prompt, "source-prompt")?.clone();
            let target = require(&cfg.edit_prompt, "edit-prompt")?.clone();
            let (frames, (d, codec), schedule) = (load_frames(&cfg)?, load_model(&cfg)?, schedule_of(&cfg)?);
            if cfg.edit_words.is_empty() {
                cfg.edit_words = pipeline::default_pairs(&d.tokenize(&source)?, &d.tokenize(&target)?);
            }
            let mut inputs = vec![cfg.input.clone().unwrap(), cfg.weights.clone().unwrap()];
            let user_mask = match &cfg.user_mask {
                Some(p) => {
                    require_path(&cfg.user_mask, "user-mask")?;
                    inputs.push(p.clone());
                    Some(load_user_mask(p)?)
                }
                None => None,
            };
            seal_inputs(&mut cfg, &inputs)?;
            let out = out_dir(&cfg)?;
            let ec = EditConfig {
                source_prompt: source,
                edit_prompt: target,
                edited_words: cfg.edit_words.clone(),
                tau: cfg.tau,
                steps: cfg.steps,
                mask_mode: cfg.mask_mode,
                user_mask,
                background_mode: cfg.background_mode,
                temporal_attention: cfg.temporal,
                seed: cfg.seed,
                blend_range: match (cfg.blend_from, cfg.blend_to) {
                    (None, None) => None,
                    (lo, hi) => Some((lo.unwrap_or(1), hi.unwrap_or(cfg.steps))),
                },
            };
            let res = pipeline::edit_video(&frames, &ec, &schedule, &d, &codec)?;
            write_frames(&out, &res.frames)?;
            write_latents(&out.join("latents.lbtf"), &res.final_latents)?;
            let mut masks = TensorContainer::new();
            for (k, step) in res.masks.iter().enumerate() {
                let t = cfg.steps - k;
                for (f, m) in step.iter().enumerate() {
                    masks.insert_bool(format!("t{t}.frame{f}"), &m.mask)?;
                }
            }
            masks.save(&out.join("masks.lbtf"))?;
            write_manifest(&out, &cfg)?;
        }
        Command::Evaluate { common, clip, edit_prompt, scorer } => {
            let mut cfg = base_config("evaluate", &common)?;
            apply_clip(&mut cfg, &clip);
            if let Some(p) = edit_prompt {
                cfg.edit_prompt = Some(p);
            }
            if let Some(s) = scorer {
                cfg.scorer = Some(s);
            }
            if cfg.scorer.is_none() {
                cfg.scorer = Some(DEFAULT_SCORER.into());
            }
            cfg.validate()?;
            let source = require(&cfg.source_prompt, "source-prompt")?.clone();
            let target = require(&cfg.edit_prompt, "edit-prompt")?.clone();
            let frames = load_frames(&cfg)?;
            let scorer_path = require_path(&cfg.scorer, "scorer")?.clone();
            let params = DualEncoderParams::load(&scorer_path)?;
            let inputs = [cfg.input.clone().unwrap(), scorer_path.clone()];
            seal_inputs(&mut cfg, &inputs)?;
            if cfg.out.is_none() {
                cfg.out = cfg.input.clone();
            }
            let out = out_dir(&cfg)?;
            let id = cfg.input.as_ref().and_then(|p| p.file_name()).map_or("clip".into(), |n| n.to_string_lossy().into_owned());
            let mean = |p: &str| -> Result<f64> {
                let s = frames.iter().map(|f| metrics::clip_score(f, p, &params)).collect::<Result<Vec<_>>>()?;
                Ok(s.iter().sum::<f64>() / s.len() as f64)
            };
            let mut rows = vec![ReportRow {
                metric: "frame_accuracy".into(),
                clip: id.clone(),
                value: metrics::frame_accuracy(&frames, &source, &target, &params)?,
            }];
            if frames.len() >= 2 {
                rows.push(ReportRow {
                    metric: "temporal_consistency".into(),
                    clip: id.clone(),
                    value: metrics::temporal_consistency(&frames, &params)?,
                });
            }
            rows.push(ReportRow { metric: "clip_score_source".into(), clip: id.clone(), value: mean(&source)? });
            rows.push(ReportRow { metric: "clip_score_edit".into(), clip: id, value: mean(&target)? });
            write_atomic(&out.join("report.csv"), metrics::report_csv(&rows).as_bytes())?;
            write_atomic(&out.join("report.txt"), metrics::report_table(&rows).as_bytes())?;
            print!("{}", metrics::report_table(&rows));
            write_manifest(&out, &cfg)?;
        }
        Command::DumpAttention { common, clip, model, tau } => {
            let mut cfg = base_config("dump-attention", &common)?;
            apply_clip(&mut cfg, &clip);
            apply_model(&mut cfg, &model);
            if let Some(t) = tau {
                cfg.tau = t;
            }
            cfg.validate()?;
            let prompt = require(&cfg.source_prompt, "source-prompt")?.clone();
            let (frames, (d, codec), schedule) = (load_frames(&cfg)?, load_model(&cfg)?, schedule_of(&cfg)?);
            let inputs = [cfg.input.clone().unwrap(), cfg.weights.clone().unwrap()];
            seal_inputs(&mut cfg, &inputs)?;
            let out = out_dir(&cfg)?;
            let inv = pipeline::invert_video(&frames, &prompt, &schedule, &d, &codec, cfg.temporal)?;
            let words = d.tokenize(&prompt)?.tokens.len();
            let mut c = TensorContainer::new();
            for (f, records) in inv.source_attention.iter().enumerate() {
                for k in 0..words {
                    let avg = average_word_map(records, k, 1)?;
                    let mask: BinaryMask = threshold_map(&avg, cfg.tau)?;
                    c.insert_f64(format!("frame{f}.word{k}.map"), &avg.map)?;
                    c.insert_bool(format!("frame{f}.word{k}.mask"), &mask.mask)?;
                }
            }
            c.save(&out.join("attention.lbtf"))?;
            write_manifest(&out, &cfg)?;
        }
    }
    Ok(())
}
