//! The editing method end to end.
//!
//! 1. Encode each frame and DDIM-invert it up the ladder under the source
//!    prompt, keeping the whole trajectory `ẑ_1..ẑ_T` and the source
//!    cross-attention.
//! 2. Starting from `ẑ_T`, denoise under the edit prompt. After each step the
//!    generated latent is blended with the background latent at the same
//!    level through a mask (auto, user, or none).
//! 3. Decode the final latents.
//!
//! Timesteps run strictly in sequence; frames within a step run in parallel.
//! With temporal attention on, frame `i` attends to frame `i−1` at the same
//! level, which is always available because a step only reads the previous
//! step's immutable latents.

use ndarray::{Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention_control::{attention_mask, check_tau, resize_user_mask, AttentionRecord, BinaryMask};
use crate::autoencoder::{decode, encode, CodecParams, ImageFrame};
use crate::denoiser::train::gaussian;
use crate::denoiser::{first_difference, AttentionCapture, AttentionMode, DenoiserParams, NoiseLevel, PromptEmbedding, TextPrompt};
use crate::error::{Error, Result};
pub use crate::io::config::{BackgroundMode, MaskMode};
use crate::scheduler::{ddim_invert_step, ddim_sample_step, noise_to_level, Latent, NoiseSchedule};

/// A user-supplied edit region.
#[derive(Debug, Clone, PartialEq)]
pub enum UserMask {
    /// One image-resolution mask for every frame.
    Static(Array2<bool>),
    /// One image-resolution mask per frame.
    PerFrame(Vec<Array2<bool>>),
    /// Latent-resolution masks per step and frame, indexed like
    /// [`EditResult::masks`]. Replaying a recorded history reproduces that run.
    Replay(Vec<Vec<BinaryMask>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub source_prompt: String,
    pub edit_prompt: String,
    /// `(source position, target position)` pairs. Empty means the first
    /// token position where the prompts differ.
    pub edited_words: Vec<(usize, usize)>,
    pub tau: f64,
    pub steps: usize,
    pub mask_mode: MaskMode,
    pub user_mask: Option<UserMask>,
    pub background_mode: BackgroundMode,
    pub temporal_attention: bool,
    pub seed: u64,
    /// Blend only at steps `t` with `lo ≤ t ≤ hi`; `None` blends at every step.
    pub blend_range: Option<(usize, usize)>,
}

impl EditConfig {
    pub fn new(source_prompt: &str, edit_prompt: &str) -> Self {
        Self {
            source_prompt: source_prompt.to_string(),
            edit_prompt: edit_prompt.to_string(),
            edited_words: Vec::new(),
            tau: crate::attention_control::DEFAULT_TAU,
            steps: crate::scheduler::DEFAULT_STEPS,
            mask_mode: MaskMode::Auto,
            user_mask: None,
            background_mode: BackgroundMode::DdimInverted,
            temporal_attention: false,
            seed: 0,
            blend_range: None,
        }
    }

    fn validate(&self, schedule: &NoiseSchedule, frames: usize) -> Result<()> {
        check_tau(self.tau)?;
        if self.steps != schedule.steps() {
            return Err(Error::InvalidArgument(format!("config asks for {} steps but the schedule has {}", self.steps, schedule.steps())));
        }
        match (&self.mask_mode, &self.user_mask) {
            (MaskMode::User, None) => return Err(Error::InvalidArgument("mask mode user needs a user mask".into())),
            (MaskMode::Auto | MaskMode::None, Some(_)) => {
                return Err(Error::InvalidArgument("a user mask is only allowed with mask mode user".into()))
            }
            _ => {}
        }
        match &self.user_mask {
            Some(UserMask::PerFrame(m)) if m.len() != frames => {
                Err(Error::InvalidArgument(format!("{} per-frame masks for {frames} frames", m.len())))
            }
            Some(UserMask::Replay(h)) if h.len() != self.steps || h.iter().any(|s| s.len() != frames) => {
                Err(Error::InvalidArgument("replayed mask history does not match steps × frames".into()))
            }
            _ => Ok(()),
        }
    }

    fn blends_at(&self, t: usize) -> bool {
        self.blend_range.is_none_or(|(lo, hi)| lo <= t && t <= hi)
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub z0: Vec<Latent>,
    /// `trajectories[f][t − 1]` is `ẑ_t` of frame `f`.
    pub trajectories: Vec<Vec<Latent>>,
    /// Cross-attention captured while inverting, per frame.
    pub source_attention: Vec<Vec<AttentionRecord>>,
}

impl InversionResult {
    pub fn frames(&self) -> usize {
        self.z0.len()
    }

    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    /// `ẑ_level` of a frame, with `ẑ_0 = z0`.
    pub fn latent(&self, frame: usize, level: usize) -> &Latent {
        if level == 0 {
            &self.z0[frame]
        } else {
            &self.trajectories[frame][level - 1]
        }
    }

    pub fn endpoints(&self) -> Vec<Latent> {
        (0..self.frames()).map(|f| self.latent(f, self.steps()).clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub frames: Vec<ImageFrame>,
    /// `masks[T − t][f]` is the mask used at step `t` for frame `f`.
    pub masks: Vec<Vec<BinaryMask>>,
    pub final_latents: Vec<Latent>,
    /// Cross-attention captured during the edit pass, per frame.
    pub target_attention: Vec<Vec<AttentionRecord>>,
}

impl EditResult {
    /// Masks of the last step (`t = 1`).
    pub fn last_masks(&self) -> &[BinaryMask] {
        self.masks.last().map_or(&[], Vec::as_slice)
    }
}

/// Elementwise `z_fg ⊙ m + z_bg ⊙ (1 − m)`, mask broadcast over channels.
pub fn blend(z_fg: &Latent, z_bg: &Latent, m: &BinaryMask) -> Result<Latent> {
    if z_fg.shape() != z_bg.shape() {
        return Err(Error::shape(&z_fg.shape(), &z_bg.shape()));
    }
    if z_fg.timestep != z_bg.timestep {
        return Err(Error::TimestepMismatch(z_fg.timestep, z_bg.timestep));
    }
    if m.dim() != (z_fg.height(), z_fg.width()) {
        return Err(Error::shape(&[z_fg.height(), z_fg.width()], &[m.dim().0, m.dim().1]));
    }
    let mut data = z_bg.data.clone();
    Zip::indexed(&mut data).and(&z_fg.data).for_each(|(_, y, x), out, &fg| {
        if m.mask[[y, x]] {
            *out = fg;
        }
    });
    Ok(Latent { data, timestep: z_fg.timestep })
}

fn check_frames(frames: &[ImageFrame]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Empty("clip".into()))?;
    let dim = first.pixels.dim();
    if let Some(f) = frames.iter().find(|f| f.pixels.dim() != dim) {
        let d = f.pixels.dim();
        return Err(Error::shape(&[dim.0, dim.1, dim.2], &[d.0, d.1, d.2]));
    }
    Ok(())
}

fn embed(denoiser: &DenoiserParams, text: &str) -> Result<(Vec<usize>, PromptEmbedding)> {
    let p = denoiser.tokenize(text)?;
    let e = denoiser.embed_prompt(&p)?;
    Ok((p.tokens, e))
}

/// One ε prediction per frame at level `t`. Frame `f` uses frame `f − 1` as
/// its temporal neighbor and frame 0 uses itself.
pub fn predict_all(
    denoiser: &DenoiserParams,
    latents: &[Latent],
    t: usize,
    schedule: &NoiseSchedule,
    prompt: &PromptEmbedding,
    temporal: bool,
) -> Result<Vec<(Array3<f64>, Vec<AttentionRecord>)>> {
    let level = NoiseLevel::of(schedule, t);
    (0..latents.len())
        .into_par_iter()
        .map(|f| {
            let mut capture = AttentionCapture::enabled();
            let mode =
                if temporal { AttentionMode::TemporalSpatial { neighbor: &latents[f.saturating_sub(1)] } } else { AttentionMode::PerFrame };
            let eps = denoiser.predict_noise(&latents[f], level, prompt, &mut capture, mode)?;
            Ok((eps, capture.records))
        })
        .collect()
}

/// DDIM inversion of every frame from `z0` up to `ẑ_T` under the source prompt.
pub fn invert_latents(
    z0: Vec<Latent>,
    source_prompt: &str,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    temporal: bool,
) -> Result<InversionResult> {
    if z0.is_empty() {
        return Err(Error::Empty("clip".into()));
    }
    let (_, prompt) = embed(denoiser, source_prompt)?;
    let n = z0.len();
    let mut current = z0.clone();
    let mut trajectories = vec![Vec::with_capacity(schedule.steps()); n];
    let mut source_attention = vec![Vec::new(); n];
    for t in 1..=schedule.steps() {
        // ε_θ is evaluated at the lower level, the only latent known at this point
        let preds = predict_all(denoiser, &current, t, schedule, &prompt, temporal)?;
        let next = current.par_iter().zip(&preds).map(|(z, (eps, _))| ddim_invert_step(z, eps, t, schedule)).collect::<Result<Vec<_>>>()?;
        for (f, (_, records)) in preds.into_iter().enumerate() {
            source_attention[f].extend(records);
            trajectories[f].push(next[f].clone());
        }
        current = next;
    }
    Ok(InversionResult { z0, trajectories, source_attention })
}

pub fn encode_frames(frames: &[ImageFrame], codec: &CodecParams) -> Result<Vec<Latent>> {
    check_frames(frames)?;
    frames.par_iter().map(|f| encode(f, codec)).collect()
}

pub fn decode_latents(latents: &[Latent], codec: &CodecParams) -> Result<Vec<ImageFrame>> {
    latents.par_iter().map(|z| decode(z, codec)).collect()
}

pub fn invert_video(
    frames: &[ImageFrame],
    source_prompt: &str,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    codec: &CodecParams,
    temporal: bool,
) -> Result<InversionResult> {
    invert_latents(encode_frames(frames, codec)?, source_prompt, schedule, denoiser, temporal)
}

/// Plain DDIM sampling from level-`T` latents down to 0 under `prompt`.
pub fn sample_latents(
    start: Vec<Latent>,
    prompt: &str,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    temporal: bool,
) -> Result<Vec<Latent>> {
    let (_, prompt) = embed(denoiser, prompt)?;
    let mut current = start;
    for t in (1..=schedule.steps()).rev() {
        let preds = predict_all(denoiser, &current, t, schedule, &prompt, temporal)?;
        current = current.par_iter().zip(&preds).map(|(z, (eps, _))| ddim_sample_step(z, eps, t, schedule)).collect::<Result<Vec<_>>>()?;
    }
    Ok(current)
}

/// Seeded noise for `(frame, level)`; one independent stream per pair.
pub fn seeded_noise(seed: u64, frame: usize, level: usize, shape: [usize; 3]) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 32) | level as u64);
    gaussian(&mut rng, shape)
}

/// `√ᾱ_T z0 + √(1−ᾱ_T) ε` per frame: the random-noise starting point.
pub fn randomly_noised_endpoints(z0: &[Latent], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<Latent>> {
    let t = schedule.steps();
    z0.iter().enumerate().map(|(f, z)| noise_to_level(z, t, &seeded_noise(seed, f, t, z.shape()), schedule)).collect()
}

/// The edited-word pair used when none is given: the first token position
/// where the prompts differ, clamped to each prompt. Empty for identical prompts.
pub fn default_pairs(src: &TextPrompt, tgt: &TextPrompt) -> Vec<(usize, usize)> {
    match first_difference(src, tgt) {
        Some(k) => vec![(k.min(src.len() - 1), k.min(tgt.len() - 1))],
        None => Vec::new(),
    }
}

fn resolve_pairs(config: &EditConfig, src: &[usize], tgt: &[usize]) -> Result<Vec<(usize, usize)>> {
    let pairs = if config.edited_words.is_empty() {
        let a = TextPrompt { tokens: src.to_vec(), raw: String::new() };
        let b = TextPrompt { tokens: tgt.to_vec(), raw: String::new() };
        default_pairs(&a, &b)
    } else {
        config.edited_words.clone()
    };
    for &(s, t) in &pairs {
        if s >= src.len() {
            return Err(Error::WordIndexOutOfRange { index: s, len: src.len() });
        }
        if t >= tgt.len() {
            return Err(Error::WordIndexOutOfRange { index: t, len: tgt.len() });
        }
    }
    if pairs.is_empty() && config.mask_mode == MaskMode::Auto {
        return Err(Error::InvalidArgument("prompts are identical and no edited word was given".into()));
    }
    Ok(pairs)
}

fn user_masks(mask: &UserMask, frames: usize) -> Result<Option<Vec<BinaryMask>>> {
    Ok(match mask {
        UserMask::Static(m) => Some(vec![resize_user_mask(m)?; frames]),
        UserMask::PerFrame(ms) => Some(ms.iter().map(resize_user_mask).collect::<Result<_>>()?),
        UserMask::Replay(_) => None,
    })
}

/// The edit pass, reusing an existing inversion.
pub fn edit_from_inversion(
    inversion: &InversionResult,
    config: &EditConfig,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    codec: &CodecParams,
) -> Result<EditResult> {
    let n = inversion.frames();
    config.validate(schedule, n)?;
    if inversion.steps() != schedule.steps() {
        return Err(Error::InvalidArgument("inversion was run on a different ladder".into()));
    }
    let (src_tokens, _) = embed(denoiser, &config.source_prompt)?;
    let (tgt_tokens, prompt) = embed(denoiser, &config.edit_prompt)?;
    let pairs = resolve_pairs(config, &src_tokens, &tgt_tokens)?;
    let (h, w) = (inversion.z0[0].height(), inversion.z0[0].width());
    let fixed_user = match &config.user_mask {
        Some(m) => user_masks(m, n)?,
        None => None,
    };
    if let Some(ms) = &fixed_user {
        if ms.iter().any(|m| m.dim() != (h, w)) {
            return Err(Error::InvalidArgument("user mask does not match the latent grid".into()));
        }
    }

    let steps = schedule.steps();
    let mut current = inversion.endpoints();
    let mut target_attention: Vec<Vec<AttentionRecord>> = vec![Vec::new(); n];
    let mut masks = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let preds = predict_all(denoiser, &current, t, schedule, &prompt, config.temporal_attention)?;
        let mut fg = Vec::with_capacity(n);
        for (f, (eps, records)) in preds.into_iter().enumerate() {
            fg.push(ddim_sample_step(&current[f], &eps, t, schedule)?);
            target_attention[f].extend(records);
        }
        let step_masks: Vec<BinaryMask> = match config.mask_mode {
            MaskMode::None => vec![BinaryMask::filled(h, w, true); n],
            MaskMode::User => match (&fixed_user, &config.user_mask) {
                (Some(ms), _) => ms.clone(),
                (None, Some(UserMask::Replay(history))) => history[steps - t].clone(),
                _ => unreachable!("validated above"),
            },
            MaskMode::Auto => (0..n)
                .into_par_iter()
                .map(|f| attention_mask(&inversion.source_attention[f], &target_attention[f], &pairs, t, config.tau))
                .collect::<Result<_>>()?,
        };
        if step_masks.iter().any(|m| m.dim() != (h, w)) {
            return Err(Error::InvalidArgument("mask does not match the latent grid".into()));
        }
        current = if config.blends_at(t) {
            fg.iter()
                .enumerate()
                .map(|(f, z_fg)| {
                    let bg = match config.background_mode {
                        BackgroundMode::DdimInverted => inversion.latent(f, t - 1).clone(),
                        BackgroundMode::RandomlyNoised => {
                            let z0 = &inversion.z0[f];
                            noise_to_level(z0, t - 1, &seeded_noise(config.seed, f, t - 1, z0.shape()), schedule)?
                        }
                    };
                    blend(z_fg, &bg, &step_masks[f])
                })
                .collect::<Result<_>>()?
        } else {
            fg
        };
        masks.push(step_masks);
    }
    let frames = decode_latents(&current, codec)?;
    Ok(EditResult { frames, masks, final_latents: current, target_attention })
}

/// Inverts the clip under the source prompt, then edits it.
pub fn edit_video(
    frames: &[ImageFrame],
    config: &EditConfig,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    codec: &CodecParams,
) -> Result<EditResult> {
    config.validate(schedule, frames.len())?;
    let inversion = invert_video(frames, &config.source_prompt, schedule, denoiser, codec, config.temporal_attention)?;
    edit_from_inversion(&inversion, config, schedule, denoiser, codec)
}

/// Inversion followed by unblended sampling under the same prompt.
pub fn reconstruct_from_inversion(
    inversion: &InversionResult,
    source_prompt: &str,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    codec: &CodecParams,
    temporal: bool,
) -> Result<EditResult> {
    let mut config = EditConfig::new(source_prompt, source_prompt);
    config.steps = schedule.steps();
    config.mask_mode = MaskMode::None;
    config.temporal_attention = temporal;
    edit_from_inversion(inversion, &config, schedule, denoiser, codec)
}

pub fn reconstruct_video(
    frames: &[ImageFrame],
    source_prompt: &str,
    schedule: &NoiseSchedule,
    denoiser: &DenoiserParams,
    codec: &CodecParams,
    temporal: bool,
) -> Result<EditResult> {
    let inversion = invert_video(frames, source_prompt, schedule, denoiser, codec, temporal)?;
    reconstruct_from_inversion(&inversion, source_prompt, schedule, denoiser, codec, temporal)
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_error(a: &Latent, b: &Latent) -> f64 {
    let diff: f64 = Zip::from(&a.data).and(&b.data).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
    diff.sqrt() / b.l2_norm().max(1e-12)
}

pub fn mean_relative_error(a: &[Latent], b: &[Latent]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(x, y)).sum::<f64>() / a.len().max(1) as f64
}
