//! `key=value` run configuration. Every CLI run writes one as its manifest,
//! and any subcommand can be replayed from it with `--config`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scheduler::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

pub const DEFAULT_TAU: f64 = crate::attention_control::DEFAULT_TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Auto,
    User,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    DdimInverted,
    RandomlyNoised,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "user" => Ok(Self::User),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("mask mode must be auto, user or none, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::User => "user",
            Self::None => "none",
        })
    }
}

impl FromStr for BackgroundMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim-inverted" => Ok(Self::DdimInverted),
            "randomly-noised" => Ok(Self::RandomlyNoised),
            _ => Err(Error::Config(format!("background mode must be ddim-inverted or randomly-noised, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DdimInverted => "ddim-inverted",
            Self::RandomlyNoised => "randomly-noised",
        })
    }
}

/// Parses `"1:1,3:3"` into position pairs.
pub fn parse_word_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| Error::Config(format!("edit word {p:?} is not SRC:DST")))?;
            let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad edit word index in {p:?}")));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn format_word_pairs(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    /// Input clip directory (or corpus directory for training commands).
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub source_prompt: Option<String>,
    pub edit_prompt: Option<String>,
    pub edit_words: Vec<(usize, usize)>,
    pub tau: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mask_mode: MaskMode,
    pub user_mask: Option<PathBuf>,
    pub background_mode: BackgroundMode,
    pub temporal: bool,
    pub blend_from: Option<usize>,
    pub blend_to: Option<usize>,
    pub seed: u64,
    pub clips: usize,
    pub frames: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub input_sha256: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            input: None,
            out: None,
            weights: None,
            scorer: None,
            vocab: None,
            source_prompt: None,
            edit_prompt: None,
            edit_words: Vec::new(),
            tau: DEFAULT_TAU,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            mask_mode: MaskMode::Auto,
            user_mask: None,
            background_mode: BackgroundMode::DdimInverted,
            temporal: false,
            blend_from: None,
            blend_to: None,
            seed: 0,
            clips: 10,
            frames: 8,
            train_steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            input_sha256: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        Self { command: command.to_string(), ..Default::default() }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "command" => self.command = v.to_string(),
            "input" => self.input = path(v),
            "out" => self.out = path(v),
            "weights" => self.weights = path(v),
            "scorer" => self.scorer = path(v),
            "vocab" => self.vocab = path(v),
            "source_prompt" => self.source_prompt = Some(v.to_string()),
            "edit_prompt" => self.edit_prompt = Some(v.to_string()),
            "edit_words" => self.edit_words = parse_word_pairs(v)?,
            "tau" => self.tau = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "user_mask" => self.user_mask = path(v),
            "background_mode" => self.background_mode = v.parse()?,
            "temporal" => self.temporal = num(key, v)?,
            "blend_from" => self.blend_from = Some(num(key, v)?),
            "blend_to" => self.blend_to = Some(num(key, v)?),
            "seed" => self.seed = num(key, v)?,
            "clips" => self.clips = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "train_steps" => self.train_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "input_sha256" => self.input_sha256 = Some(v.to_string()),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Lines of `key=value`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::attention_control::check_tau(self.tau).map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if (self.mask_mode == MaskMode::User) != self.user_mask.is_some() {
            return Err(Error::Config("user_mask must be given exactly when mask_mode=user".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "input={}", p(&self.input));
        let _ = writeln!(s, "out={}", p(&self.out));
        let _ = writeln!(s, "weights={}", p(&self.weights));
        let _ = writeln!(s, "scorer={}", p(&self.scorer));
        let _ = writeln!(s, "vocab={}", p(&self.vocab));
        if let Some(v) = &self.source_prompt {
            let _ = writeln!(s, "source_prompt={v}");
        }
        if let Some(v) = &self.edit_prompt {
            let _ = writeln!(s, "edit_prompt={v}");
        }
        let _ = writeln!(s, "edit_words={}", format_word_pairs(&self.edit_words));
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "beta_start={}", self.beta_start);
        let _ = writeln!(s, "beta_end={}", self.beta_end);
        let _ = writeln!(s, "mask_mode={}", self.mask_mode);
        let _ = writeln!(s, "user_mask={}", p(&self.user_mask));
        let _ = writeln!(s, "background_mode={}", self.background_mode);
        let _ = writeln!(s, "temporal={}", self.temporal);
        if let Some(v) = self.blend_from {
            let _ = writeln!(s, "blend_from={v}");
        }
        if let Some(v) = self.blend_to {
            let _ = writeln!(s, "blend_to={v}");
        }
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "clips={}", self.clips);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "train_steps={}", self.train_steps);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        if let Some(v) = &self.input_sha256 {
            let _ = writeln!(s, "input_sha256={v}");
        }
        s
    }
}
