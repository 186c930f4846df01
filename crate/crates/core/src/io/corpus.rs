//! Synthetic clip corpus: one colored shape translating across a textured
//! floor, with a caption and a per-frame bounding box of the object.
//!
//! Layout on disk: `<root>/clip_NNN/frame_KK.ppm` plus `<root>/clip_NNN/manifest.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_control::{resize_user_mask, BinaryMask};
use crate::autoencoder::ImageFrame;
use crate::error::{Error, Result};

pub const OBJECT_COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "diamond"];
pub const FLOORS: [&str; 4] = ["gray", "brown", "black", "white"];

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.9, 0.1, 0.1],
        "green" => [0.1, 0.8, 0.2],
        "blue" => [0.15, 0.25, 0.95],
        "yellow" => [0.95, 0.9, 0.1],
        "purple" => [0.55, 0.15, 0.75],
        "orange" => [0.98, 0.55, 0.1],
        "cyan" => [0.1, 0.85, 0.9],
        "magenta" => [0.9, 0.15, 0.8],
        "gray" => [0.5, 0.5, 0.5],
        "brown" => [0.45, 0.3, 0.15],
        "black" => [0.08, 0.08, 0.08],
        "white" => [0.92, 0.92, 0.92],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub clips: usize,
    pub frames: usize,
    pub size: usize,
    /// Bounds on the object box area as a fraction of the frame.
    pub min_area: f64,
    pub max_area: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { clips: 10, frames: 8, size: 64, min_area: 0.06, max_area: 0.15, seed: 0 }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 {
            return Err(Error::InvalidArgument("corpus needs at least one clip and one frame".into()));
        }
        if self.size == 0 || !self.size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!("frame size {} is not a positive multiple of 8", self.size)));
        }
        if !(0.0 < self.min_area && self.min_area <= self.max_area && self.max_area < 0.5) {
            return Err(Error::InvalidArgument("area bounds must satisfy 0 < min <= max < 0.5".into()));
        }
        let lo = (self.min_area * (self.size * self.size) as f64).sqrt().ceil() as usize;
        let hi = (self.max_area * (self.size * self.size) as f64).sqrt().floor() as usize;
        if lo > hi || lo < 4 {
            return Err(Error::InvalidArgument("area bounds admit no integer object extent".into()));
        }
        Ok(())
    }

    /// Admissible square box side lengths in pixels.
    fn extent_range(&self) -> (usize, usize) {
        let px = (self.size * self.size) as f64;
        ((self.min_area * px).sqrt().ceil() as usize, (self.max_area * px).sqrt().floor() as usize)
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxAnnotation {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxAnnotation {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn pixel_mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1)
    }

    /// Latent cells covered by the box.
    pub fn latent_mask(&self, h: usize, w: usize) -> Result<BinaryMask> {
        resize_user_mask(&self.pixel_mask(h, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipManifest {
    pub id: String,
    pub caption: String,
    pub color: String,
    pub shape: String,
    pub floor: String,
    pub frames: Vec<String>,
    pub boxes: Vec<BoxAnnotation>,
}

impl ClipManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "id={}", self.id);
        let _ = writeln!(s, "caption={}", self.caption);
        let _ = writeln!(s, "color={}", self.color);
        let _ = writeln!(s, "shape={}", self.shape);
        let _ = writeln!(s, "floor={}", self.floor);
        let _ = writeln!(s, "frames={}", self.frames.len());
        for (i, (f, b)) in self.frames.iter().zip(&self.boxes).enumerate() {
            let _ = writeln!(s, "frame.{i}={f}");
            let _ = writeln!(s, "box.{i}={} {} {} {}", b.x0, b.y0, b.x1, b.y1);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("clip manifest: {m}"));
        let mut m = ClipManifest {
            id: String::new(),
            caption: String::new(),
            color: String::new(),
            shape: String::new(),
            floor: String::new(),
            frames: Vec::new(),
            boxes: Vec::new(),
        };
        let mut count = None;
        let mut frames = std::collections::BTreeMap::new();
        let mut boxes = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match k {
                "id" => m.id = v.to_string(),
                "caption" => m.caption = v.to_string(),
                "color" => m.color = v.to_string(),
                "shape" => m.shape = v.to_string(),
                "floor" => m.floor = v.to_string(),
                "frames" => count = Some(v.parse::<usize>().map_err(|_| bad(format!("bad frame count {v:?}")))?),
                _ => {
                    let (kind, idx) = k.split_once('.').ok_or_else(|| bad(format!("unknown key {k:?}")))?;
                    let idx: usize = idx.parse().map_err(|_| bad(format!("bad index in {k:?}")))?;
                    match kind {
                        "frame" => {
                            frames.insert(idx, v.to_string());
                        }
                        "box" => {
                            let n: Vec<usize> = v
                                .split_whitespace()
                                .map(str::parse)
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|_| bad(format!("bad box {v:?}")))?;
                            if n.len() != 4 || n[0] >= n[2] || n[1] >= n[3] {
                                return Err(bad(format!("bad box {v:?}")));
                            }
                            boxes.insert(idx, BoxAnnotation { x0: n[0], y0: n[1], x1: n[2], y1: n[3] });
                        }
                        _ => return Err(bad(format!("unknown key {k:?}"))),
                    }
                }
            }
        }
        let n = count.ok_or_else(|| bad("missing frame count".into()))?;
        if n == 0 || frames.len() != n || boxes.len() != n || frames.keys().copied().ne(0..n) || boxes.keys().copied().ne(0..n) {
            return Err(bad(format!("expected frame.i and box.i for i in 0..{n}")));
        }
        m.frames = frames.into_values().collect();
        m.boxes = boxes.into_values().collect();
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub manifest: ClipManifest,
    pub frames: Vec<ImageFrame>,
}

fn inside(shape: &str, u: f64, v: f64) -> bool {
    // (u, v) relative to the box, each in [0, 1]
    match shape {
        "square" => true,
        "circle" => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        "triangle" => (u - 0.5).abs() <= 0.5 * v,
        "diamond" => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        _ => false,
    }
}

fn floor_texture(rng: &mut ChaCha8Rng, size: usize, base: [f64; 3]) -> Array3<f64> {
    let period = rng.gen_range(6..12) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.03..0.03)).collect();
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let stripe = 0.04 * ((x as f64 + 0.5 * y as f64) * std::f64::consts::TAU / period + phase).sin();
        (base[c] + stripe + noise[y * size + x]).clamp(0.0, 1.0)
    })
}

/// Renders clip `index` of the corpus. Each clip has its own seeded stream.
fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

pub fn render_clip(spec: &CorpusSpec, index: usize) -> Result<SyntheticClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let color = OBJECT_COLORS[rng.gen_range(0..OBJECT_COLORS.len())];
    let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let floor = FLOORS[rng.gen_range(0..FLOORS.len())];
    let (lo, hi) = spec.extent_range();
    let extent = rng.gen_range(lo..=hi);
    let size = spec.size;
    let travel = size - extent;
    let n = spec.frames;
    let steps = n.saturating_sub(1).max(1);
    // velocity chosen so the box stays in frame for the whole clip
    let max_speed = (travel / steps).min(4) as i64;
    let mut vel = || if max_speed == 0 { 0 } else { rng.gen_range(-max_speed..=max_speed) };
    let (vx, vy) = (vel(), vel());
    let span = |v: i64| (v.unsigned_abs() as usize) * steps;
    let start = |rng: &mut ChaCha8Rng, v: i64| {
        let free = travel - span(v);
        let s = rng.gen_range(0..=free);
        if v < 0 {
            s + span(v)
        } else {
            s
        }
    };
    let (x_start, y_start) = (start(&mut rng, vx), start(&mut rng, vy));

    let floor_img = floor_texture(&mut rng, size, color_rgb(floor).expect("known floor"));
    let rgb = color_rgb(color).expect("known color");
    let shade: Vec<f64> = (0..extent * extent).map(|_| rng.gen_range(-0.02..0.02)).collect();

    let mut frames = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    for k in 0..n {
        let x0 = (x_start as i64 + vx * k as i64) as usize;
        let y0 = (y_start as i64 + vy * k as i64) as usize;
        let b = BoxAnnotation { x0, y0, x1: x0 + extent, y1: y0 + extent };
        let mut px = floor_img.clone();
        for dy in 0..extent {
            for dx in 0..extent {
                let (u, v) = ((dx as f64 + 0.5) / extent as f64, (dy as f64 + 0.5) / extent as f64);
                if inside(shape, u, v) {
                    for c in 0..3 {
                        px[[c, y0 + dy, x0 + dx]] = (rgb[c] + shade[dy * extent + dx]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        frames.push(ImageFrame::new(px)?);
        boxes.push(b);
        names.push(format!("frame_{k:02}.ppm"));
    }
    let manifest = ClipManifest {
        id: format!("clip_{index:03}"),
        caption: format!("{} {color} {shape} on {floor} floor", article(color)),
        color: color.into(),
        shape: shape.into(),
        floor: floor.into(),
        frames: names,
        boxes,
    };
    Ok(SyntheticClip { manifest, frames })
}

pub fn generate(spec: &CorpusSpec) -> Result<Vec<SyntheticClip>> {
    (0..spec.clips).map(|i| render_clip(spec, i)).collect()
}

pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, frame) in clip.manifest.frames.iter().zip(&clip.frames) {
        super::ppm::write_frame(&dir.join(name), frame)?;
    }
    super::write_atomic(&dir.join("manifest.txt"), clip.manifest.to_text().as_bytes())
}

/// Renders and writes the whole corpus; returns the clip directories.
pub fn gen_data(spec: &CorpusSpec, root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let clip = render_clip(spec, i)?;
        let dir = root.join(&clip.manifest.id);
        write_clip(&dir, &clip)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Frame files of a directory: those listed in `manifest.txt` if present,
/// otherwise every `*.ppm` in name order.
pub fn frame_paths(dir: &Path) -> Result<(Option<ClipManifest>, Vec<PathBuf>)> {
    let mpath = dir.join("manifest.txt");
    if mpath.exists() {
        let m = ClipManifest::parse(&super::read_text(&mpath)?)?;
        let paths = m.frames.iter().map(|f| dir.join(f)).collect();
        return Ok((Some(m), paths));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no .ppm frames in {}", dir.display())));
    }
    Ok((None, paths))
}

pub fn load_clip(dir: &Path) -> Result<(Option<ClipManifest>, Vec<ImageFrame>)> {
    let (m, paths) = frame_paths(dir)?;
    let frames = paths.iter().map(|p| super::ppm::read_frame(p)).collect::<Result<Vec<_>>>()?;
    Ok((m, frames))
}

/// Clip directories under a corpus root, sorted by name.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no clips under {}", root.display())));
    }
    Ok(dirs)
}
