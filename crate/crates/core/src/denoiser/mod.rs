//! Toy conditional noise predictor `ε_θ(z_t, t, p)`.
//!
//! Layout: 1×1 input projection → residual conv blocks → one self-attention
//! block → one cross-attention block → residual conv blocks → 1×1 output
//! projection. Single head, width 64 by default. The noise level enters as a
//! sinusoidal embedding pushed through a small MLP and added to the features.
//!
//! The self-attention block can run in temporal-spatial mode, where keys and
//! values also come from a neighbor frame's features at the same layer. The
//! cross-attention block can be observed through an [`AttentionCapture`].

pub mod text;
pub mod train;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention_control::AttentionRecord;
use crate::error::{Error, Result};
use crate::io::container::TensorContainer;
use crate::scheduler::{Latent, NoiseSchedule};
use crate::tape::{Tape, Var};
use crate::temporal;

pub use text::{embed_tokens, first_difference, tokenize, PromptEmbedding, TextPrompt, Vocab};

pub const CROSS_LAYER: &str = "cross.0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub latent_channels: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub res_before: usize,
    pub res_after: usize,
    /// Seed of the codec whose latents the model was trained on.
    pub codec_seed: u64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_channels: crate::autoencoder::LATENT_CHANNELS,
            width: 64,
            embed_dim: 64,
            time_dim: 64,
            vocab_size: text::DEFAULT_WORDS.len(),
            res_before: 2,
            res_after: 2,
            codec_seed: 0,
        }
    }
}

impl Architecture {
    pub fn to_text(&self) -> String {
        format!(
            "latent_channels={}\nwidth={}\nembed_dim={}\ntime_dim={}\nvocab_size={}\nres_before={}\nres_after={}\ncodec_seed={}\n",
            self.latent_channels,
            self.width,
            self.embed_dim,
            self.time_dim,
            self.vocab_size,
            self.res_before,
            self.res_after,
            self.codec_seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut arch = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad architecture line {line:?}")))?;
            let n: u64 = v.trim().parse().map_err(|_| Error::Format(format!("bad architecture value {line:?}")))?;
            match k.trim() {
                "latent_channels" => arch.latent_channels = n as usize,
                "width" => arch.width = n as usize,
                "embed_dim" => arch.embed_dim = n as usize,
                "time_dim" => arch.time_dim = n as usize,
                "vocab_size" => arch.vocab_size = n as usize,
                "res_before" => arch.res_before = n as usize,
                "res_after" => arch.res_after = n as usize,
                "codec_seed" => arch.codec_seed = n,
                other => return Err(Error::Format(format!("unknown architecture key {other}"))),
            }
        }
        Ok(arch)
    }

    fn res_blocks(&self) -> usize {
        self.res_before + self.res_after
    }

    /// Every parameter with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (c, w, d, td) = (self.latent_channels, self.width, self.embed_dim, self.time_dim);
        let mut v = vec![
            ("tok_emb".to_string(), (self.vocab_size, d)),
            ("time.w1".into(), (td, w)),
            ("time.b1".into(), (1, w)),
            ("time.w2".into(), (w, w)),
            ("time.b2".into(), (1, w)),
            ("in.w".into(), (c, w)),
            ("in.b".into(), (1, w)),
        ];
        for k in 0..self.res_blocks() {
            v.push((format!("res{k}.conv1.w"), (9 * w, w)));
            v.push((format!("res{k}.conv1.b"), (1, w)));
            v.push((format!("res{k}.temb.w"), (w, w)));
            v.push((format!("res{k}.conv2.w"), (9 * w, w)));
            v.push((format!("res{k}.conv2.b"), (1, w)));
        }
        for (prefix, kv_in) in [("self", w), ("cross", d)] {
            v.push((format!("{prefix}.wq"), (w, w)));
            v.push((format!("{prefix}.wk"), (kv_in, w)));
            v.push((format!("{prefix}.wv"), (kv_in, w)));
            v.push((format!("{prefix}.wo"), (w, w)));
            v.push((format!("{prefix}.bo"), (1, w)));
        }
        v.push(("out.w".into(), (w, c)));
        v.push(("out.b".into(), (1, c)));
        v.push(("skip.w".into(), (w, c)));
        v.push(("skip.b".into(), (1, c)));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub vocab: Vocab,
    tensors: BTreeMap<String, Array2<f64>>,
}

/// Noise level fed to the denoiser: the ladder index plus its `ᾱ_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn of(schedule: &NoiseSchedule, t: usize) -> Self {
        Self { t, alpha_bar: schedule.alpha_bar(t) }
    }

    /// Continuous time in `[0, 1000]` used for the sinusoidal embedding. It
    /// depends only on `ᾱ`, so strided ladders share the trained embedding.
    pub fn embedding_time(&self) -> f64 {
        1000.0 * (1.0 - self.alpha_bar).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AttentionCapture {
    pub enabled: bool,
    pub records: Vec<AttentionRecord>,
}

impl AttentionCapture {
    pub fn enabled() -> Self {
        Self { enabled: true, records: Vec::new() }
    }

    pub fn disabled() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionMode<'a> {
    PerFrame,
    /// Self-attention keys/values come from `[neighbor; self]`.
    TemporalSpatial {
        neighbor: &'a Latent,
    },
}

type Bound = BTreeMap<String, Var>;

struct Forward {
    eps: Var,
    cross_map: Var,
}

/// `(c, h, w)` → `(h·w, c)`.
pub fn latent_to_sites(data: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = data.dim();
    Array2::from_shape_fn((h * w, c), |(r, k)| data[[k, r / w, r % w]])
}

/// `(h·w, c)` → `(c, h, w)`.
pub fn sites_to_latent(sites: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((sites.ncols(), h, w), |(k, i, j)| sites[[i * w + j, k]])
}

impl DenoiserParams {
    /// Seeded random initialization.
    pub fn init(arch: Architecture, vocab: Vocab, seed: u64) -> Result<Self> {
        if vocab.len() != arch.vocab_size {
            return Err(Error::InvalidArgument(format!("vocabulary has {} words, architecture expects {}", vocab.len(), arch.vocab_size)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in arch.param_shapes() {
            let std = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bo") {
                0.0
            } else if name == "tok_emb" {
                1.0
            } else if name.ends_with("conv2.w") || name.ends_with(".wo") || name == "out.w" || name == "skip.w" {
                0.1 / (r as f64).sqrt()
            } else {
                1.0 / (r as f64).sqrt()
            };
            let m = Array2::from_shape_fn((r, c), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            tensors.insert(name, m);
        }
        Ok(Self { arch, vocab, tensors })
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Array2<f64>> {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn tokenize(&self, text: &str) -> Result<TextPrompt> {
        tokenize(text, &self.vocab)
    }

    pub fn embed_prompt(&self, prompt: &TextPrompt) -> Result<PromptEmbedding> {
        embed_tokens(&prompt.tokens, self.get("tok_emb"))
    }

    pub fn self_attention_projections(&self) -> temporal::AttentionProjections {
        temporal::AttentionProjections { wq: self.get("self.wq").clone(), wk: self.get("self.wk").clone(), wv: self.get("self.wv").clone() }
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v))).collect()
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.channels() != self.arch.latent_channels || z.height() == 0 || z.width() == 0 {
            return Err(Error::shape(&[self.arch.latent_channels, z.height(), z.width()], &z.shape()));
        }
        Ok(())
    }

    fn time_embedding(&self, tape: &mut Tape<'_>, p: &Bound, level: NoiseLevel) -> Var {
        let sin = text::sinusoidal(level.embedding_time(), self.arch.time_dim);
        let e = tape.constant(Array2::from_shape_vec((1, sin.len()), sin).expect("row"));
        let h = tape.matmul(e, p["time.w1"]);
        let h = tape.add_row(h, p["time.b1"]);
        let h = tape.silu(h);
        let h = tape.matmul(h, p["time.w2"]);
        tape.add_row(h, p["time.b2"])
    }

    fn conv3(&self, tape: &mut Tape<'_>, x: Var, w: Var, b: Var, hw: (usize, usize)) -> Var {
        let cols = tape.im2col3(x, hw.0, hw.1);
        let y = tape.matmul(cols, w);
        tape.add_row(y, b)
    }

    fn res_block(&self, tape: &mut Tape<'_>, p: &Bound, k: usize, x: Var, temb: Var, hw: (usize, usize)) -> Var {
        let a = tape.layer_norm_rows(x);
        let a = tape.silu(a);
        let a = self.conv3(tape, a, p[&format!("res{k}.conv1.w")], p[&format!("res{k}.conv1.b")], hw);
        let t = tape.matmul(temb, p[&format!("res{k}.temb.w")]);
        let a = tape.add_row(a, t);
        let a = tape.layer_norm_rows(a);
        let a = tape.silu(a);
        let a = self.conv3(tape, a, p[&format!("res{k}.conv2.w")], p[&format!("res{k}.conv2.b")], hw);
        tape.add(x, a)
    }

    /// Features at the self-attention input (before its normalization).
    fn prefix(&self, tape: &mut Tape<'_>, p: &Bound, z: &Latent, temb: Var) -> Var {
        let hw = (z.height(), z.width());
        let x = tape.constant(latent_to_sites(&z.data));
        let x = tape.matmul(x, p["in.w"]);
        let x = tape.add_row(x, p["in.b"]);
        let mut x = tape.add_row(x, temb);
        for k in 0..self.arch.res_before {
            x = self.res_block(tape, p, k, x, temb, hw);
        }
        x
    }

    fn forward(&self, tape: &mut Tape<'_>, p: &Bound, z: &Latent, level: NoiseLevel, prompt: Var, neighbor: Option<&Latent>) -> Forward {
        let hw = (z.height(), z.width());
        let temb = self.time_embedding(tape, p, level);
        let mut x = self.prefix(tape, p, z, temb);

        let n = tape.layer_norm_rows(x);
        let kv = match neighbor {
            Some(nb) => {
                let nx = self.prefix(tape, p, nb, temb);
                let nn = tape.layer_norm_rows(nx);
                tape.concat_rows(nn, n)
            }
            None => n,
        };
        let (o, _) = temporal::attend(tape, n, kv, p["self.wq"], p["self.wk"], p["self.wv"]);
        let o = tape.matmul(o, p["self.wo"]);
        let o = tape.add_row(o, p["self.bo"]);
        x = tape.add(x, o);

        let n = tape.layer_norm_rows(x);
        let (o, cross_map) = temporal::attend(tape, n, prompt, p["cross.wq"], p["cross.wk"], p["cross.wv"]);
        let o = tape.matmul(o, p["cross.wo"]);
        let o = tape.add_row(o, p["cross.bo"]);
        x = tape.add(x, o);

        for k in self.arch.res_before..self.arch.res_blocks() {
            x = self.res_block(tape, p, k, x, temb, hw);
        }
        let a = tape.layer_norm_rows(x);
        let a = tape.silu(a);
        let a = tape.matmul(a, p["out.w"]);
        let a = tape.add_row(a, p["out.b"]);
        // Noise-level gated per-channel skip from the input latent.
        let gate = tape.matmul(temb, p["skip.w"]);
        let gate = tape.add_row(gate, p["skip.b"]);
        let zs = tape.constant(latent_to_sites(&z.data));
        let skip = tape.mul_row(zs, gate);
        let eps = tape.add(a, skip);
        Forward { eps, cross_map }
    }

    /// `ε̂ = ε_θ(z_t, t, p)`, shaped like `z_t`.
    ///
    /// With capture enabled, appends one record per cross-attention block.
    /// Capturing reads values off the tape and never alters the result.
    pub fn predict_noise(
        &self,
        z_t: &Latent,
        level: NoiseLevel,
        prompt: &PromptEmbedding,
        capture: &mut AttentionCapture,
        mode: AttentionMode<'_>,
    ) -> Result<Array3<f64>> {
        self.check_latent(z_t)?;
        if prompt.matrix.ncols() != self.arch.embed_dim || prompt.is_empty() {
            return Err(Error::shape(&[prompt.len(), self.arch.embed_dim], prompt.matrix.shape()));
        }
        let neighbor = match mode {
            AttentionMode::PerFrame => None,
            AttentionMode::TemporalSpatial { neighbor } => {
                if neighbor.shape() != z_t.shape() {
                    return Err(Error::shape(&z_t.shape(), &neighbor.shape()));
                }
                Some(neighbor)
            }
        };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let prompt_var = tape.param(&prompt.matrix);
        let f = self.forward(&mut tape, &p, z_t, level, prompt_var, neighbor);
        if capture.enabled {
            capture.records.push(AttentionRecord {
                timestep: level.t,
                layer: CROSS_LAYER.to_string(),
                height: z_t.height(),
                width: z_t.width(),
                map: tape.value(f.cross_map).clone(),
            });
        }
        Ok(sites_to_latent(tape.value(f.eps), z_t.height(), z_t.width()))
    }

    fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        p: &Bound,
        z_t: &Latent,
        level: NoiseLevel,
        tokens: &[usize],
        eps: &Array3<f64>,
    ) -> Result<Var> {
        self.check_latent(z_t)?;
        if z_t.data.dim() != eps.dim() {
            return Err(Error::shape(z_t.data.shape(), eps.shape()));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.arch.vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: self.arch.vocab_size });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        let d = self.arch.embed_dim;
        let pos = Array2::from_shape_fn((tokens.len(), d), |(i, j)| text::sinusoidal(i as f64, d)[j]);
        let rows = tape.gather_rows(p["tok_emb"], tokens);
        let pos = tape.constant(pos);
        let prompt = tape.add(rows, pos);
        let f = self.forward(tape, p, z_t, level, prompt, None);
        Ok(tape.mse(f.eps, latent_to_sites(eps)))
    }

    /// Denoising objective `mean (ε − ε_θ(z_t, t, p))²` for one example.
    pub fn loss(&self, z_t: &Latent, level: NoiseLevel, tokens: &[usize], eps: &Array3<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &p, z_t, level, tokens, eps)?;
        Ok(tape.value(l)[[0, 0]])
    }

    /// Loss plus its gradient w.r.t. every parameter.
    pub fn loss_and_gradients(
        &self,
        z_t: &Latent,
        level: NoiseLevel,
        tokens: &[usize],
        eps: &Array3<f64>,
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &p, z_t, level, tokens, eps)?;
        let mut grads = tape.backward(l);
        let out = p
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Array2::zeros(self.tensors[name].dim()));
                (name.clone(), g)
            })
            .collect();
        Ok((tape.value(l)[[0, 0]], out))
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_text("arch", &self.arch.to_text())?;
        c.insert_text("vocab", &self.vocab.to_text())?;
        for (name, t) in &self.tensors {
            c.insert_f64(name.as_str(), t)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let arch = Architecture::parse(&c.get_text("arch")?)?;
        let vocab = Vocab::parse(&c.get_text("vocab")?)?;
        if vocab.len() != arch.vocab_size {
            return Err(Error::Format("vocabulary size disagrees with architecture".into()));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.param_shapes() {
            let t = c.get_matrix(&name)?;
            if t.dim() != shape {
                return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {shape:?}", t.dim())));
            }
            tensors.insert(name, t);
        }
        Ok(Self { arch, vocab, tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_arch() -> Architecture {
        Architecture { latent_channels: 12, width: 8, embed_dim: 8, time_dim: 8, res_before: 1, res_after: 1, ..Default::default() }
    }

    fn random_latent(seed: u64, arch: &Architecture, h: usize, w: usize) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent { data: Array3::from_shape_fn((arch.latent_channels, h, w), |_| StandardNormal.sample(&mut rng)), timestep: 3 }
    }

    fn setup() -> (DenoiserParams, Latent, PromptEmbedding, NoiseLevel) {
        let arch = small_arch();
        let params = DenoiserParams::init(arch.clone(), Vocab::default(), 11).unwrap();
        let z = random_latent(1, &arch, 3, 4);
        let p = params.embed_prompt(&params.tokenize("a red square on gray floor").unwrap()).unwrap();
        (params, z, p, NoiseLevel { t: 3, alpha_bar: 0.6 })
    }

    #[test]
    fn prediction_is_deterministic_and_shaped() {
        let (params, z, p, level) = setup();
        let mut c1 = AttentionCapture::enabled();
        let mut c2 = AttentionCapture::enabled();
        let a = params.predict_noise(&z, level, &p, &mut c1, AttentionMode::PerFrame).unwrap();
        let b = params.predict_noise(&z, level, &p, &mut c2, AttentionMode::PerFrame).unwrap();
        assert_eq!(a.dim(), z.data.dim());
        assert_eq!(a, b);
        assert_eq!(c1.records, c2.records);
    }

    #[test]
    fn capture_is_observational() {
        let (params, z, p, level) = setup();
        let mut on = AttentionCapture::enabled();
        let mut off = AttentionCapture::disabled();
        let a = params.predict_noise(&z, level, &p, &mut on, AttentionMode::PerFrame).unwrap();
        let b = params.predict_noise(&z, level, &p, &mut off, AttentionMode::PerFrame).unwrap();
        assert_eq!(a, b);
        assert!(off.records.is_empty());
        assert_eq!(on.records.len(), 1);
        let rec = &on.records[0];
        assert_eq!(rec.map.dim(), (12, 6));
        assert_eq!(rec.timestep, 3);
        for row in rec.map.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn temporal_mode_with_self_as_neighbor_matches_per_frame() {
        let (params, z, p, level) = setup();
        let mut cap = AttentionCapture::disabled();
        let a = params.predict_noise(&z, level, &p, &mut cap, AttentionMode::PerFrame).unwrap();
        let b = params.predict_noise(&z, level, &p, &mut cap, AttentionMode::TemporalSpatial { neighbor: &z }).unwrap();
        let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "{diff}");
        let other = random_latent(9, &params.arch, 3, 4);
        let c = params.predict_noise(&z, level, &p, &mut cap, AttentionMode::TemporalSpatial { neighbor: &other }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_errors() {
        let (params, z, p, level) = setup();
        let mut cap = AttentionCapture::disabled();
        let wrong = Latent::zeros(5, 3, 4);
        assert!(params.predict_noise(&wrong, level, &p, &mut cap, AttentionMode::PerFrame).is_err());
        let other = random_latent(2, &params.arch, 4, 4);
        assert!(params.predict_noise(&z, level, &p, &mut cap, AttentionMode::TemporalSpatial { neighbor: &other }).is_err());
        let bad_prompt = PromptEmbedding { matrix: Array2::zeros((2, 3)) };
        assert!(params.predict_noise(&z, level, &bad_prompt, &mut cap, AttentionMode::PerFrame).is_err());
    }

    #[test]
    fn training_loss_matches_inference_path() {
        let (params, z, p, level) = setup();
        let tokens = params.tokenize("a red square on gray floor").unwrap().tokens;
        let eps = random_latent(5, &params.arch, 3, 4).data;
        let pred = params.predict_noise(&z, level, &p, &mut AttentionCapture::disabled(), AttentionMode::PerFrame).unwrap();
        let direct = (&pred - &eps).mapv(|v| v * v).mean().unwrap();
        assert!((params.loss(&z, level, &tokens, &eps).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (params, z, _, level) = setup();
        let tokens = params.tokenize("a red square on gray floor").unwrap().tokens;
        let eps = random_latent(6, &params.arch, 3, 4).data;
        let (_, grads) = params.loss_and_gradients(&z, level, &tokens, &eps).unwrap();
        let probes = [
            ("in.w", (3, 2)),
            ("res0.conv1.w", (40, 5)),
            ("res1.conv2.w", (17, 1)),
            ("self.wq", (2, 6)),
            ("self.wo", (1, 1)),
            ("cross.wk", (4, 3)),
            ("cross.wv", (0, 7)),
            ("tok_emb", (10, 2)),
            ("time.w1", (1, 4)),
            ("out.b", (0, 9)),
            ("skip.w", (2, 5)),
            ("skip.b", (0, 3)),
        ];
        let h = 1e-5;
        for (name, idx) in probes {
            let eval = |delta: f64| {
                let mut q = params.clone();
                q.tensors_mut().get_mut(name).unwrap()[idx] += delta;
                q.loss(&z, level, &tokens, &eps).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[name][idx];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-3, "{name}{idx:?}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (params, ..) = setup();
        let c = params.to_container().unwrap();
        let back = DenoiserParams::from_container(&TensorContainer::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.arch, params.arch);
        for (name, t) in params.tensors() {
            let b = back.get(name);
            assert!(t.iter().zip(b.iter()).all(|(x, y)| (*x as f32) as f64 == *y));
        }
    }

    #[test]
    fn architecture_text_round_trips() {
        let a = Architecture { codec_seed: 17, ..Default::default() };
        assert_eq!(Architecture::parse(&a.to_text()).unwrap(), a);
        assert!(Architecture::parse("depth=3").is_err());
    }

    #[test]
    fn default_model_size() {
        let params = DenoiserParams::init(Architecture::default(), Vocab::default(), 0).unwrap();
        assert!(params.num_parameters() > 300_000);
    }
}
