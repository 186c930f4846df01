//! Text-image similarity scoring with a small dual encoder trained
//! contrastively on the synthetic corpus, plus the two clip-level metrics
//! built on it: frame-wise accuracy and temporal consistency.
//!
//! Image tower: average-pool the frame to a `g × g` grid (3·g² features),
//! linear → tanh → linear, L2-normalize. Text tower: mean of token
//! embeddings, linear, L2-normalize.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::ImageFrame;
use crate::denoiser::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::io::container::TensorContainer;
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScorerArch {
    pub grid: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ScorerArch {
    fn default() -> Self {
        Self { grid: 16, hidden: 96, embed_dim: 32 }
    }
}

impl ScorerArch {
    fn features(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn to_text(self) -> String {
        format!("grid={}\nhidden={}\nembed_dim={}\n", self.grid, self.hidden, self.embed_dim)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut a = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad scorer line {line:?}")))?;
            let n: usize = v.trim().parse().map_err(|_| Error::Format(format!("bad scorer value {line:?}")))?;
            match k.trim() {
                "grid" => a.grid = n,
                "hidden" => a.hidden = n,
                "embed_dim" => a.embed_dim = n,
                other => return Err(Error::Format(format!("unknown scorer key {other}"))),
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    pub arch: ScorerArch,
    pub vocab: Vocab,
    tensors: BTreeMap<String, Array2<f64>>,
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub vector: Array1<f64>,
}

impl EmbeddingVector {
    pub fn new(v: Array1<f64>) -> Result<Self> {
        let n = v.dot(&v).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self { vector: v / n })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.vector.dot(&other.vector).clamp(-1.0, 1.0)
    }
}

/// Average-pools a frame to `grid × grid`, centered around 0.
pub fn pooled_features(frame: &ImageFrame, grid: usize) -> Result<Array1<f64>> {
    let (_, h, w) = frame.pixels.dim();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::InvalidArgument(format!("frame {h}x{w} does not pool to a {grid}x{grid} grid")));
    }
    let (bh, bw) = (h / grid, w / grid);
    let norm = (bh * bw) as f64;
    let mut out = Array1::zeros(3 * grid * grid);
    for ((c, y, x), &v) in frame.pixels.indexed_iter() {
        out[(c * grid + y / bh) * grid + x / bw] += v;
    }
    out.mapv_inplace(|v| v / norm - 0.5);
    Ok(out)
}

fn text_weights(tokens: &[usize], vocab: usize) -> Array2<f64> {
    let mut m = Array2::zeros((1, vocab));
    for &t in tokens {
        m[[0, t]] += 1.0 / tokens.len() as f64;
    }
    m
}

impl DualEncoderParams {
    pub fn init(arch: ScorerArch, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize, std: f64| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
        };
        let (f, h, e, v) = (arch.features(), arch.hidden, arch.embed_dim, vocab.len());
        let mut tensors = BTreeMap::new();
        tensors.insert("img.w1".to_string(), normal(f, h, 1.0 / (f as f64).sqrt()));
        tensors.insert("img.b1".to_string(), Array2::zeros((1, h)));
        tensors.insert("img.w2".to_string(), normal(h, e, 1.0 / (h as f64).sqrt()));
        tensors.insert("txt.emb".to_string(), normal(v, e, 1.0));
        tensors.insert("txt.w".to_string(), normal(e, e, 1.0 / (e as f64).sqrt()));
        Self { arch, vocab, tensors }
    }

    fn image_raw(&self, feats: &Array2<f64>) -> Array2<f64> {
        let h = (feats.dot(&self.tensors["img.w1"]) + &self.tensors["img.b1"]).mapv(f64::tanh);
        h.dot(&self.tensors["img.w2"])
    }

    pub fn embed_image(&self, frame: &ImageFrame) -> Result<EmbeddingVector> {
        let f = pooled_features(frame, self.arch.grid)?.insert_axis(Axis(0));
        EmbeddingVector::new(self.image_raw(&f).row(0).to_owned())
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let p = tokenize(text, &self.vocab)?;
        let m = text_weights(&p.tokens, self.vocab.len()).dot(&self.tensors["txt.emb"]).dot(&self.tensors["txt.w"]);
        EmbeddingVector::new(m.row(0).to_owned())
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_text("arch", &self.arch.to_text())?;
        c.insert_text("vocab", &self.vocab.to_text())?;
        for (k, v) in &self.tensors {
            c.insert_f64(k.as_str(), v)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let arch = ScorerArch::parse(&c.get_text("arch")?)?;
        let vocab = Vocab::parse(&c.get_text("vocab")?)?;
        let template = Self::init(arch, vocab.clone(), 0);
        let mut tensors = BTreeMap::new();
        for (k, t) in &template.tensors {
            let m = c.get_matrix(k)?;
            if m.dim() != t.dim() {
                return Err(Error::Format(format!("scorer tensor {k} has shape {:?}", m.dim())));
            }
            tensors.insert(k.clone(), m);
        }
        Ok(Self { arch, vocab, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

/// Cosine similarity of the frame and text embeddings.
pub fn clip_score(frame: &ImageFrame, text: &str, params: &DualEncoderParams) -> Result<f64> {
    Ok(params.embed_image(frame)?.cosine(&params.embed_text(text)?))
}

/// Fraction of frames scoring strictly higher against `p_edit` than `p_src`.
pub fn frame_accuracy(frames: &[ImageFrame], p_src: &str, p_edit: &str, params: &DualEncoderParams) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("clip".into()));
    }
    let src = params.embed_text(p_src)?;
    let edit = params.embed_text(p_edit)?;
    let mut wins = 0;
    for f in frames {
        let e = params.embed_image(f)?;
        if e.cosine(&edit) > e.cosine(&src) {
            wins += 1;
        }
    }
    Ok(wins as f64 / frames.len() as f64)
}

/// Mean of consecutive cosines of precomputed embeddings.
pub fn consecutive_cosine_mean(embeddings: &[EmbeddingVector]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least two frames".into()));
    }
    let sum: f64 = embeddings.windows(2).map(|p| p[0].cosine(&p[1])).sum();
    Ok(sum / (embeddings.len() - 1) as f64)
}

pub fn temporal_consistency(frames: &[ImageFrame], params: &DualEncoderParams) -> Result<f64> {
    let e = frames.iter().map(|f| params.embed_image(f)).collect::<Result<Vec<_>>>()?;
    consecutive_cosine_mean(&e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub arch: ScorerArch,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Logit scale applied to cosine similarities.
    pub scale: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self { arch: ScorerArch::default(), steps: 1500, batch_size: 32, lr: 3e-3, scale: 10.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ScorerOutcome {
    pub params: DualEncoderParams,
    pub losses: Vec<f64>,
}

/// Symmetric InfoNCE over batches of (frame, caption) pairs. Pairs sharing a
/// caption within a batch are never both drawn.
pub fn train_scorer(data: &[(ImageFrame, String)], vocab: Vocab, config: &ScorerConfig) -> Result<ScorerOutcome> {
    if data.len() < 2 {
        return Err(Error::Empty("scorer training set needs at least two pairs".into()));
    }
    let arch = config.arch;
    let feats: Vec<Array1<f64>> = data.iter().map(|(f, _)| pooled_features(f, arch.grid)).collect::<Result<_>>()?;
    let tokens: Vec<Vec<usize>> = data.iter().map(|(_, c)| tokenize(c, &vocab).map(|p| p.tokens)).collect::<Result<_>>()?;
    let mut params = DualEncoderParams::init(arch, vocab, config.seed ^ 0xc11f);
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        order.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut seen = std::collections::BTreeSet::new();
        for &i in &order {
            if seen.insert(data[i].1.as_str()) {
                batch.push(i);
                if batch.len() == config.batch_size {
                    break;
                }
            }
        }
        if batch.len() < 2 {
            return Err(Error::InvalidArgument("scorer training needs at least two distinct captions".into()));
        }
        let b = batch.len();
        let x = Array2::from_shape_fn((b, arch.features()), |(r, c)| feats[batch[r]][c]);
        let tw = Array2::from_shape_fn((b, params.vocab.len()), |(r, c)| {
            let t = &tokens[batch[r]];
            t.iter().filter(|&&id| id == c).count() as f64 / t.len() as f64
        });
        let (loss, grads) = {
            let mut tape = Tape::new();
            let p: BTreeMap<String, _> = params.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v))).collect();
            let xv = tape.constant(x);
            let h = tape.matmul(xv, p["img.w1"]);
            let h = tape.add_row(h, p["img.b1"]);
            let h = tape.tanh(h);
            let img = tape.matmul(h, p["img.w2"]);
            let img = tape.l2_normalize_rows(img);
            let twv = tape.constant(tw);
            let txt = tape.matmul(twv, p["txt.emb"]);
            let txt = tape.matmul(txt, p["txt.w"]);
            let txt = tape.l2_normalize_rows(txt);
            let targets: Vec<usize> = (0..b).collect();
            let li = tape.matmul_nt(img, txt);
            let li = tape.scale(li, config.scale);
            let lt = tape.matmul_nt(txt, img);
            let lt = tape.scale(lt, config.scale);
            let a = tape.cross_entropy_rows(li, &targets);
            let c = tape.cross_entropy_rows(lt, &targets);
            let sum = tape.add(a, c);
            let loss = tape.scale(sum, 0.5);
            let mut g = tape.backward(loss);
            let grads: BTreeMap<String, Array2<f64>> = p.iter().filter_map(|(k, &v)| g.take(v).map(|g| (k.clone(), g))).collect();
            (tape.value(loss)[[0, 0]], grads)
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.update(&mut params.tensors, &grads);
        losses.push(loss);
    }
    Ok(ScorerOutcome { params, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub candidates: usize,
    pub chance: f64,
    pub matched_mean: f64,
    pub mismatched_mean: f64,
}

/// Top-1 caption retrieval among the distinct captions of `data`, plus mean
/// similarity of matched and mismatched (frame, caption) pairs.
pub fn retrieval_accuracy(params: &DualEncoderParams, data: &[(ImageFrame, String)]) -> Result<RetrievalReport> {
    let captions: Vec<&str> = data.iter().map(|(_, c)| c.as_str()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if captions.len() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least two distinct captions".into()));
    }
    let text: Vec<EmbeddingVector> = captions.iter().map(|c| params.embed_text(c)).collect::<Result<_>>()?;
    let (mut hits, mut matched, mut mismatched, mut n_mis) = (0usize, 0.0, 0.0, 0usize);
    for (frame, caption) in data {
        let e = params.embed_image(frame)?;
        let scores: Vec<f64> = text.iter().map(|t| e.cosine(t)).collect();
        let best = scores.iter().enumerate().fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
        let truth = captions.iter().position(|c| c == caption).expect("caption listed");
        hits += usize::from(best == truth);
        for (i, s) in scores.iter().enumerate() {
            if i == truth {
                matched += s;
            } else {
                mismatched += s;
                n_mis += 1;
            }
        }
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / data.len() as f64,
        candidates: captions.len(),
        chance: 1.0 / captions.len() as f64,
        matched_mean: matched / data.len() as f64,
        mismatched_mean: mismatched / n_mis.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub clip: String,
    pub value: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("metric,clip,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", r.metric, r.clip, r.value);
    }
    s
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let mw = rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
    let cw = rows.iter().map(|r| r.clip.len()).max().unwrap_or(0).max(4);
    let mut s = format!("{:<mw$}  {:<cw$}  value\n", "metric", "clip");
    for r in rows {
        let _ = writeln!(s, "{:<mw$}  {:<cw$}  {:.4}", r.metric, r.clip, r.value);
    }
    s
}
