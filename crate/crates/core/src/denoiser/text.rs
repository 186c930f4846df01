//! Vocabulary, whitespace tokenization, and prompt embeddings.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAX_PROMPT_TOKENS: usize = 16;
pub const UNK: usize = 0;

/// The fixed word table shared by the corpus generator, the denoiser, and
/// the scorer. Index 0 is `<unk>`.
pub const DEFAULT_WORDS: [&str; 32] = [
    "<unk>", "a", "an", "the", "on", "floor", "surface", "ice", "grass", "sand", "red", "green", "blue", "yellow", "purple", "orange",
    "cyan", "magenta", "white", "black", "gray", "brown", "dark", "light", "small", "big", "square", "circle", "triangle", "diamond",
    "cross", "ring",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { words: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect() }
    }
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some("<unk>") {
            return Err(Error::InvalidArgument("vocabulary must start with <unk>".into()));
        }
        Ok(Self { words })
    }

    /// One word per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPrompt {
    pub tokens: Vec<usize>,
    pub raw: String,
}

impl TextPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercased whitespace tokenization; unknown words map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TextPrompt> {
    let lower = text.to_lowercase();
    let tokens: Vec<usize> = lower.split_whitespace().map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    if tokens.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    if tokens.len() > MAX_PROMPT_TOKENS {
        return Err(Error::InvalidArgument(format!("prompt has {} tokens, at most {MAX_PROMPT_TOKENS} allowed", tokens.len())));
    }
    Ok(TextPrompt { tokens, raw: text.to_string() })
}

/// Position of the first token that differs between two prompts.
pub fn first_difference(a: &TextPrompt, b: &TextPrompt) -> Option<usize> {
    let n = a.len().min(b.len());
    (0..n).find(|&i| a.tokens[i] != b.tokens[i]).or(if a.len() != b.len() { Some(n) } else { None })
}

/// `(L, d)` prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Array2<f64>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

/// Transformer-style sinusoidal encoding of a scalar position.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    out
}

/// Row `i` is `table[token_i] + sinusoidal(i)`.
pub fn embed_tokens(tokens: &[usize], table: &Array2<f64>) -> Result<PromptEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let d = table.ncols();
    let mut matrix = Array2::zeros((tokens.len(), d));
    for (i, &id) in tokens.iter().enumerate() {
        if id >= table.nrows() {
            return Err(Error::TokenOutOfRange { id, size: table.nrows() });
        }
        let pos = sinusoidal(i as f64, d);
        for j in 0..d {
            matrix[[i, j]] = table[[id, j]] + pos[j];
        }
    }
    Ok(PromptEmbedding { matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_known_words() {
        let v = Vocab::default();
        let p = tokenize("a red square", &v).unwrap();
        assert_eq!(p.tokens, vec![v.id("a").unwrap(), v.id("red").unwrap(), v.id("square").unwrap()]);
        assert_eq!(p.raw, "a red square");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::default();
        let p = tokenize("A zzz Square", &v).unwrap();
        assert_eq!(p.tokens[1], UNK);
        assert_eq!(p.tokens[2], v.id("square").unwrap());
    }

    #[test]
    fn token_index_is_whitespace_position() {
        let v = Vocab::default();
        let p = tokenize("a  blue   circle on gray floor", &v).unwrap();
        assert_eq!(p.tokens[2], v.id("circle").unwrap());
        assert_eq!(p.tokens[4], v.id("gray").unwrap());
    }

    #[test]
    fn rejects_empty_and_long_prompts() {
        let v = Vocab::default();
        assert!(tokenize("   ", &v).is_err());
        assert!(tokenize(&"a ".repeat(17), &v).is_err());
    }

    #[test]
    fn first_difference_positions() {
        let v = Vocab::default();
        let a = tokenize("a red square on gray floor", &v).unwrap();
        let b = tokenize("a blue square on gray floor", &v).unwrap();
        assert_eq!(first_difference(&a, &b), Some(1));
        assert_eq!(first_difference(&a, &a), None);
    }

    #[test]
    fn default_vocab_round_trips_through_text() {
        let v = Vocab::default();
        assert_eq!(v.len(), 32);
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("red\nblue\n").is_err());
    }

    #[test]
    fn embedding_rows() {
        let table = Array2::from_shape_fn((4, 6), |(r, c)| (r * 10 + c) as f64);
        let e = embed_tokens(&[2], &table).unwrap();
        let pos = sinusoidal(0.0, 6);
        for j in 0..6 {
            assert_eq!(e.matrix[[0, j]], table[[2, j]] + pos[j]);
        }
        let a = embed_tokens(&[1, 2, 3], &table).unwrap();
        let b = embed_tokens(&[1, 0, 3], &table).unwrap();
        assert_eq!(a, embed_tokens(&[1, 2, 3], &table).unwrap());
        assert_eq!(a.matrix.row(0), b.matrix.row(0));
        assert_ne!(a.matrix.row(1), b.matrix.row(1));
        assert_eq!(a.matrix.row(2), b.matrix.row(2));
        assert!(embed_tokens(&[4], &table).is_err());
    }
}
