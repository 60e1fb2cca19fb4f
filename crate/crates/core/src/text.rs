//! Captions to fixed-length sentence vectors.
//!
//! Two sources produce the linguistic feature vector: a bundled
//! deterministic hashing encoder ([`encode_toy`]), and JSONL files of
//! externally precomputed sentence embeddings (e.g. real transformer [CLS]
//! vectors) via [`EmbeddingFile`]. Word-masking ablations replace lexicon
//! words with the literal token `UNK` before encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Default sentence-embedding width, matching common transformer encoders.
pub const DEFAULT_DIM: usize = 768;

/// Where an embedding's values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    ToyHash,
    ExternalFile,
}

/// A fixed-length sentence vector.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub dim: usize,
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Lowercase, split on non-alphanumeric runs, drop empties.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Hash each token with 64-bit FNV-1a into bucket `h mod dim`, signed by
/// bit 63 (+1 when clear), then L2-normalize the accumulated counts.
pub fn encode_toy(tokens: &[String], dim: usize) -> Result<TextEmbedding> {
    if tokens.is_empty() {
        return Err(Error::EmptyCaption);
    }
    assert!(dim > 0, "embedding dim must be positive");
    let mut values = vec![0.0f64; dim];
    for t in tokens {
        let h = fnv1a64(t);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v /= norm;
        }
    } else {
        // All token contributions cancelled; fall back to a fixed unit
        // vector so the invariant |v| = 1 still holds.
        values[0] = 1.0;
    }
    Ok(TextEmbedding {
        dim,
        values,
        source: EmbeddingSource::ToyHash,
    })
}

/// Replace every token found in `lexicon` with the literal `UNK`.
pub fn mask_words(tokens: &[String], lexicon: &Lexicon) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if lexicon.contains(t) {
                "UNK".to_owned()
            } else {
                t.clone()
            }
        })
        .collect()
}

/// A named set of lowercase tokens used for word-masking ablations.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub name: String,
    words: BTreeSet<String>,
}

impl Lexicon {
    /// Build from tokens. Tokens are lowercased; whitespace is rejected.
    /// An empty word set is allowed here (it makes masking a no-op); lexicon
    /// files must be non-empty, see [`Lexicon::load`].
    pub fn new(name: &str, words: impl IntoIterator<Item = String>) -> Result<Lexicon> {
        let mut set = BTreeSet::new();
        for w in words {
            if w.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "lexicon {:?}: token {:?} contains whitespace",
                    name, w
                )));
            }
            if !w.is_empty() {
                set.insert(w.to_lowercase());
            }
        }
        Ok(Lexicon {
            name: name.to_owned(),
            words: set,
        })
    }

    /// Load from a file with one token per line; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Lexicon> {
        let content = std::fs::read_to_string(path)?;
        let words: Vec<String> = content
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_owned())
            .filter(|l| !l.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Validation(format!(
                "lexicon file {} contains no tokens",
                path.display()
            )));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "lexicon".to_owned());
        Lexicon::new(&name, words)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// Common color words; the closed class used by the `no-color` ablation and
/// the caption statistics.
pub const COLOR_WORDS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "violet", "pink", "brown", "black",
    "white", "gray", "grey", "cyan", "magenta", "beige", "tan", "gold", "golden", "silver",
    "maroon", "navy", "teal", "olive", "crimson", "turquoise",
];

/// The bundled color lexicon.
pub fn color_lexicon() -> Lexicon {
    Lexicon::new("colors", COLOR_WORDS.iter().map(|s| (*s).to_owned()))
        .expect("bundled color lexicon is valid")
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    id: String,
    v: Vec<f64>,
}

/// Precomputed embeddings keyed by sample id.
///
/// File format: JSON Lines; the first line is `{"dim": n}`, every following
/// line is `{"id": "...", "v": [f64; n]}`.
#[derive(Debug, Clone)]
pub struct EmbeddingFile {
    pub dim: usize,
    by_id: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFile {
    pub fn load(path: &Path) -> Result<EmbeddingFile> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation("embedding file is empty".into()))??;
        let header: HeaderLine = serde_json::from_str(&header)
            .map_err(|e| Error::Validation(format!("embedding header: {}", e)))?;
        if header.dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        let mut by_id = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("embedding line {}: {}", lineno + 2, e)))?;
            if rec.v.len() != header.dim {
                return Err(Error::Validation(format!(
                    "embedding for {:?} has length {} but the declared dim is {}",
                    rec.id,
                    rec.v.len(),
                    header.dim
                )));
            }
            by_id.insert(rec.id, rec.v);
        }
        Ok(EmbeddingFile {
            dim: header.dim,
            by_id,
        })
    }

    pub fn save<'a>(
        path: &Path,
        dim: usize,
        entries: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &HeaderLine { dim })?;
        out.write_all(b"\n")?;
        for (id, v) in entries {
            assert_eq!(v.len(), dim, "embedding for {:?} has the wrong length", id);
            serde_json::to_writer(
                &mut out,
                &VectorLine {
                    id: id.to_owned(),
                    v: v.to_vec(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<TextEmbedding> {
        let values = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_owned()))?;
        Ok(TextEmbedding {
            dim: self.dim,
            values: values.clone(),
            source: EmbeddingSource::ExternalFile,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.by_id.keys().map(String::as_str)
    }
}

/// Load a single embedding by id from a JSONL embedding file.
pub fn load_external(path: &Path, id: &str) -> Result<TextEmbedding> {
    EmbeddingFile::load(path)?.get(id)
}

/// Caption-to-vector pipeline: an embedding source plus an optional
/// word-masking lexicon applied before the toy encoder.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    source: EncoderSource,
    mask: Option<Lexicon>,
}

#[derive(Debug, Clone)]
enum EncoderSource {
    Toy { dim: usize },
    External(EmbeddingFile),
}

impl CaptionEncoder {
    pub fn toy(dim: usize) -> CaptionEncoder {
        CaptionEncoder {
            source: EncoderSource::Toy { dim },
            mask: None,
        }
    }

    pub fn external(file: EmbeddingFile) -> CaptionEncoder {
        CaptionEncoder {
            source: EncoderSource::External(file),
            mask: None,
        }
    }

    /// Mask lexicon words with `UNK` before encoding. Only the toy encoder
    /// can mask (external vectors are already computed).
    pub fn with_mask(mut self, lexicon: Lexicon) -> Result<CaptionEncoder> {
        if matches!(self.source, EncoderSource::External(_)) {
            return Err(Error::Validation(
                "word masking needs the toy encoder; re-embed externally with masked captions instead".into(),
            ));
        }
        self.mask = Some(lexicon);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match &self.source {
            EncoderSource::Toy { dim } => *dim,
            EncoderSource::External(f) => f.dim,
        }
    }

    pub fn encode(&self, id: &str, caption: &str) -> Result<TextEmbedding> {
        match &self.source {
            EncoderSource::Toy { dim } => {
                let mut tokens = tokenize(caption);
                if let Some(lex) = &self.mask {
                    tokens = mask_words(&tokens, lex);
                }
                encode_toy(&tokens, *dim)
            }
            EncoderSource::External(file) => file.get(id),
        }
    }
}
